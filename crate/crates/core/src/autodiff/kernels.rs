//! Forward and backward loops for the heavy primitives.

/// `c = op(a) · op(b) + beta · c` for row-major matrices, where `op(a)` is
/// m×k and `op(b)` is k×n. A transposed operand is stored in its
/// untransposed layout (k×m for `a`, n×k for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a dense 2-D convolution over an NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * cols;
    let mut y = vec![0.0f32; g.batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * cols] };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut y[n * out_len..(n + 1) * out_len];
        let src: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        gemm(g.out_channels, rows, cols, weight, false, src, false, yn, 0.0);
        if let Some(b) = bias {
            for (o, chunk) in yn.chunks_exact_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`; each is computed only when requested.
pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * cols;
    let mut dx = need[0].then(|| vec![0.0f32; g.batch * in_len]);
    let mut dw = need[1].then(|| vec![0.0f32; weight.len()]);
    let mut db = need[2].then(|| vec![0.0f32; g.out_channels]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * cols] };
    let mut dcol = if g.is_pointwise() || !need[0] {
        Vec::new()
    } else {
        vec![0.0f32; rows * cols]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let src: &[f32] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            gemm(g.out_channels, cols, rows, dyn_, false, src, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, g.out_channels, cols, weight, true, dyn_, false, dxn, 1.0);
            } else {
                gemm(rows, g.out_channels, cols, weight, true, dyn_, false, &mut dcol, 0.0);
                col2im_add(&dcol, g, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dyn_.chunks_exact(cols).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a stride-1 depthwise convolution (one k×k filter per channel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthwiseGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl DepthwiseGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad - self.kernel + 1
    }

    /// Output column range for which `ox + kx - pad` lands inside the input.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.width + self.pad).saturating_sub(kx).min(self.out_w());
        (lo, hi.max(lo))
    }
}

pub fn depthwise_forward(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &DepthwiseGeom,
) -> Vec<f32> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0f32; g.batch * g.channels * oh * ow];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let plane = &x[(n * g.channels + c) * h * w..][..h * w];
            let out = &mut y[(n * g.channels + c) * oh * ow..][..oh * ow];
            let filt = &weight[c * k * k..(c + 1) * k * k];
            if let Some(b) = bias {
                out.fill(b[c]);
            }
            for oy in 0..oh {
                let out_row = &mut out[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..k {
                        let wv = filt[ky * k + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        let shift = kx as isize - g.pad as isize;
                        let src = &in_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &DepthwiseGeom,
    need: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = need[0].then(|| vec![0.0f32; x.len()]);
    let mut dw = need[1].then(|| vec![0.0f32; weight.len()]);
    let mut db = need[2].then(|| vec![0.0f32; g.channels]);
    for n in 0..g.batch {
        for c in 0..g.channels {
            let base_in = (n * g.channels + c) * h * w;
            let plane = &x[base_in..base_in + h * w];
            let grad = &dy[(n * g.channels + c) * oh * ow..][..oh * ow];
            let filt = &weight[c * k * k..(c + 1) * k * k];
            if let Some(db) = db.as_mut() {
                db[c] += grad.iter().sum::<f32>();
            }
            for oy in 0..oh {
                let g_row = &grad[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_start = iy as usize * w;
                    for kx in 0..k {
                        let (lo, hi) = g.valid_cols(kx);
                        let shift = kx as isize - g.pad as isize;
                        let a = (lo as isize + shift) as usize;
                        let b = (hi as isize + shift) as usize;
                        if let Some(dw) = dw.as_mut() {
                            let src = &plane[row_start + a..row_start + b];
                            let s: f32 = g_row[lo..hi].iter().zip(src).map(|(p, q)| p * q).sum();
                            dw[c * k * k + ky * k + kx] += s;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = filt[ky * k + kx];
                            let dst = &mut dx[base_in + row_start + a..base_in + row_start + b];
                            for (d, gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn depthwise_valid_cols_cover_padding() {
        let g = DepthwiseGeom { batch: 1, channels: 1, height: 4, width: 4, kernel: 3, pad: 1 };
        assert_eq!(g.valid_cols(0), (1, 4));
        assert_eq!(g.valid_cols(1), (0, 4));
        assert_eq!(g.valid_cols(2), (0, 3));
    }
}
