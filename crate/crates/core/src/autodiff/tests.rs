use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Scalar probe `mean(y * w)` with fixed random `w`, so that no primitive's
/// gradient cancels by symmetry.
fn weighted_mean(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, w)?;
    g.mean_reduce(p, 0)
}

/// Direct 6-nested-loop convolution, independent of im2col/gemm.
fn conv2d_reference(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
    let [o, _, kh, kw] = w.shape()[..] else { unreachable!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bn * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bn * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = StdRng::seed_from_u64(1);
    let mut g = Graph::new();
    let xt = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let x = g.input(xt.clone());
    let k = g.input(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn depthwise_constant_field() {
    let (c, s) = (0.7f32, 2.5f32);
    let kernel: Vec<f32> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.2, 0.3, 0.4, 0.1];
    let ksum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|v| v * s / ksum).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::full([1, 1, 6, 6], c));
    let k = g.input(Tensor::new([1, 1, 3, 3], kernel).unwrap());
    let y = g.depthwise_conv2d(x, k, None, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 1, 6, 6]);
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((out.data()[yy * 6 + xx] - c * s).abs() < 1e-5);
        }
    }
    // A corner sees only the 2x2 lower-right quarter of the kernel.
    assert!(out.data()[0] < c * s);
}

#[test]
fn mean_backward_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
    let m = g.mean_reduce(x, 0).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn sigmoid_sum_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0).with_grad());
    let s = g.sigmoid(x).unwrap();
    let r = g.sum_reduce(s, 0).unwrap();
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn gradcheck_linear_is_exact() {
    // Dyadic values and a power-of-two step keep every f32 sum exact, so
    // the only error left is the rounding in the final division.
    let mut rng = StdRng::seed_from_u64(2);
    let data = (0..12).map(|_| rng.random_range(-256i32..256) as f32 / 256.0).collect();
    let x = Tensor::new([3, 4], data).unwrap();
    let err = gradcheck(|g, x| g.sum_reduce(x, 0), &x, 1.0 / 1024.0).unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let x = Tensor::scalar(1.0);
    assert!(gradcheck(|g, x| g.sum_reduce(x, 0), &x, 1.0).is_err());
}

#[test]
fn second_backward_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0).with_grad());
    let y = g.scale(x, 2.0).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    assert_eq!(g.grad(x).unwrap(), &[2.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([2]).with_grad());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros([2, 3]));
    let b = g.input(Tensor::zeros([3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let x = g.input(Tensor::zeros([1, 3, 4, 4]));
    let w = g.input(Tensor::zeros([2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
}

#[test]
fn non_finite_is_detected() {
    let mut g = Graph::new().with_finite_checks(true);
    let x = g.input(Tensor::scalar(f32::MAX));
    match g.scale(x, 10.0) {
        Err(Error::NonFinite { op, node }) => {
            assert_eq!(op, "scale");
            assert_eq!(node, 1);
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = StdRng::seed_from_u64(3);
    let mut g = Graph::new();
    let mut t = rand_tensor(&mut rng, &[5, 7]);
    t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
    let x = g.input(t);
    let y = g.softmax_lastdim(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn layer_norm_standardizes_channels() {
    let mut rng = StdRng::seed_from_u64(4);
    let mut g = Graph::new();
    let mut t = rand_tensor(&mut rng, &[2, 6, 3, 3]);
    t.data_mut().iter_mut().for_each(|v| *v = *v * 5.0 + 2.0);
    let x = g.input(t);
    let y = g.layer_norm(x, None, None).unwrap();
    let out = g.value(y).data();
    for n in 0..2 {
        for i in 0..9 {
            let vals: Vec<f32> = (0..6).map(|c| out[(n * 6 + c) * 9 + i]).collect();
            let mu = vals.iter().sum::<f32>() / 6.0;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / 6.0;
            assert!(mu.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3, "var = {var}");
        }
    }
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    let mut rng = StdRng::seed_from_u64(5);
    for (o, k, stride, pad) in [(4, 3, 1, 1), (2, 1, 1, 0), (5, 2, 2, 0), (3, 4, 4, 0), (2, 3, 2, 1)] {
        let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
        let w = rand_tensor(&mut rng, &[o, 3, k, k]);
        let b: Vec<f32> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = conv2d_reference(&x, &w, &b, stride, pad);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.input(w));
        let bv = g.input(Tensor::new([o], b).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }
}

#[test]
fn upsample_and_pad_shapes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let u = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.shape(u), &[1, 1, 4, 4]);
    assert_eq!(&g.value(u).data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    let p = g.pad_zero(x, [1, 0, 0, 2]).unwrap();
    assert_eq!(g.shape(p), &[1, 1, 3, 4]);
    assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
}

#[test]
fn mul_broadcasts_scalar_operand() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let s = g.input(Tensor::scalar(2.0).with_grad());
    let y = g.mul(x, s).unwrap();
    let r = g.sum_reduce(y, 0).unwrap();
    g.backward(r).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    assert_eq!(g.grad(s).unwrap(), &[6.0]);
}

fn small_shape(rng: &mut StdRng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=6)).collect()
}

/// A handful of random draws per primitive; the acceptance suite runs the
/// full hundred.
#[test]
fn primitives_pass_gradcheck() {
    let mut rng = StdRng::seed_from_u64(6);
    for trial in 0..10u64 {
        let shape = small_shape(&mut rng, 3);
        let x = rand_tensor(&mut rng, &shape);
        let other = rand_tensor(&mut rng, &shape);
        let unary: [(&str, f32, &dyn Fn(&mut Graph, Var) -> Result<Var>); 6] = [
            ("relu", 1e-3, &|g, v| g.relu(v)),
            ("gelu", 1e-3, &|g, v| g.gelu(v)),
            ("sigmoid", 1e-3, &|g, v| g.sigmoid(v)),
            ("softmax", 5e-3, &|g, v| g.softmax_lastdim(v)),
            ("l2norm", 1e-3, &|g, v| g.l2_normalize_lastdim(v)),
            ("scale", 1e-3, &|g, v| g.scale(v, -1.5)),
        ];
        for (name, tol, op) in unary {
            let err = gradcheck(|g, v| {
                let y = op(g, v)?;
                weighted_mean(g, y, trial)
            }, &x, 1e-3)
            .unwrap();
            assert!(err < tol, "{name}: {err}");
        }
        let err = gradcheck(|g, v| {
            let o = g.constant(other.clone());
            let y = g.mul(v, o)?;
            let z = g.add(y, v)?;
            weighted_mean(g, z, trial)
        }, &x, 1e-3)
        .unwrap();
        assert!(err < 1e-3, "mul/add: {err}");
    }
}

#[test]
fn conv_family_passes_gradcheck() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 6]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let dw = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let conv = |stride, pad| {
        let (w, b) = (w.clone(), b.clone());
        move |g: &mut Graph, v: Var| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(v, wv, Some(bv), stride, pad)?;
            weighted_mean(g, y, 1)
        }
    };
    assert!(gradcheck(conv(1, 1), &x, 1e-3).unwrap() < 1e-3);
    assert!(gradcheck(conv(2, 0), &x, 1e-3).unwrap() < 1e-3);
    // Weight gradient.
    let err = gradcheck(|g, wv| {
        let xv = g.constant(x.clone());
        let y = g.conv2d(xv, wv, None, 2, 1)?;
        weighted_mean(g, y, 2)
    }, &w, 1e-3)
    .unwrap();
    assert!(err < 1e-3, "conv weight: {err}");
    let err = gradcheck(|g, v| {
        let k = g.constant(dw.clone());
        let y = g.depthwise_conv2d(v, k, None, 1)?;
        weighted_mean(g, y, 3)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3, "depthwise input: {err}");
    let err = gradcheck(|g, k| {
        let xv = g.constant(x.clone());
        let y = g.depthwise_conv2d(xv, k, None, 1)?;
        weighted_mean(g, y, 4)
    }, &dw, 1e-3)
    .unwrap();
    assert!(err < 1e-3, "depthwise kernel: {err}");
}

#[test]
fn layer_norm_affine_gradcheck() {
    let mut rng = StdRng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 5, 3, 2]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let err = gradcheck(|g, v| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(v, Some(gm), Some(bt))?;
        weighted_mean(g, y, 5)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 5e-3, "layer_norm input: {err}");
    let err = gradcheck(|g, gm| {
        let (xv, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(xv, Some(gm), Some(bt))?;
        weighted_mean(g, y, 6)
    }, &gamma, 1e-3)
    .unwrap();
    assert!(err < 5e-3, "layer_norm gamma: {err}");
}

#[test]
fn structural_ops_gradcheck() {
    let mut rng = StdRng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 4]);
    let other = rand_tensor(&mut rng, &[1, 3, 3, 4]);
    let err = gradcheck(|g, v| {
        let u = g.upsample_nearest2x(v)?;
        weighted_mean(g, u, 7)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3);
    let err = gradcheck(|g, v| {
        let o = g.constant(other.clone());
        let c = g.concat_channels(&[o, v, o])?;
        weighted_mean(g, c, 8)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3);
    let err = gradcheck(|g, v| {
        let p = g.pad_zero(v, [1, 2, 0, 3])?;
        weighted_mean(g, p, 9)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3);
    let err = gradcheck(|g, v| {
        let r = g.reshape(v, &[2, 12])?;
        let m = g.mean_reduce(r, 1)?;
        weighted_mean(g, m, 10)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3);
}

#[test]
fn matmul_gradcheck_both_operands() {
    let mut rng = StdRng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 5]);
    let bt = rand_tensor(&mut rng, &[2, 5, 4]);
    for transpose in [false, true] {
        let rhs = if transpose { bt.clone() } else { b.clone() };
        let err = gradcheck(|g, v| {
            let r = g.constant(rhs.clone());
            let y = g.matmul(v, r, transpose)?;
            weighted_mean(g, y, 11)
        }, &a, 1e-3)
        .unwrap();
        assert!(err < 1e-3, "lhs transpose={transpose}: {err}");
        let err = gradcheck(|g, v| {
            let l = g.constant(a.clone());
            let y = g.matmul(l, v, transpose)?;
            weighted_mean(g, y, 12)
        }, &rhs, 1e-3)
        .unwrap();
        assert!(err < 1e-3, "rhs transpose={transpose}: {err}");
    }
}
