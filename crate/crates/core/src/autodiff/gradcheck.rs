use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar program `f` at `x`, over every element of `x`.
///
/// Each element contributes `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_at(f, x, eps, &all)
}

/// [`gradcheck`] restricted to the listed element indices of `x`.
pub fn gradcheck_at<F>(f: F, x: &Tensor, eps: f32, indices: &[usize]) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!("gradcheck eps {eps} outside [1e-4, 1e-2]")));
    }
    let mut g = Graph::new();
    let leaf = g.input(x.clone().with_grad());
    let root = f(&mut g, leaf)?;
    g.backward(root)?;
    let analytic = g
        .grad(leaf)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item() as f64)
    };

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        // Use the step actually representable in f32.
        let h = plus.data()[i] as f64 - minus.data()[i] as f64;
        let fd = (eval(plus)? - eval(minus)?) / h;
        let ad = analytic[i] as f64;
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst as f32)
}
