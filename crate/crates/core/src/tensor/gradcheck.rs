//! Central finite-difference gradient checking.
//!
//! The independent oracle for every differentiable operation and for whole
//! models: rebuild the computation from scratch around perturbed inputs and
//! compare the analytic gradients to `(f(x+eps) - f(x-eps)) / (2*eps)`.
//! Meant to run in `f64`; `f32` has nowhere near the headroom.

use super::{Graph, Tensor, Var};
use crate::error::{CoreError, Result};

/// Maximum relative error between analytic and numeric gradients of a
/// scalar-valued function over the given inputs.
///
/// `f` must rebuild the same computation every call (dropout masks are
/// reproducible because every graph here uses dropout seed 0). Relative
/// error per element is `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new(0);
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                t.grad = None;
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(CoreError::LossNotScalar {
                shape: g.value(out).shape().to_vec(),
            });
        }
        if !g.value(out).item().is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check" });
        }
        Ok((g, vars, out))
    };

    // Analytic gradients.
    let (mut g, vars, out) = eval(inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    for grads in &analytic {
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "grad_check" });
        }
    }

    // Central differences, one element at a time.
    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + eps;
            let (gp, _, op) = eval(&perturbed)?;
            let plus = gp.value(op).item();
            perturbed[ti].data_mut()[ei] = orig - eps;
            let (gm, _, om) = eval(&perturbed)?;
            let minus = gm.value(om).item();
            perturbed[ti].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(CoreError::NonFinite { op: "grad_check" });
            }
            let ad = analytic[ti][ei];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
