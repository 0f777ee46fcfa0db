//! Central finite-difference validation of analytic gradients.
//!
//! Used by the test suites to certify every differentiable operation and
//! every composite module. All checks run in `f64`; the step is small enough
//! that truncation error sits well below the tolerance, and large enough
//! that cancellation noise does too.

use crate::error::{Result, SerError};
use crate::nn::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckCfg {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on each checked coordinate.
    pub rel_tol: f64,
    /// Absolute floor below which a discrepancy is ignored (near-zero grads).
    pub abs_floor: f64,
    /// Max coordinates checked per tensor (0 = all).
    pub max_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            step: 1e-5,
            rel_tol: 1e-6,
            abs_floor: 1e-7,
            max_coords: 16,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

fn sample_coords(numel: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    if max_coords == 0 || numel <= max_coords {
        return (0..numel).collect();
    }
    // Small deterministic xorshift; collisions are fine, dedup at the end.
    let mut s = seed | 1;
    let mut out = Vec::with_capacity(max_coords);
    while out.len() < max_coords {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        let idx = (s % numel as u64) as usize;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out.sort_unstable();
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Check `d loss / d inputs[i]` for every tracked input leaf against central
/// finite differences. `f` must rebuild the loss from the given leaves.
pub fn check_input_gradients<F>(
    label: &str,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheckCfg,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for x in inputs {
        x.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|x| x.grad_or_zeros()).collect();

    let mut report = GradCheckReport::default();
    for (i, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            continue;
        }
        let base = x.data().to_vec();
        let shape = x.shape().to_vec();
        let coords = sample_coords(base.len(), cfg.max_coords, cfg.seed ^ (i as u64) << 8);
        for &k in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = base.clone();
                perturbed[k] += delta;
                let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                probe[i] = Tensor::leaf(perturbed, &shape, true)?;
                Ok(f(&probe)?.item())
            };
            let fd = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let an = analytic[i][k];
            let err = rel_err(an, fd);
            report.coords_checked += 1;
            report.max_rel_err = report.max_rel_err.max(if (an - fd).abs() <= cfg.abs_floor {
                0.0
            } else {
                err
            });
            if (an - fd).abs() > cfg.abs_floor && err > cfg.rel_tol {
                return Err(SerError::Contract(format!(
                    "gradient check `{label}` failed: input {i} coord {k}: analytic {an:.9e} vs fd {fd:.9e} (rel {err:.3e} > {:.1e})",
                    cfg.rel_tol
                )));
            }
        }
    }
    Ok(report)
}

/// Check `d loss / d theta` for a set of module parameters against central
/// finite differences. `f` must rebuild the loss from the parameters'
/// current values; each parameter is perturbed in place and restored.
pub fn check_param_gradients<F>(
    label: &str,
    params: &[&Parameter<f64>],
    f: F,
    cfg: &GradCheckCfg,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let mut report = GradCheckReport::default();
    for (i, p) in params.iter().enumerate() {
        let base = p.data();
        let coords = sample_coords(base.len(), cfg.max_coords, cfg.seed ^ (i as u64) << 8);
        for &k in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = base.clone();
                perturbed[k] += delta;
                p.set_data(perturbed);
                let v = f()?.item();
                Ok(v)
            };
            let plus = eval(cfg.step)?;
            let minus = eval(-cfg.step)?;
            p.set_data(base.clone());
            let fd = (plus - minus) / (2.0 * cfg.step);
            let an = analytic[i][k];
            let err = rel_err(an, fd);
            report.coords_checked += 1;
            report.max_rel_err = report.max_rel_err.max(if (an - fd).abs() <= cfg.abs_floor {
                0.0
            } else {
                err
            });
            if (an - fd).abs() > cfg.abs_floor && err > cfg.rel_tol {
                return Err(SerError::Contract(format!(
                    "gradient check `{label}` failed: param `{}` coord {k}: analytic {an:.9e} vs fd {fd:.9e} (rel {err:.3e} > {:.1e})",
                    p.name(),
                    cfg.rel_tol
                )));
            }
        }
    }
    Ok(report)
}

/// Fixed pseudo-random weights for symmetry-breaking scalarization of a
/// multi-output tensor: `loss = sum_i w_i * y_i`.
pub fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            // Map to roughly [-1, 1], avoiding tiny magnitudes.
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            0.25 + 1.5 * u
        })
        .collect()
}
