//! Batch and group normalization.
//!
//! Training-mode batch norm normalizes with the current batch statistics and
//! reports them so the owning layer can update its running estimates;
//! eval-mode batch norm treats the supplied running statistics as constants.

use super::{Element, Tensor, VjpFn};
use crate::error::{Result, SerError};

fn split_bchw(op: &'static str, shape: &[usize]) -> Result<(bool, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((true, *b, *c, *h * *w)),
        [c, h, w] => Ok((false, 1, *c, *h * *w)),
        other => Err(SerError::Dim {
            op,
            detail: format!("expected rank 3 or 4, got shape {other:?}"),
        }),
    }
}

fn check_affine(op: &'static str, c: usize, gamma: &Tensor<impl Element>, beta: &Tensor<impl Element>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(SerError::Dim {
            op,
            detail: format!(
                "affine shapes {:?}/{:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    Ok(())
}

/// Batch norm over the batch and spatial axes, using batch statistics.
/// Returns the normalized tensor plus the per-channel mean and biased
/// variance of this batch.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (_, b, c, plane) = split_bchw("batch_norm", x.shape())?;
    check_affine("batch_norm", c, gamma, beta)?;
    let n = b * plane;
    let inv_n = T::one() / T::from_f64(n as f64);
    let eps = T::from_f64(eps);
    let data = x.data();

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let mut s = T::zero();
            for &v in &data[base..base + plane] {
                s = s + v;
            }
            mean[ci] = mean[ci] + s;
        }
    }
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let mut s = T::zero();
            for &v in &data[base..base + plane] {
                let d = v - mean[ci];
                s = s + d * d;
            }
            var[ci] = var[ci] + s;
        }
    }
    for v in var.iter_mut() {
        *v = *v * inv_n;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                let h = (data[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                out[i] = gd[ci] * h + bd[ci];
            }
        }
    }

    let shape = x.shape().to_vec();
    let (xc, gc) = (x.clone(), gamma.clone());
    let (xhat_c, inv_std_c) = (xhat, inv_std);
    let vjp: VjpFn<T> = Box::new(move |g| {
        let gd = gc.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut sum_dxhat = vec![T::zero(); c];
        let mut sum_dxhat_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    let dxh = g[i] * gd[ci];
                    dgamma[ci] = dgamma[ci] + g[i] * xhat_c[i];
                    dbeta[ci] = dbeta[ci] + g[i];
                    sum_dxhat[ci] = sum_dxhat[ci] + dxh;
                    sum_dxhat_xhat[ci] = sum_dxhat_xhat[ci] + dxh * xhat_c[i];
                }
            }
        }
        let dx = if xc.requires_grad() {
            let mut dx = vec![T::zero(); xhat_c.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let m1 = sum_dxhat[ci] * inv_n;
                    let m2 = sum_dxhat_xhat[ci] * inv_n;
                    for i in base..base + plane {
                        let dxh = g[i] * gd[ci];
                        dx[i] = inv_std_c[ci] * (dxh - m1 - xhat_c[i] * m2);
                    }
                }
            }
            Some(dx)
        } else {
            None
        };
        vec![dx, Some(dgamma), Some(dbeta)]
    });
    let y = Tensor::from_op(out, shape, vec![x.clone(), gamma.clone(), beta.clone()], vjp);
    Ok((y, mean, var))
}

/// Batch norm with frozen (running) statistics.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, b, c, plane) = split_bchw("batch_norm", x.shape())?;
    check_affine("batch_norm", c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(SerError::Dim {
            op: "batch_norm",
            detail: format!("running stats length != channel count {c}"),
        });
    }
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let data = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); data.len()];
    let mut xhat = vec![T::zero(); data.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                let h = (data[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                out[i] = gd[ci] * h + bd[ci];
            }
        }
    }
    let shape = x.shape().to_vec();
    let (xc, gc) = (x.clone(), gamma.clone());
    let inv_std_c = inv_std;
    let vjp: VjpFn<T> = Box::new(move |g| {
        let gd = gc.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                    dbeta[ci] = dbeta[ci] + g[i];
                }
            }
        }
        let dx = if xc.requires_grad() {
            let mut dx = vec![T::zero(); xhat.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let k = gd[ci] * inv_std_c[ci];
                    for i in base..base + plane {
                        dx[i] = g[i] * k;
                    }
                }
            }
            Some(dx)
        } else {
            None
        };
        vec![dx, Some(dgamma), Some(dbeta)]
    });
    Ok(Tensor::from_op(
        out,
        shape,
        vec![x.clone(), gamma.clone(), beta.clone()],
        vjp,
    ))
}

/// Group normalization: per-sample statistics over each channel group, then
/// a per-channel affine map.
pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, b, c, plane) = split_bchw("group_norm", x.shape())?;
    check_affine("group_norm", c, gamma, beta)?;
    if groups == 0 || c % groups != 0 {
        return Err(SerError::Config(format!(
            "group_norm: groups {groups} must divide channel count {c}"
        )));
    }
    let cpg = c / groups;
    let n = cpg * plane;
    let inv_n = T::one() / T::from_f64(n as f64);
    let eps = T::from_f64(eps);
    let data = x.data();

    let mut out = vec![T::zero(); data.len()];
    let mut xhat = vec![T::zero(); data.len()];
    let mut inv_std = vec![T::zero(); b * groups];
    let (gd, bd) = (gamma.data(), beta.data());
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cpg) * plane;
            let end = start + n;
            let mut mean = T::zero();
            for &v in &data[start..end] {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in &data[start..end] {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[bi * groups + gi] = istd;
            for rel in 0..cpg {
                let ci = gi * cpg + rel;
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    let h = (data[i] - mean) * istd;
                    xhat[i] = h;
                    out[i] = gd[ci] * h + bd[ci];
                }
            }
        }
    }

    let shape = x.shape().to_vec();
    let (xc, gc) = (x.clone(), gamma.clone());
    let vjp: VjpFn<T> = Box::new(move |g| {
        let gd = gc.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                    dbeta[ci] = dbeta[ci] + g[i];
                }
            }
        }
        let dx = if xc.requires_grad() {
            let mut dx = vec![T::zero(); xhat.len()];
            for bi in 0..b {
                for gi in 0..groups {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for rel in 0..cpg {
                        let ci = gi * cpg + rel;
                        let base = (bi * c + ci) * plane;
                        for i in base..base + plane {
                            let dxh = g[i] * gd[ci];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[i];
                        }
                    }
                    let m1 = sum_dxhat * inv_n;
                    let m2 = sum_dxhat_xhat * inv_n;
                    let istd = inv_std[bi * groups + gi];
                    for rel in 0..cpg {
                        let ci = gi * cpg + rel;
                        let base = (bi * c + ci) * plane;
                        for i in base..base + plane {
                            let dxh = g[i] * gd[ci];
                            dx[i] = istd * (dxh - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Some(dx)
        } else {
            None
        };
        vec![dx, Some(dgamma), Some(dbeta)]
    });
    Ok(Tensor::from_op(
        out,
        shape,
        vec![x.clone(), gamma.clone(), beta.clone()],
        vjp,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_matches_mean_var_oracle() {
        // 1 sample, 4 channels, 2 groups, 2x2 plane.
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.713).sin() * 2.0 + 0.3).collect();
        let x = Tensor::leaf(data.clone(), &[4, 2, 2], false).unwrap();
        let gamma = Tensor::from_vec(vec![1.0; 4], &[4]).unwrap();
        let beta = Tensor::from_vec(vec![0.0; 4], &[4]).unwrap();
        let y = group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap();

        for g in 0..2 {
            let group: Vec<f64> = data[g * 8..(g + 1) * 8].to_vec();
            let mean: f64 = group.iter().sum::<f64>() / 8.0;
            let var: f64 = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (i, &v) in group.iter().enumerate() {
                let expect = (v - mean) / (var + 1e-5).sqrt();
                let got = y.data()[g * 8 + i];
                assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn group_norm_output_is_standardized_per_group() {
        let data: Vec<f64> = (0..32).map(|i| (i as f64).cos() * 3.0 - 1.0).collect();
        let x = Tensor::leaf(data, &[2, 4, 2, 2], false).unwrap();
        let gamma = Tensor::from_vec(vec![1.0; 4], &[4]).unwrap();
        let beta = Tensor::from_vec(vec![0.0; 4], &[4]).unwrap();
        let y = group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap();
        for b in 0..2 {
            for g in 0..2 {
                let vals = &y.data()[b * 16 + g * 8..b * 16 + (g + 1) * 8];
                let mean: f64 = vals.iter().sum::<f64>() / 8.0;
                let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn group_norm_rejects_non_divisor() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        let gamma = Tensor::<f64>::zeros(&[3]);
        let beta = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(
            group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap_err(),
            SerError::Config(_)
        ));
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = Tensor::leaf(data, &[2, 3, 2, 2], false).unwrap();
        let gamma = Tensor::from_vec(vec![1.0; 3], &[3]).unwrap();
        let beta = Tensor::from_vec(vec![0.0; 3], &[3]).unwrap();
        let (y, mean, var) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert_eq!(mean.len(), 3);
        assert_eq!(var.len(), 3);
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..2 {
                let base = (b * 3 + c) * 4;
                vals.extend_from_slice(&y.data()[base..base + 4]);
            }
            let m: f64 = vals.iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let x = Tensor::leaf(data.clone(), &[3, 2, 2], false).unwrap();
        let gamma = Tensor::from_vec(vec![1.0; 3], &[3]).unwrap();
        let beta = Tensor::from_vec(vec![0.0; 3], &[3]).unwrap();
        let y = batch_norm_eval(&x, &gamma, &beta, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        for (a, b) in y.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
