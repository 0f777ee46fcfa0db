//! Layers: convolution, linear, normalizations, bidirectional LSTM.

use rand::Rng;

use super::{kaiming_uniform, uniform_pm, Buffer, ParamModule, Parameter};
use crate::error::{Result, SerError};
use crate::tensor::{self, Element, Tensor};

/// 2D convolution layer (supports grouped and depthwise via `groups`).
pub struct Conv2d<T: Element> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(SerError::Config(format!(
                "conv `{prefix}`: groups {groups} must divide c_in {c_in} and c_out {c_out}"
            )));
        }
        let fan_in = (c_in / groups) * kernel.0 * kernel.1;
        let w = kaiming_uniform(rng, c_out * (c_in / groups) * kernel.0 * kernel.1, fan_in);
        let bias = if bias {
            let b = uniform_pm(rng, c_out, 1.0 / (fan_in as f64).sqrt());
            Some(Parameter::new(format!("{prefix}.bias"), b, &[c_out])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                w,
                &[c_out, c_in / groups, kernel.0, kernel.1],
            )?,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Depthwise constructor: one `kernel` filter per channel.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise<R: Rng>(
        rng: &mut R,
        prefix: &str,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        Self::new(rng, prefix, channels, channels, kernel, stride, padding, channels, bias)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bias = self.bias.as_ref().map(|b| b.tensor());
        tensor::conv::conv2d_grouped(
            "conv2d",
            x,
            &self.weight.tensor(),
            bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

impl<T: Element> ParamModule<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
}

/// Affine layer over the last axis.
pub struct Linear<T: Element> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                uniform_pm(rng, d_out * d_in, bound),
                &[d_out, d_in],
            )?,
            bias: Parameter::new(
                format!("{prefix}.bias"),
                uniform_pm(rng, d_out, bound),
                &[d_out],
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::linear(x, &self.weight.tensor(), Some(&self.bias.tensor()))
    }
}

impl<T: Element> ParamModule<T> for Linear<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

/// Batch normalization with running statistics (momentum 0.1, eps 1e-5).
/// Training mode normalizes by batch statistics; eval mode by the running
/// estimates.
pub struct BatchNorm2d<T: Element> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Parameter::new(format!("{prefix}.gamma"), vec![T::one(); channels], &[channels])?,
            beta: Parameter::new(format!("{prefix}.beta"), vec![T::zero(); channels], &[channels])?,
            running_mean: Buffer::new(format!("{prefix}.running_mean"), vec![T::zero(); channels]),
            running_var: Buffer::new(format!("{prefix}.running_var"), vec![T::one(); channels]),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Pin the running statistics so that eval mode is exactly the affine
    /// map (gamma, beta): mean 0 and variance 1 - eps, making the
    /// normalization scale precisely 1. Intended for tests that need an
    /// exact pass-through.
    pub fn set_identity_eval(&self) {
        let n = self.channels;
        self.running_mean.set(vec![T::zero(); n]);
        self.running_var
            .set(vec![T::one() - T::from_f64(self.eps); n]);
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        if training {
            let (y, mean, var) =
                tensor::batch_norm_train(x, &self.gamma.tensor(), &self.beta.tensor(), self.eps)?;
            // Update running estimates; variance uses the unbiased estimator
            // when more than one element contributed.
            let n: usize = x.numel() / self.channels;
            let correction = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let corr = T::from_f64(correction);
            self.running_mean.update(|rm| {
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = keep * *r + m * b;
                }
            });
            self.running_var.update(|rv| {
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = keep * *r + m * (b * corr);
                }
            });
            Ok(y)
        } else {
            tensor::batch_norm_eval(
                x,
                &self.gamma.tensor(),
                &self.beta.tensor(),
                &self.running_mean.get(),
                &self.running_var.get(),
                self.eps,
            )
        }
    }
}

impl<T: Element> ParamModule<T> for BatchNorm2d<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
    fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<T>>) {
        out.push(&self.running_mean);
        out.push(&self.running_var);
    }
}

/// Group normalization with per-channel affine (eps 1e-5).
pub struct GroupNorm<T: Element> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    groups: usize,
    eps: f64,
}

impl<T: Element> GroupNorm<T> {
    pub fn new(prefix: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(SerError::Config(format!(
                "group_norm `{prefix}`: groups {groups} must divide channels {channels}"
            )));
        }
        Ok(GroupNorm {
            gamma: Parameter::new(format!("{prefix}.gamma"), vec![T::one(); channels], &[channels])?,
            beta: Parameter::new(format!("{prefix}.beta"), vec![T::zero(); channels], &[channels])?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::group_norm(x, self.groups, &self.gamma.tensor(), &self.beta.tensor(), self.eps)
    }
}

impl<T: Element> ParamModule<T> for GroupNorm<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
}

/// One direction of an LSTM. Gate order: input, forget, candidate, output.
pub struct LstmDirection<T: Element> {
    w_ih: Parameter<T>,
    w_hh: Parameter<T>,
    b_ih: Parameter<T>,
    b_hh: Parameter<T>,
    hidden: usize,
}

impl<T: Element> LstmDirection<T> {
    fn new<R: Rng>(rng: &mut R, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = uniform_pm(rng, 4 * hidden * input, bound);
        let w_hh = uniform_pm(rng, 4 * hidden * hidden, bound);
        let mut b_ih: Vec<T> = uniform_pm(rng, 4 * hidden, bound);
        let b_hh: Vec<T> = uniform_pm(rng, 4 * hidden, bound);
        // Forget-gate bias starts at 1.0 so early training does not erase the
        // cell state.
        for v in b_ih[hidden..2 * hidden].iter_mut() {
            *v = T::one();
        }
        Ok(LstmDirection {
            w_ih: Parameter::new(format!("{prefix}.w_ih"), w_ih, &[4 * hidden, input])?,
            w_hh: Parameter::new(format!("{prefix}.w_hh"), w_hh, &[4 * hidden, hidden])?,
            b_ih: Parameter::new(format!("{prefix}.b_ih"), b_ih, &[4 * hidden])?,
            b_hh: Parameter::new(format!("{prefix}.b_hh"), b_hh, &[4 * hidden])?,
            hidden,
        })
    }

    /// Scan the sequence, returning the per-timestep hidden states in
    /// scan order.
    fn scan(&self, steps: &[Tensor<T>], batch: usize) -> Result<Vec<Tensor<T>>> {
        let hid = self.hidden;
        let mut h = Tensor::zeros(&[batch, hid]);
        let mut c = Tensor::zeros(&[batch, hid]);
        let w_ih = self.w_ih.tensor();
        let w_hh = self.w_hh.tensor();
        let b_ih = self.b_ih.tensor();
        let b_hh = self.b_hh.tensor();
        let mut out = Vec::with_capacity(steps.len());
        for x_t in steps {
            let gates = tensor::add(
                &tensor::linear(x_t, &w_ih, Some(&b_ih))?,
                &tensor::linear(&h, &w_hh, Some(&b_hh))?,
            )?;
            let i = tensor::sigmoid(&tensor::slice_axis(&gates, 1, 0, hid)?);
            let f = tensor::sigmoid(&tensor::slice_axis(&gates, 1, hid, hid)?);
            let g = tensor::tanh(&tensor::slice_axis(&gates, 1, 2 * hid, hid)?);
            let o = tensor::sigmoid(&tensor::slice_axis(&gates, 1, 3 * hid, hid)?);
            c = tensor::add(&tensor::mul(&f, &c)?, &tensor::mul(&i, &g)?)?;
            h = tensor::mul(&o, &tensor::tanh(&c))?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl<T: Element> ParamModule<T> for LstmDirection<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.w_ih);
        out.push(&self.w_hh);
        out.push(&self.b_ih);
        out.push(&self.b_hh);
    }
}

/// Bidirectional LSTM over `[T, D]` or `[B, T, D]` sequences. The output
/// feature axis holds the forward hidden state in `0..hidden` and the
/// backward hidden state (aligned per timestep) in `hidden..2*hidden`.
pub struct BiLstm<T: Element> {
    pub(crate) fwd: LstmDirection<T>,
    pub(crate) bwd: LstmDirection<T>,
    hidden: usize,
}

impl<T: Element> BiLstm<T> {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmDirection::new(rng, &format!("{prefix}.fwd"), input, hidden)?,
            bwd: LstmDirection::new(rng, &format!("{prefix}.bwd"), input, hidden)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Copy the forward direction's weights into the backward direction.
    /// Exposed for symmetry checks.
    pub fn tie_directions(&self) {
        self.bwd.w_ih.set_data(self.fwd.w_ih.data());
        self.bwd.w_hh.set_data(self.fwd.w_hh.data());
        self.bwd.b_ih.set_data(self.fwd.b_ih.data());
        self.bwd.b_hh.set_data(self.fwd.b_hh.data());
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batched, batch, t_len, d) = match x.shape() {
            [b, t, d] => (true, *b, *t, *d),
            [t, d] => (false, 1, *t, *d),
            other => {
                return Err(SerError::Dim {
                    op: "bilstm",
                    detail: format!("expected rank 2 or 3, got shape {other:?}"),
                });
            }
        };
        if t_len == 0 {
            return Err(SerError::EmptySequence("bilstm"));
        }
        let x3 = if batched {
            x.clone()
        } else {
            tensor::reshape(x, &[1, t_len, d])?
        };
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            steps.push(tensor::reshape(
                &tensor::slice_axis(&x3, 1, t, 1)?,
                &[batch, d],
            )?);
        }
        let fwd_states = self.fwd.scan(&steps, batch)?;
        let rev_steps: Vec<Tensor<T>> = steps.iter().rev().cloned().collect();
        let mut bwd_states = self.bwd.scan(&rev_steps, batch)?;
        bwd_states.reverse(); // align per timestep

        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = tensor::concat(&[&fwd_states[t], &bwd_states[t]], 1)?;
            rows.push(tensor::reshape(&row, &[batch, 1, 2 * self.hidden])?);
        }
        let row_refs: Vec<&Tensor<T>> = rows.iter().collect();
        let out = tensor::concat(&row_refs, 1)?;
        if batched {
            Ok(out)
        } else {
            tensor::reshape(&out, &[t_len, 2 * self.hidden])
        }
    }
}

impl<T: Element> ParamModule<T> for BiLstm<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.fwd.collect_params(out);
        self.bwd.collect_params(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilstm_zero_input_zero_biases_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lstm = BiLstm::<f64>::new(&mut rng, "lstm", 3, 2).unwrap();
        for dir in [&lstm.fwd, &lstm.bwd] {
            dir.b_ih.set_data(vec![0.0; 8]);
            dir.b_hh.set_data(vec![0.0; 8]);
        }
        let x = Tensor::zeros(&[4, 3]);
        let y = lstm.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_single_step_directions_agree_when_tied() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lstm = BiLstm::<f64>::new(&mut rng, "lstm", 3, 2).unwrap();
        lstm.tie_directions();
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1], &[1, 3]).unwrap();
        let y = lstm.forward(&x).unwrap();
        let (fwd, bwd) = y.data().split_at(2);
        for (a, b) in fwd.iter().zip(bwd) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bilstm_rejects_empty_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lstm = BiLstm::<f64>::new(&mut rng, "lstm", 3, 2).unwrap();
        let x = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            lstm.forward(&x).unwrap_err(),
            SerError::EmptySequence("bilstm")
        ));
    }

    #[test]
    fn bilstm_matches_hand_unrolled_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lstm = BiLstm::<f64>::new(&mut rng, "lstm", 2, 2).unwrap();
        let x_data = vec![0.5, -0.3, 0.9, 0.1, -0.8, 0.4];
        let x = Tensor::from_vec(x_data.clone(), &[3, 2]).unwrap();
        let y = lstm.forward(&x).unwrap();

        // Scalar reference: step the cell by hand for each direction.
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run = |dir: &LstmDirection<f64>, order: &[usize]| -> Vec<[f64; 2]> {
            let hid = 2;
            let w_ih = dir.w_ih.data();
            let w_hh = dir.w_hh.data();
            let b_ih = dir.b_ih.data();
            let b_hh = dir.b_hh.data();
            let mut h = [0.0; 2];
            let mut c = [0.0; 2];
            let mut states = vec![[0.0; 2]; order.len()];
            for &t in order {
                let xt = &x_data[t * 2..t * 2 + 2];
                let mut gates = [0.0; 8];
                for (r, gate) in gates.iter_mut().enumerate() {
                    let mut acc = b_ih[r] + b_hh[r];
                    for k in 0..2 {
                        acc += w_ih[r * 2 + k] * xt[k];
                        acc += w_hh[r * hid + k] * h[k];
                    }
                    *gate = acc;
                }
                for k in 0..hid {
                    let i = sigmoid(gates[k]);
                    let f = sigmoid(gates[hid + k]);
                    let g = gates[2 * hid + k].tanh();
                    let o = sigmoid(gates[3 * hid + k]);
                    c[k] = f * c[k] + i * g;
                    h[k] = o * c[k].tanh();
                }
                states[t] = h;
            }
            states
        };
        let fwd = run(&lstm.fwd, &[0, 1, 2]);
        let bwd = run(&lstm.bwd, &[2, 1, 0]);
        for t in 0..3 {
            for k in 0..2 {
                assert!((y.data()[t * 4 + k] - fwd[t][k]).abs() < 1e-10);
                assert!((y.data()[t * 4 + 2 + k] - bwd[t][k]).abs() < 1e-10);
            }
        }
    }
}
