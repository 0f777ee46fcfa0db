//! Finite-difference certification of every differentiable operation and
//! composite module, in f64, on at least three distinct shapes each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ser_core::gradcheck::{
    check_input_gradients, check_param_gradients, probe_weights, GradCheckCfg,
};
use ser_core::lct::{CoordinateAttention, LctConfig, LctStack, LlcMode, SeModule};
use ser_core::model::{tiny_config, SerModel};
use ser_core::nn::{BatchNorm2d, BiLstm, GroupNorm, ParamModule};
use ser_core::tensor::{self, Tensor};
use ser_core::tsa::{TsaConfig, TsaModule};

fn cfg() -> GradCheckCfg {
    GradCheckCfg::default()
}

/// Deterministic pseudo-random leaf bounded away from activation kinks.
fn rand_leaf(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut s = seed | 1;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let u = (s >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
            let mag = 0.15 + 0.85 * u;
            if s & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::leaf(data, shape, true).unwrap()
}

fn scalarize(y: &Tensor<f64>, seed: u64) -> ser_core::Result<Tensor<f64>> {
    tensor::dot_const(y, &probe_weights(y.numel(), seed))
}

#[test]
fn elementwise_and_shape_ops() {
    for (i, shape) in [vec![7], vec![3, 4], vec![2, 3, 2, 2]].iter().enumerate() {
        let seed = 0x100 + i as u64;
        let x = rand_leaf(shape, seed);
        let y = rand_leaf(shape, seed ^ 0xff);
        type OpFn = Box<dyn Fn(&[Tensor<f64>]) -> ser_core::Result<Tensor<f64>>>;
        let binary_ops: Vec<(&str, OpFn)> = vec![
            ("add", Box::new(|ins: &[Tensor<f64>]| tensor::add(&ins[0], &ins[1]))),
            ("sub", Box::new(|ins: &[Tensor<f64>]| tensor::sub(&ins[0], &ins[1]))),
            ("mul", Box::new(|ins: &[Tensor<f64>]| tensor::mul(&ins[0], &ins[1]))),
        ];
        for (label, op) in &binary_ops {
            check_input_gradients(
                label,
                &[x.clone(), y.clone()],
                |ins| scalarize(&op(ins)?, seed),
                &cfg(),
            )
            .unwrap();
        }
        type UnaryFn = Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>;
        let unary_ops: Vec<(&str, UnaryFn)> = vec![
            ("relu", Box::new(|x: &Tensor<f64>| tensor::relu(x))),
            ("sigmoid", Box::new(|x: &Tensor<f64>| tensor::sigmoid(x))),
            ("tanh", Box::new(|x: &Tensor<f64>| tensor::tanh(x))),
            ("hard_swish", Box::new(|x: &Tensor<f64>| tensor::hard_swish(x))),
            ("scale", Box::new(|x: &Tensor<f64>| tensor::scale(x, -1.7))),
        ];
        for (label, op) in &unary_ops {
            check_input_gradients(
                label,
                &[x.clone()],
                |ins| scalarize(&op(&ins[0]), seed),
                &cfg(),
            )
            .unwrap();
        }
        check_input_gradients("sum_all", &[x.clone()], |ins| Ok(tensor::sum_all(&ins[0])), &cfg())
            .unwrap();
    }
}

#[test]
fn broadcast_binary_ops() {
    let cases: [(&[usize], &[usize]); 3] =
        [(&[2, 3], &[3]), (&[2, 4, 3, 2], &[4, 1, 1]), (&[3, 1, 5], &[2, 1, 4, 5])];
    for (i, (sa, sb)) in cases.iter().enumerate() {
        let seed = 0x200 + i as u64;
        let a = rand_leaf(sa, seed);
        let b = rand_leaf(sb, seed ^ 0x3a);
        check_input_gradients(
            "add_broadcast",
            &[a.clone(), b.clone()],
            |ins| scalarize(&tensor::add(&ins[0], &ins[1])?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "mul_broadcast",
            &[a, b],
            |ins| scalarize(&tensor::mul(&ins[0], &ins[1])?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn reductions_softmax_and_reshaping() {
    let shapes: [Vec<usize>; 3] = [vec![4, 5], vec![2, 3, 4], vec![2, 2, 3, 5]];
    for (i, shape) in shapes.iter().enumerate() {
        let seed = 0x300 + i as u64;
        let x = rand_leaf(shape, seed);
        for axis in 0..shape.len() {
            check_input_gradients(
                "softmax",
                &[x.clone()],
                |ins| scalarize(&tensor::softmax(&ins[0], axis)?, seed),
                &cfg(),
            )
            .unwrap();
            check_input_gradients(
                "log_softmax",
                &[x.clone()],
                |ins| scalarize(&tensor::log_softmax(&ins[0], axis)?, seed),
                &cfg(),
            )
            .unwrap();
            check_input_gradients(
                "axis_mean",
                &[x.clone()],
                |ins| scalarize(&tensor::axis_mean(&ins[0], axis, i % 2 == 0)?, seed),
                &cfg(),
            )
            .unwrap();
        }
        let perm: Vec<usize> = (0..shape.len()).rev().collect();
        check_input_gradients(
            "permute",
            &[x.clone()],
            |ins| scalarize(&tensor::permute(&ins[0], &perm)?, seed),
            &cfg(),
        )
        .unwrap();
        let flat = [x.numel()];
        check_input_gradients(
            "reshape",
            &[x.clone()],
            |ins| scalarize(&tensor::reshape(&ins[0], &flat)?, seed),
            &cfg(),
        )
        .unwrap();
    }

    // concat / slice / pad on three shapes.
    for (i, (sa, sb, axis)) in [
        (vec![2, 3], vec![2, 2], 1usize),
        (vec![1, 2, 4], vec![1, 3, 4], 1),
        (vec![2, 2, 2, 2], vec![2, 2, 2, 2], 3),
    ]
    .iter()
    .enumerate()
    {
        let seed = 0x400 + i as u64;
        let a = rand_leaf(sa, seed);
        let b = rand_leaf(sb, seed ^ 0x77);
        check_input_gradients(
            "concat",
            &[a.clone(), b.clone()],
            |ins| scalarize(&tensor::concat(&[&ins[0], &ins[1]], *axis)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "slice_axis",
            &[a.clone()],
            |ins| scalarize(&tensor::slice_axis(&ins[0], *axis, 0, ins[0].shape()[*axis] - 1)?, seed),
            &cfg(),
        )
        .unwrap();
    }
    for (i, shape) in [vec![1, 3, 4], vec![2, 2, 3, 3], vec![1, 1, 5, 2]].iter().enumerate() {
        let seed = 0x500 + i as u64;
        let x = rand_leaf(shape, seed);
        check_input_gradients(
            "pad2d",
            &[x.clone()],
            |ins| scalarize(&tensor::pad2d(&ins[0], 1, 0, 0, 1)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "global_avg_pool",
            &[x.clone()],
            |ins| scalarize(&tensor::global_avg_pool(&ins[0])?, seed),
            &cfg(),
        )
        .unwrap();
    }
    for (i, (c, g)) in [(4usize, 2usize), (8, 4), (6, 3)].iter().enumerate() {
        let seed = 0x600 + i as u64;
        let x = rand_leaf(&[*c, 2, 3], seed);
        check_input_gradients(
            "channel_shuffle",
            &[x],
            |ins| scalarize(&tensor::channel_shuffle(&ins[0], *g)?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn matmul_and_linear() {
    let cases: [(Vec<usize>, Vec<usize>); 3] = [
        (vec![3, 4], vec![4, 2]),
        (vec![2, 3, 5], vec![2, 5, 2]),
        (vec![2, 2, 4, 3], vec![2, 2, 3, 3]),
    ];
    for (i, (sa, sb)) in cases.iter().enumerate() {
        let seed = 0x700 + i as u64;
        let a = rand_leaf(sa, seed);
        let b = rand_leaf(sb, seed ^ 0x2f);
        check_input_gradients(
            "matmul",
            &[a, b],
            |ins| scalarize(&tensor::matmul(&ins[0], &ins[1])?, seed),
            &cfg(),
        )
        .unwrap();
    }
    for (i, lead) in [vec![3], vec![2, 3], vec![2, 2, 2]].iter().enumerate() {
        let seed = 0x800 + i as u64;
        let d_in = 4;
        let d_out = 3;
        let mut shape = lead.clone();
        shape.push(d_in);
        let x = rand_leaf(&shape, seed);
        let w = rand_leaf(&[d_out, d_in], seed ^ 0x1);
        let b = rand_leaf(&[d_out], seed ^ 0x2);
        check_input_gradients(
            "linear",
            &[x, w, b],
            |ins| scalarize(&tensor::linear(&ins[0], &ins[1], Some(&ins[2]))?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn convolutions_and_pooling() {
    struct Case {
        x: Vec<usize>,
        w: Vec<usize>,
        stride: (usize, usize),
        pad: (usize, usize),
    }
    let conv_cases = [
        Case { x: vec![2, 3, 5, 5], w: vec![4, 3, 3, 3], stride: (1, 1), pad: (1, 1) },
        Case { x: vec![1, 2, 6, 4], w: vec![3, 2, 2, 2], stride: (2, 1), pad: (0, 1) },
        Case { x: vec![2, 1, 4, 7], w: vec![2, 1, 3, 3], stride: (1, 2), pad: (1, 0) },
    ];
    for (i, case) in conv_cases.iter().enumerate() {
        let seed = 0x900 + i as u64;
        let x = rand_leaf(&case.x, seed);
        let w = rand_leaf(&case.w, seed ^ 0x4);
        let b = rand_leaf(&[case.w[0]], seed ^ 0x5);
        check_input_gradients(
            "conv2d",
            &[x, w, b],
            |ins| {
                scalarize(
                    &tensor::conv2d(&ins[0], &ins[1], Some(&ins[2]), case.stride, case.pad)?,
                    seed,
                )
            },
            &cfg(),
        )
        .unwrap();
    }
    for (i, (c, k)) in [(3usize, 3usize), (2, 2), (4, 5)].iter().enumerate() {
        let seed = 0xa00 + i as u64;
        let x = rand_leaf(&[1, *c, 6, 6], seed);
        let w = rand_leaf(&[*c, 1, *k, *k], seed ^ 0x6);
        let b = rand_leaf(&[*c], seed ^ 0x7);
        check_input_gradients(
            "depthwise_conv2d",
            &[x, w, b],
            |ins| {
                scalarize(
                    &tensor::depthwise_conv2d(&ins[0], &ins[1], Some(&ins[2]), (1, 1), (k / 2, k / 2))?,
                    seed,
                )
            },
            &cfg(),
        )
        .unwrap();
    }
    for (i, (cin, cout)) in [(3usize, 2usize), (2, 5), (4, 4)].iter().enumerate() {
        let seed = 0xb00 + i as u64;
        let x = rand_leaf(&[2, *cin, 3, 4], seed);
        let w = rand_leaf(&[*cout, *cin, 1, 1], seed ^ 0x8);
        let b = rand_leaf(&[*cout], seed ^ 0x9);
        check_input_gradients(
            "pointwise_conv2d",
            &[x, w, b],
            |ins| scalarize(&tensor::pointwise_conv2d(&ins[0], &ins[1], Some(&ins[2]))?, seed),
            &cfg(),
        )
        .unwrap();
    }
    for (i, shape) in [vec![1, 2, 4, 4], vec![2, 3, 6, 4], vec![1, 1, 5, 7]].iter().enumerate() {
        let seed = 0xc00 + i as u64;
        let x = rand_leaf(shape, seed);
        check_input_gradients(
            "max_pool2d",
            &[x],
            |ins| scalarize(&tensor::max_pool2d(&ins[0], 2)?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn normalizations() {
    for (i, shape) in [vec![2, 3, 2, 2], vec![1, 4, 3, 3], vec![3, 2, 4, 2]].iter().enumerate() {
        let seed = 0xd00 + i as u64;
        let c = shape[1];
        let x = rand_leaf(shape, seed);
        let gamma = rand_leaf(&[c], seed ^ 0xa);
        let beta = rand_leaf(&[c], seed ^ 0xb);
        check_input_gradients(
            "batch_norm_train",
            &[x.clone(), gamma.clone(), beta.clone()],
            |ins| {
                let (y, _, _) = tensor::batch_norm_train(&ins[0], &ins[1], &ins[2], 1e-5)?;
                scalarize(&y, seed)
            },
            &cfg(),
        )
        .unwrap();
        let mean = vec![0.1; c];
        let var = vec![0.9; c];
        check_input_gradients(
            "batch_norm_eval",
            &[x.clone(), gamma.clone(), beta.clone()],
            |ins| scalarize(&tensor::batch_norm_eval(&ins[0], &ins[1], &ins[2], &mean, &var, 1e-5)?, seed),
            &cfg(),
        )
        .unwrap();
        let groups = if c % 2 == 0 { 2 } else { c };
        check_input_gradients(
            "group_norm",
            &[x, gamma, beta],
            |ins| scalarize(&tensor::group_norm(&ins[0], groups, &ins[1], &ins[2], 1e-5)?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn bilstm_layer() {
    for (i, (t_len, d, hid)) in [(3usize, 2usize, 2usize), (1, 3, 2), (4, 2, 3)].iter().enumerate() {
        let seed = 0xe00 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = BiLstm::<f64>::new(&mut rng, "lstm", *d, *hid).unwrap();
        let x = rand_leaf(&[2, *t_len, *d], seed);
        let mut params = Vec::new();
        lstm.collect_params(&mut params);
        check_param_gradients(
            "bilstm_params",
            &params,
            || scalarize(&lstm.forward(&x)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "bilstm_input",
            &[x.clone()],
            |ins| scalarize(&lstm.forward(&ins[0])?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn se_and_coordinate_attention_modules() {
    for (i, (c, h, w)) in [(8usize, 3usize, 4usize), (4, 2, 5), (8, 4, 2)].iter().enumerate() {
        let seed = 0xf00 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let se = SeModule::<f64>::new(&mut rng, "se", *c).unwrap();
        let x = rand_leaf(&[2, *c, *h, *w], seed);
        let mut params = Vec::new();
        se.collect_params(&mut params);
        check_param_gradients("se_params", &params, || scalarize(&se.forward(&x)?, seed), &cfg())
            .unwrap();
        check_input_gradients(
            "se_input",
            &[x.clone()],
            |ins| scalarize(&se.forward(&ins[0])?, seed),
            &cfg(),
        )
        .unwrap();

        let ca = CoordinateAttention::<f64>::new(&mut rng, "ca", *c, 4.min(*c)).unwrap();
        let mut ca_params = Vec::new();
        ca.collect_params(&mut ca_params);
        check_param_gradients(
            "ca_params",
            &ca_params,
            || scalarize(&ca.forward(&x, true)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "ca_input",
            &[x.clone()],
            |ins| scalarize(&ca.forward(&ins[0], true)?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn lmam_and_full_lct() {
    for (i, (h, w)) in [(6usize, 6usize), (4, 6), (5, 4)].iter().enumerate() {
        let seed = 0x1100 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lct_cfg = LctConfig {
            channels: 8,
            heads: 2,
            ca_reduction: 4,
            ffn_expansion: 2,
            dw_kernel: 3,
            num_blocks: 1,
            ca_enabled: true,
            se_enabled: true,
            llc_mode: LlcMode::Llc,
        };
        let stack = LctStack::<f64>::new(&mut rng, "lct", &lct_cfg, *h, *w).unwrap();
        let x = rand_leaf(&[2, 8, *h, *w], seed);

        let block = &stack.blocks[0];
        let mut attn_params = Vec::new();
        block.attn.collect_params(&mut attn_params);
        check_param_gradients(
            "lmam_params",
            &attn_params,
            || scalarize(&block.attn.forward(&x, true)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "lmam_input",
            &[x.clone()],
            |ins| scalarize(&block.attn.forward(&ins[0], true)?, seed),
            &cfg(),
        )
        .unwrap();

        let mut params = Vec::new();
        stack.collect_params(&mut params);
        check_param_gradients(
            "lct_params",
            &params,
            || scalarize(&stack.forward(&x, true)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "lct_input",
            &[x.clone()],
            |ins| scalarize(&stack.forward(&ins[0], true)?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn full_tsa_module() {
    for (i, (c, h, w)) in [(8usize, 4usize, 5usize), (4, 6, 3), (8, 2, 4)].iter().enumerate() {
        let seed = 0x1200 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tsa_cfg = TsaConfig {
            groups: 2,
            enabled: true,
            timing_enabled: true,
        };
        let tsa = TsaModule::<f64>::new(&mut rng, "tsa", &tsa_cfg, *c, *h).unwrap();
        let x = rand_leaf(&[2, *c, *h, *w], seed);
        let mut params = Vec::new();
        tsa.collect_params(&mut params);
        check_param_gradients(
            "tsa_params",
            &params,
            || scalarize(&tsa.forward(&x)?, seed),
            &cfg(),
        )
        .unwrap();
        check_input_gradients(
            "tsa_input",
            &[x.clone()],
            |ins| scalarize(&tsa.forward(&ins[0])?, seed),
            &cfg(),
        )
        .unwrap();
    }
}

#[test]
fn full_model_end_to_end() {
    // End-to-end tolerance is 1e-5; per-op checks above run at 1e-6.
    let e2e = GradCheckCfg {
        rel_tol: 1e-5,
        max_coords: 8,
        ..GradCheckCfg::default()
    };
    for (i, (mels, frames)) in [(8usize, 12usize), (10, 16), (16, 8)].iter().enumerate() {
        let seed = 0x1300 + i as u64;
        let model_cfg = tiny_config(4, *mels, *frames);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SerModel::<f64>::new(&mut rng, &model_cfg).unwrap();
        let x = rand_leaf(&[4, 1, *mels, *frames], seed);
        let params = model.parameters().unwrap();
        check_param_gradients(
            "model_params",
            &params,
            || scalarize(&model.forward(&x, true)?, seed),
            &e2e,
        )
        .unwrap();
        check_input_gradients(
            "model_input",
            &[x.clone()],
            |ins| scalarize(&model.forward(&ins[0], true)?, seed),
            &e2e,
        )
        .unwrap();
    }
}
