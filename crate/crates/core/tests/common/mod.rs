//! Finite-difference gradient checks in f64, shared by the test targets.

#![allow(dead_code)]

use abbie::model::{forward, init_params, DepthInit, ForwardOptions, ModelConfig, ModelContext, ModelParams, Variant};
use abbie::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output element matters.
pub fn weighted_sum<'g>(g: &'g Graph<f64>, x: Var<'g, f64>) -> Var<'g, f64> {
    let shape = x.shape();
    let seed = shape
        .iter()
        .fold(17u64, |h, &d| h.wrapping_mul(31).wrapping_add(d as u64));
    let w = g.constant(random(&shape, seed));
    x.hadamard(w).unwrap().sum().unwrap()
}

/// Compares reverse-mode gradients of `f` with central differences for
/// every element of every input.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().item().unwrap()
    };
    let mut report = GradReport {
        name: name.to_string(),
        checked: 0,
        max_rel: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.max_rel = report.max_rel.max(rel_err(a.data()[j], numeric));
            report.checked += 1;
        }
    }
    report
}

/// Two blocks, d = 16: one Body block and one Tail block.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::tiny(variant);
    c.n_head_blocks = 0;
    c.n_body_blocks = 1;
    c.n_tail_blocks = 1;
    c
}

fn model_loss(
    ctx: &ModelContext<f64>,
    params: &ModelParams<f64>,
    r: usize,
    trainable: bool,
) -> (f64, Vec<Tensor<f64>>) {
    let inputs = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let targets = [1u32, 4, 1, 5, 9, 2, 6, 5];
    let g = if trainable { Graph::new() } else { Graph::inference() };
    let p = params.bind(&g, trainable);
    let opts = ForwardOptions {
        iters: r,
        capture_trace: false,
        depth_init: DepthInit::Seed(11),
        loop_std: true,
    };
    let out = forward(ctx, &p, &inputs, 2, opts).unwrap();
    let loss = g.cross_entropy(out.logits, &targets, None).unwrap();
    let value = loss.value().item().unwrap();
    if !trainable {
        return (value, Vec::new());
    }
    let grads = g.backward(loss).unwrap();
    (value, p.vars().into_iter().map(|v| grads.get(v)).collect())
}

/// Gradient check of the mean cross-entropy of a full forward pass with
/// respect to every parameter.
pub fn check_model(config: &ModelConfig, r: usize) -> GradReport {
    let ctx = ModelContext::<f64>::new(config).unwrap();
    let params: ModelParams<f64> = init_params(config).unwrap();
    let (_, analytic) = model_loss(&ctx, &params, r, true);
    let mut report = GradReport {
        name: format!("{} r={r}", config.variant),
        checked: 0,
        max_rel: 0.0,
    };
    let mut work = params.clone();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = work.tensors_mut()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + STEP;
            let (up, _) = model_loss(&ctx, &work, r, false);
            work.tensors_mut()[i].data_mut()[j] = orig - STEP;
            let (down, _) = model_loss(&ctx, &work, r, false);
            work.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.max_rel = report.max_rel.max(rel_err(a.data()[j], numeric));
            report.checked += 1;
        }
    }
    report
}

/// One check per differentiable primitive.
pub fn primitive_checks() -> Vec<GradReport> {
    let rope = abbie::layers::RopeTable::<f64>::new(10_000.0, 4, 8).unwrap();
    let x23 = random(&[2, 3], 1);
    let y23 = random(&[2, 3], 2);
    let mut out = vec![
        check("add", &[x23.clone(), y23.clone()], |g, v| {
            weighted_sum(g, v[0].add(v[1]).unwrap())
        }),
        check("sub", &[x23.clone(), y23.clone()], |g, v| {
            weighted_sum(g, v[0].sub(v[1]).unwrap())
        }),
        check("hadamard", &[x23.clone(), y23.clone()], |g, v| {
            weighted_sum(g, v[0].hadamard(v[1]).unwrap())
        }),
        check("matmul", &[random(&[3, 4], 3), random(&[4, 2], 4)], |g, v| {
            weighted_sum(g, v[0].matmul(v[1]).unwrap())
        }),
        check(
            "matmul_shared_rhs",
            &[random(&[2, 3, 4], 5), random(&[4, 2], 6)],
            |g, v| weighted_sum(g, v[0].matmul(v[1]).unwrap()),
        ),
        check(
            "matmul_batched",
            &[random(&[2, 3, 4], 7), random(&[2, 4, 2], 8)],
            |g, v| weighted_sum(g, v[0].matmul(v[1]).unwrap()),
        ),
        check("scale", std::slice::from_ref(&x23), |g, v| {
            weighted_sum(g, v[0].scale(-1.7).unwrap())
        }),
        check("reshape", &[random(&[2, 6], 9)], |g, v| {
            weighted_sum(g, v[0].reshape([3, 4]).unwrap())
        }),
        check("transpose_last2", &[random(&[2, 3, 4], 10)], |g, v| {
            weighted_sum(g, v[0].transpose_last2().unwrap())
        }),
        check("concat_lastdim", &[random(&[2, 3], 11), random(&[2, 2], 12)], |g, v| {
            weighted_sum(g, v[0].concat_lastdim(v[1]).unwrap())
        }),
        check("narrow", &[random(&[2, 5, 3], 13)], |g, v| {
            weighted_sum(g, v[0].narrow(1, 1, 3).unwrap())
        }),
        check("silu", &[random(&[3, 4], 14)], |g, v| {
            weighted_sum(g, v[0].silu().unwrap())
        }),
        check("softmax_lastdim", &[random(&[3, 5], 15)], |g, v| {
            weighted_sum(g, v[0].softmax_lastdim().unwrap())
        }),
        check("rms_norm", &[random(&[3, 6], 16), random(&[6], 17)], |g, v| {
            weighted_sum(g, v[0].rms_norm(v[1], 1e-6).unwrap())
        }),
        check("rope", &[random(&[2, 3, 2, 4], 18)], move |g, v| {
            weighted_sum(g, abbie::layers::rope_apply(v[0], &rope, 2).unwrap())
        }),
        check("sum", std::slice::from_ref(&x23), |_, v| {
            v[0].sum().unwrap().scale(0.3).unwrap()
        }),
        check("mean", std::slice::from_ref(&x23), |_, v| {
            v[0].mean().unwrap().scale(0.3).unwrap()
        }),
        check(
            "attention",
            &[
                random(&[2, 4, 4, 3], 19),
                random(&[2, 4, 2, 3], 20),
                random(&[2, 4, 2, 3], 21),
            ],
            |g, v| weighted_sum(g, g.attention(v[0], v[1], v[2]).unwrap()),
        ),
        check("embedding", &[random(&[5, 3], 22)], |g, v| {
            weighted_sum(g, g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]).unwrap())
        }),
        check("cross_entropy", &[random(&[2, 3, 5], 23).scale(3.0)], |g, v| {
            g.cross_entropy(v[0], &[0, 4, 2, 2, 1, 3], None).unwrap()
        }),
        check("cross_entropy_ignore", &[random(&[2, 3, 5], 24)], |g, v| {
            g.cross_entropy(v[0], &[0, 4, 2, 2, 1, 3], Some(2)).unwrap()
        }),
    ];
    // Composite: a whole pre-norm block through the public layer API.
    out.push(block_check());
    out
}

fn block_check() -> GradReport {
    use abbie::layers::{block_forward, AttnGeometry, BlockParams, BlockVars, RopeTable};
    let geo = AttnGeometry::new(8, 2, 1).unwrap();
    let rope = RopeTable::<f64>::new(10_000.0, geo.d_head, 8).unwrap();
    let mut p = BlockParams::<f64>::zeros(8, geo.d_kv(), 12);
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        let shape = t.shape().to_vec();
        *t = random(&shape, 100 + i as u64).scale(0.5);
    }
    let mut inputs = vec![random(&[2, 3, 8], 99)];
    inputs.extend(p.tensors().into_iter().cloned());
    check("block", &inputs, move |g, v| {
        let vars = BlockVars {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            w1: v[5],
            w2: v[6],
            attn_norm: v[7],
            ffn_norm: v[8],
        };
        let out = block_forward(v[0], &vars, geo, &rope, 1e-6, None).unwrap();
        weighted_sum(g, out.out)
    })
}
