//! Helpers shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stride::pipeline::{LossWeights, Pipeline, PipelineConfig};
use stride::student::{CeReduction, StudentConfig};
use stride::synth::{generate_dataset, MixtureSpec};
use stride::tensor::{finite_difference_check, Graph, Tensor, Var, FD_STEP};
use stride::Result;

pub const FD_TRIALS: usize = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an op output with fixed random weights so every output entry
/// contributes to the checked gradient.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.leaf(&Tensor::new(
        g.shape(out).to_vec(),
        weights.data()[..g.value(out).len()].to_vec(),
    )?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

/// Checks `op` at the input `x` (the differentiated argument).
fn check<F>(rng: &mut ChaCha8Rng, shape: &[usize], op: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let x = random(rng, shape);
    let weights = random(rng, &[256]);
    finite_difference_check(
        |g, v| {
            let out = op(g, v)?;
            contract(g, out, &weights)
        },
        &x,
        FD_STEP,
    )
}

fn cases() -> Vec<(&'static str, OpCase)> {
    let mut v: Vec<(&'static str, OpCase)> = Vec::new();
    v.push((
        "matmul.lhs",
        Box::new(|r| {
            let b = random(r, &[4, 3]);
            check(r, &[2, 4], move |g, x| {
                let b = g.leaf(&b);
                g.matmul(x, b)
            })
        }),
    ));
    v.push((
        "matmul.rhs",
        Box::new(|r| {
            let a = random(r, &[2, 4]);
            check(r, &[4, 3], move |g, x| {
                let a = g.leaf(&a);
                g.matmul(a, x)
            })
        }),
    ));
    v.push((
        "matmul_nt.lhs",
        Box::new(|r| {
            let b = random(r, &[5, 4]);
            check(r, &[3, 4], move |g, x| {
                let b = g.leaf(&b);
                g.matmul_nt(x, b)
            })
        }),
    ));
    v.push((
        "matmul_nt.rhs",
        Box::new(|r| {
            let a = random(r, &[3, 4]);
            check(r, &[5, 4], move |g, x| {
                let a = g.leaf(&a);
                g.matmul_nt(a, x)
            })
        }),
    ));
    v.push((
        "add",
        Box::new(|r| {
            let b = random(r, &[3, 4]);
            check(r, &[3, 4], move |g, x| {
                let b = g.leaf(&b);
                g.add(x, b)
            })
        }),
    ));
    v.push((
        "sub.rhs",
        Box::new(|r| {
            let a = random(r, &[3, 4]);
            check(r, &[3, 4], move |g, x| {
                let a = g.leaf(&a);
                g.sub(a, x)
            })
        }),
    ));
    v.push((
        "mul",
        Box::new(|r| {
            let b = random(r, &[3, 4]);
            check(r, &[3, 4], move |g, x| {
                let b = g.leaf(&b);
                g.mul(x, b)
            })
        }),
    ));
    v.push(("mul.self", Box::new(|r| check(r, &[3, 4], |g, x| g.mul(x, x)))));
    v.push((
        "add_row.row",
        Box::new(|r| {
            let m = random(r, &[3, 4]);
            check(r, &[4], move |g, x| {
                let m = g.leaf(&m);
                g.add_row(m, x)
            })
        }),
    ));
    v.push((
        "mul_row.matrix",
        Box::new(|r| {
            let row = random(r, &[4]);
            check(r, &[3, 4], move |g, x| {
                let row = g.leaf(&row);
                g.mul_row(x, row)
            })
        }),
    ));
    v.push((
        "mul_row.row",
        Box::new(|r| {
            let m = random(r, &[3, 4]);
            check(r, &[4], move |g, x| {
                let m = g.leaf(&m);
                g.mul_row(m, x)
            })
        }),
    ));
    v.push((
        "scale",
        Box::new(|r| {
            let c: f64 = r.random_range(-2.0..2.0);
            check(r, &[3, 4], move |g, x| Ok(g.scale(x, c)))
        }),
    ));
    v.push(("tanh", Box::new(|r| check(r, &[3, 4], |g, x| Ok(g.tanh(x))))));
    v.push((
        "softmax_rows",
        Box::new(|r| check(r, &[3, 5], |g, x| g.softmax_rows(x))),
    ));
    v.push((
        "causal_softmax_rows",
        Box::new(|r| check(r, &[4, 4], |g, x| g.causal_softmax_rows(x))),
    ));
    v.push(("layer_norm", Box::new(|r| check(r, &[3, 6], |g, x| g.layer_norm(x)))));
    v.push((
        "mean_over_rows",
        Box::new(|r| check(r, &[5, 3], |g, x| g.mean_over_rows(x))),
    ));
    v.push(("sum", Box::new(|r| check(r, &[3, 4], |g, x| Ok(g.sum(x))))));
    v.push((
        "gather_rows",
        Box::new(|r| {
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
            check(r, &[4, 3], move |g, x| g.gather_rows(x, &ids))
        }),
    ));
    v.push((
        "concat_rows",
        Box::new(|r| {
            let b = random(r, &[2, 3]);
            check(r, &[3, 3], move |g, x| {
                let b = g.leaf(&b);
                g.concat_rows(&[b, x, x])
            })
        }),
    ));
    v.push((
        "replace_row.matrix",
        Box::new(|r| {
            let src = random(r, &[3]);
            check(r, &[4, 3], move |g, x| {
                let s = g.leaf(&src);
                g.replace_row(x, 2, s)
            })
        }),
    ));
    v.push((
        "replace_row.source",
        Box::new(|r| {
            let m = random(r, &[4, 3]);
            check(r, &[3], move |g, x| {
                let m = g.leaf(&m);
                g.replace_row(m, 1, x)
            })
        }),
    ));
    v.push((
        "slice_rows",
        Box::new(|r| check(r, &[5, 3], |g, x| g.slice_rows(x, 1, 3))),
    ));
    v.push((
        "slice_cols",
        Box::new(|r| check(r, &[3, 5], |g, x| g.slice_cols(x, 2, 2))),
    ));
    v.push((
        "concat_cols",
        Box::new(|r| {
            let b = random(r, &[3, 2]);
            check(r, &[3, 3], move |g, x| {
                let b = g.leaf(&b);
                g.concat_cols(&[x, b, x])
            })
        }),
    ));
    v.push((
        "reshape",
        Box::new(|r| check(r, &[3, 4], |g, x| g.reshape(x, vec![2, 6]))),
    ));
    v.push((
        "cross_entropy_sum",
        Box::new(|r| {
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            let x = random(r, &[4, 6]);
            finite_difference_check(|g, v| g.cross_entropy_sum(v, &targets), &x, FD_STEP)
        }),
    ));
    v.push((
        "pinball_mean",
        Box::new(|r| {
            let x = random(r, &[2, 6]);
            let target: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let levels: Vec<f64> = (0..12).map(|_| r.random_range(0.05..0.95)).collect();
            finite_difference_check(|g, v| g.pinball_mean(v, &target, &levels), &x, FD_STEP)
        }),
    ));
    v
}

/// Worst relative error of every op over `FD_TRIALS` random inputs.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..FD_TRIALS)
                .map(|_| case(&mut rng).unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn tiny_spec() -> MixtureSpec {
    MixtureSpec {
        context_len: 24,
        horizon: 4,
        ..MixtureSpec::default()
    }
}

/// Two blocks, width 16 on both sides.
pub fn small_config(spec: &MixtureSpec) -> PipelineConfig {
    let mut c = PipelineConfig::for_spec(spec);
    c.student = StudentConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        ff_hidden: 16,
        lora_rank: 2,
        max_len: 64,
        ce_reduction: CeReduction::Mean,
    };
    c.tsfm.d_model = 16;
    c.tsfm.ff_hidden = 16;
    c
}

/// Pipeline with every trainable tensor jittered, so zero-initialized
/// adapter factors do not hide gradient paths.
pub fn jittered(mut p: Pipeline, seed: u64) -> Pipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in p.slots() {
        for v in p.param_mut(slot).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

/// Worst relative error of the end-to-end `L_total` gradient over
/// `FD_TRIALS` random coordinates of every trainable tensor.
pub fn end_to_end_gradient_error(seed: u64) -> Result<f64> {
    let spec = tiny_spec();
    let p = jittered(Pipeline::new(small_config(&spec), seed)?, seed);
    let ex = p.example(&generate_dataset(&spec, 1, seed)?[0], &spec)?;
    let w = LossWeights { alpha: 0.7, beta: 1.3 };
    let (_, grads) = p.loss_and_grads(&ex, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for (i, slot) in p.slots().into_iter().enumerate() {
        let x0 = p.param(slot).clone();
        for _ in 0..FD_TRIALS {
            let j = rng.random_range(0..x0.numel());
            let eval = |delta: f64| -> Result<f64> {
                let mut q = p.clone();
                q.param_mut(slot).data_mut()[j] = x0.data()[j] + delta;
                Ok(q.loss_and_grads(&ex, w)?.0.total)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max((grads[i][j] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
