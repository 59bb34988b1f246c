//! Build-health checks run by the `selftest` command: central-difference
//! gradient checks over the primitives and a full double-stream block, plus
//! closed-form checks of the divergences and metrics.

use diffcore::{grad_check, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{divergence, DivergenceKind};
use crate::error::Result;
use crate::mmdit::{block_forward, Mmdit, MmditConfig, Weights};
use crate::trainer::metrics::{pr_metric, ssim, MetricSpec};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> diffcore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::randn(tape.shape(y), 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

type Probe = fn(&mut Tape<f64>, Var) -> diffcore::Result<Var>;

fn primitive_probes() -> Vec<(&'static str, Vec<usize>, Probe)> {
    vec![
        ("matmul", vec![2, 3, 4], |t, x| {
            let xt = t.transpose(x)?;
            t.matmul(x, xt)
        }),
        ("softmax", vec![3, 5], |t, x| t.softmax(x, 1)),
        ("layer_norm", vec![3, 6], |t, x| t.layer_norm(x, 1, 1e-6)),
        ("silu", vec![3, 4], |t, x| Ok(t.silu(x))),
        ("exp", vec![3, 4], |t, x| Ok(t.exp(x))),
        ("ln", vec![3, 4], |t, x| {
            let sq = t.square(x)?;
            let pos = t.add_scalar(sq, 0.5);
            Ok(t.ln(pos))
        }),
        ("div", vec![3, 4], |t, x| {
            let sq = t.square(x)?;
            let den = t.add_scalar(sq, 1.0);
            t.div(x, den)
        }),
        ("permute_concat_slice", vec![2, 3, 4], |t, x| {
            let p = t.permute(x, &[2, 0, 1])?;
            let c = t.concat(&[p, p], 2)?;
            t.slice(c, 2, 1, 4)
        }),
        ("mean_axis", vec![3, 4, 2], |t, x| t.mean_axis(x, 1)),
        ("gather_rows", vec![4, 3], |t, x| t.gather_rows(x, &[Some(3), None, Some(0), Some(3)])),
        ("conv_layers", vec![1, 3, 4, 2], |t, x| {
            let k = t.constant(Tensor::from_f64(&[3, 3], &[0.2, -0.4, 0.7, 1.1, 0.3, -0.6, 0.5, 0.9, -0.1])?);
            t.conv_layers(x, k, 1)
        }),
    ]
}

/// Largest relative gradient error over `GRAD_SEEDS` random inputs.
fn worst_over_seeds(shape: &[usize], f: impl Fn(&mut Tape<f64>, Var, u64) -> Result<Var>) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let err = grad_check(|t, v| f(t, v, seed).map_err(|e| diffcore::DiffError::Usage(e.to_string())), &x, GRAD_STEP)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Small generator for block-level checks: width 8, two heads, one block.
pub fn tiny_model(seed: u64) -> Result<Mmdit> {
    let cfg = MmditConfig {
        width: 8,
        heads: 2,
        ff_mult: 2,
        double_blocks: 1,
        latent_size: 4,
        latent_channels: 2,
        patch: 2,
        freq_dim: 8,
        ..MmditConfig::default()
    };
    Mmdit::new(&cfg, 6, 5, seed)
}

/// Which block input the gradient is taken against.
#[derive(Clone, Copy, Debug)]
pub enum BlockInput {
    Image,
    Condition,
    Vector,
}

/// Relative gradient error of `sum(w·x_O) + sum(w·c_O)` through one full
/// double-stream block, worst over the seeds.
pub fn block_grad_error(input: BlockInput) -> Result<f64> {
    let model = tiny_model(7)?;
    let (n, s, d) = (4, 3, model.config().width);
    let shape = match input {
        BlockInput::Image => vec![2, n, d],
        BlockInput::Condition => vec![2, s, d],
        BlockInput::Vector => vec![2, d],
    };
    worst_over_seeds(&shape, |tape, v, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut input_or = |shape: &[usize], probed: bool| {
            let fixed = Tensor::randn(shape, 1.0, &mut rng);
            if probed {
                v
            } else {
                tape.constant(fixed)
            }
        };
        let x = input_or(&[2, n, d], matches!(input, BlockInput::Image));
        let c = input_or(&[2, s, d], matches!(input, BlockInput::Condition));
        let cond = input_or(&[2, d], matches!(input, BlockInput::Vector));
        let bound = model.bind(tape);
        let w = Weights::frozen(&bound);
        let taps = block_forward(tape, &w, "double0", x, c, cond, model.config().heads)?;
        let a = weighted_sum(tape, taps.x_o, seed)?;
        let b = weighted_sum(tape, taps.c_o, seed + 1)?;
        Ok(tape.add(a, b)?)
    })
}

fn closed_form(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
    match kind {
        DivergenceKind::Mse => p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p.len() as f64,
        DivergenceKind::Kl => kl(p, q),
        DivergenceKind::Rkl => kl(q, p),
        DivergenceKind::Js => {
            let m: Vec<f64> = p.iter().zip(q).map(|(x, y)| 0.5 * (x + y)).collect();
            0.5 * kl(p, &m) + 0.5 * kl(q, &m)
        }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let t = Tensor::<f64>::randn(&[n], 1.0, rng);
    let e: Vec<f64> = t.data().iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn divergence_error(kind: DivergenceKind, samples: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (random_simplex(&mut rng, 8), random_simplex(&mut rng, 8));
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::from_f64(&[1, 8], &p)?);
        let qv = tape.constant(Tensor::from_f64(&[1, 8], &q)?);
        let d = divergence(&mut tape, pv, qv, kind)?;
        worst = worst.max((tape.value(d).item() - closed_form(kind, &p, &q)).abs());
    }
    Ok(worst)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Runs every check; a check that errors is reported as failed.
pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    for (name, shape, probe) in primitive_probes() {
        let r = worst_over_seeds(&shape, |t, x, seed| {
            let y = probe(t, x)?;
            Ok(weighted_sum(t, y, seed)?)
        });
        out.push(grad_result(&format!("grad/{name}"), r));
    }
    for (name, input) in [("x", BlockInput::Image), ("c", BlockInput::Condition), ("vec", BlockInput::Vector)] {
        out.push(grad_result(&format!("grad/block_{name}"), block_grad_error(input)));
    }
    for kind in DivergenceKind::ALL {
        match divergence_error(kind, 50) {
            Ok(e) => out.push(check(&format!("divergence/{}", kind.name()), e < 1e-10, format!("max abs err {e:.3e}"))),
            Err(e) => out.push(check(&format!("divergence/{}", kind.name()), false, e.to_string())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::<f64>::randn(&[8, 8, 1], 1.0, &mut rng);
    match ssim(img.data(), img.data(), [8, 8, 1], 2.0) {
        Ok(v) => out.push(check("metric/ssim_identity", v == 1.0, format!("ssim(x,x) = {v}"))),
        Err(e) => out.push(check("metric/ssim_identity", false, e.to_string())),
    }
    let pr = MetricSpec::new("a", 0.0, 1.0).and_then(|a| {
        let b = MetricSpec::new("b", 0.0, 1.0)?;
        let same = pr_metric(&[0.4, 0.6], &[0.4, 0.6], &[a.clone(), b.clone()])?.pr;
        let mixed = pr_metric(&[0.4, 0.3], &[0.4, 0.6], &[a, b])?.pr;
        Ok((same, mixed))
    });
    match pr {
        Ok((same, mixed)) => out.push(check(
            "metric/pr_examples",
            same == 100.0 && mixed == 75.0,
            format!("identity {same}%, two-metric {mixed}%"),
        )),
        Err(e) => out.push(check("metric/pr_examples", false, e.to_string())),
    }
    out
}

fn grad_result(name: &str, r: Result<f64>) -> Check {
    match r {
        Ok(e) => check(name, e < GRAD_TOL, format!("max rel err {e:.3e}")),
        Err(e) => check(name, false, e.to_string()),
    }
}
