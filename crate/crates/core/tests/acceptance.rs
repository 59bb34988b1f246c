//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion, and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use alignlab::alignnet::{self, identity_wiring, AlignNetConfig, HeadKind, Strategy};
use alignlab::distill::{divergence, layer_distill_loss, DistillConfig, DivergenceKind};
use alignlab::encoders::{HiddenStateStack, TokenStream};
use alignlab::lightcontrol::{init_lightcontrol, lightcontrol_forward};
use alignlab::mmdit::{attach_lora, block_forward, Control, ControlValues, Mmdit, MmditConfig, TapPosition, Weights};
use alignlab::selftest::{self, BlockInput};
use alignlab::trainer::align::{init_params, student_condition};
use alignlab::trainer::{
    evaluate_heldout, hash_file, pr_metric, run_align, ssim, train_align, train_align_with, Checkpoint, Encoded, Lab, MetricSpec,
    PipelineMode, PromptSet, RunConfig,
};
use common::{js, kl, short_run, softmax, ssim_direct};
use diffcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets, pinned.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_MIN_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const DIVERGENCE_TOL: f64 = 1e-10;
const DIVERGENCE_CHANNELS: usize = 8;
const PROPERTY_PAIRS: usize = 10_000;
const ZERO_LOSS_TOL: f64 = 1e-9;
const REFERENCE_STEPS: usize = 2000;
const LOSS_RATIO_MAX: f64 = 0.1;
const HELDOUT_COSINE_MIN: f64 = 0.95;
const REFERENCE_BUDGET: Duration = Duration::from_secs(30 * 60);
const PIPELINE_BATCHES: usize = 10;
const PIPELINE_TOL: f32 = 1e-6;
const SSIM_ORACLE_TOL: f64 = 1e-8;

type Verdict = (bool, String);

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Criterion 1: central-difference gradient checks.
fn gradients() -> Verdict {
    assert_eq!((selftest::GRAD_TOL, selftest::GRAD_STEP), (GRAD_REL_TOL, GRAD_H));
    assert!(selftest::GRAD_SEEDS >= GRAD_MIN_SEEDS);
    let started = Instant::now();
    let checks: Vec<_> = selftest::run().into_iter().filter(|c| c.name.starts_with("grad/")).collect();
    let mut worst = Vec::new();
    for input in [BlockInput::Image, BlockInput::Condition, BlockInput::Vector] {
        worst.push(selftest::block_grad_error(input).unwrap());
    }
    let elapsed = started.elapsed();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let block = worst.iter().cloned().fold(0.0, f64::max);
    (
        failed.is_empty() && block < GRAD_REL_TOL && elapsed < GRAD_BUDGET && checks.len() >= 14,
        format!(
            "{} probes, worst block rel err {block:.2e}, {:.1}s{}",
            checks.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join("; ")) }
        ),
    )
}

fn div(p: &[f64], q: &[f64], kind: DivergenceKind) -> f64 {
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::from_f64(&[1, p.len()], p).unwrap());
    let qv = tape.constant(Tensor::from_f64(&[1, q.len()], q).unwrap());
    let d = divergence(&mut tape, pv, qv, kind).unwrap();
    tape.value(d).item()
}

/// Criterion 2: divergences against brute force, plus properties.
fn divergences() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let p = softmax(Tensor::<f64>::randn(&[DIVERGENCE_CHANNELS], 1.5, &mut rng).data());
        let q = softmax(Tensor::<f64>::randn(&[DIVERGENCE_CHANNELS], 1.5, &mut rng).data());
        let mse = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / DIVERGENCE_CHANNELS as f64;
        for (kind, want) in [
            (DivergenceKind::Kl, kl(&p, &q)),
            (DivergenceKind::Rkl, kl(&q, &p)),
            (DivergenceKind::Js, js(&p, &q)),
            (DivergenceKind::Mse, mse),
        ] {
            worst = worst.max((div(&p, &q, kind) - want).abs());
        }
    }
    let mut violations = 0;
    for _ in 0..PROPERTY_PAIRS {
        let p = softmax(Tensor::<f64>::randn(&[DIVERGENCE_CHANNELS], 3.0, &mut rng).data());
        let q = softmax(Tensor::<f64>::randn(&[DIVERGENCE_CHANNELS], 3.0, &mut rng).data());
        for kind in DivergenceKind::ALL {
            if div(&p, &q, kind) < 0.0 {
                violations += 1;
            }
        }
        if div(&p, &q, DivergenceKind::Js) > std::f64::consts::LN_2 {
            violations += 1;
        }
    }
    (
        worst < DIVERGENCE_TOL && violations == 0,
        format!("max oracle err {worst:.2e}, {violations} property violations over {PROPERTY_PAIRS} pairs"),
    )
}

/// Criterion 3: zero modulation, fresh LoRA, and fresh LightControl leave
/// the generator unchanged.
fn no_ops() -> Verdict {
    let cfg = RunConfig::default();
    let zero = Mmdit::new(
        &MmditConfig {
            zero_modulation: true,
            ..cfg.mmdit.clone()
        },
        cfg.encoders.d_c,
        cfg.encoders.d_p,
        3,
    )
    .unwrap();
    let d = cfg.mmdit.width;
    let (x, c) = (randn(&[2, cfg.mmdit.tokens(), d], 1), randn(&[2, 5, d], 2));
    let mut tape = Tape::<f64>::new();
    let bound = zero.bind(&mut tape);
    let w = Weights::frozen(&bound);
    let (xv, cv, vv) = (tape.constant(x.clone()), tape.constant(c.clone()), tape.constant(randn(&[2, d], 3)));
    let mut identity = true;
    for l in 0..cfg.mmdit.double_blocks {
        let taps = block_forward(&mut tape, &w, &format!("double{l}"), xv, cv, vv, cfg.mmdit.heads).unwrap();
        identity &= tape.value(taps.x_o) == &x && tape.value(taps.c_o) == &c;
    }

    let model = Mmdit::new(&cfg.mmdit, cfg.encoders.d_c, cfg.encoders.d_p, 4).unwrap();
    let lab = Lab::new(&cfg).unwrap();
    let cond = lab.teacher.encode_text::<f64>(&["a red cat on a table", "a glass boat"]).unwrap();
    let latent = model.noise::<f64>(2, 5);
    let t = [1.0, 0.4];
    let base = model.velocity(&latent, &cond, &t, None, None).unwrap();
    let lora = attach_lora(&model, &model.attention_targets(), cfg.lora.rank, cfg.lora.scale, 6).unwrap();
    let lora_same = model.velocity(&latent, &cond, &t, Some(&lora), None).unwrap() == base;

    let spec = cfg.lightcontrol.resolve(&cfg.mmdit).unwrap();
    let lc = init_lightcontrol(&spec, cfg.encoders.d_p, 7);
    let mut tape = Tape::<f64>::new();
    let bound = lc.bind(&mut tape, false);
    let (iv, pv) = (tape.constant(randn(&spec.reference_shape(2), 8)), tape.constant(cond.c_p.clone()));
    let outs = lightcontrol_forward(&mut tape, &bound, &spec, iv, pv).unwrap();
    let control = ControlValues {
        double: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        single: vec![],
    };
    let lc_same = model.velocity(&latent, &cond, &t, None, Some(&control)).unwrap() == base;
    (
        identity && lora_same && lc_same,
        format!("zero-modulation identity {identity}, fresh LoRA bitwise {lora_same}, fresh LightControl bitwise {lc_same}"),
    )
}

/// Criterion 4: a bridge wired to reproduce the teacher has zero loss at
/// every tap position, for every divergence.
fn zero_loss() -> Verdict {
    let cfg = RunConfig::default();
    let lab = Lab::new(&cfg).unwrap();
    let prompts = PromptSet::load(&cfg).unwrap();
    let streams: Vec<TokenStream> = prompts.heldout[..4].iter().map(|p| TokenStream::text(lab.teacher.tokenizer(), p)).collect();
    let full = lab.teacher.encode_full::<f64>(&streams).unwrap();
    let (b, s) = (4, cfg.encoders.cond_len);
    let (d_c, pw) = (cfg.encoders.d_c, full.pooled_hidden.shape()[2]);
    let (cd, hd) = (full.condition.c.data(), full.pooled_hidden.data());
    let mut stack = Vec::with_capacity(b * s * (d_c + pw));
    for row in 0..b * s {
        stack.extend_from_slice(&cd[row * d_c..(row + 1) * d_c]);
        stack.extend_from_slice(&hd[row * pw..(row + 1) * pw]);
    }
    let stack = HiddenStateStack {
        h: Tensor::from_f64(&[b, 1, s, d_c + pw], &stack).unwrap(),
        mask: full.mask.clone(),
    };
    let bridge_cfg = AlignNetConfig {
        strategy: Strategy::A1,
        head: HeadKind::Linear,
        pooled_head: HeadKind::Linear,
        ..Default::default()
    };
    let tp = lab.teacher.params();
    let bridge = identity_wiring(&bridge_cfg, d_c, tp.get("pool.proj.w").unwrap(), tp.get("pool.proj.b").unwrap()).unwrap();
    let student = alignnet::align(&bridge, &bridge_cfg, &stack).unwrap();

    let latent = lab.model.noise::<f64>(b, 9);
    let mut worst = 0.0f64;
    for position in TapPosition::ALL {
        for kind in DivergenceKind::ALL {
            let mut tape = Tape::<f64>::new();
            let base = lab.model.bind(&mut tape);
            let w = Weights::frozen(&base);
            let x = tape.constant(latent.clone());
            let run = |tape: &mut Tape<f64>, c: &Tensor<f64>, c_p: &Tensor<f64>| {
                let (cv, pv) = (tape.constant(c.clone()), tape.constant(c_p.clone()));
                lab.model.forward_on(tape, &w, x, cv, pv, &[1.0; 4], Control::default()).unwrap()
            };
            let teacher = run(&mut tape, &full.condition.c, &full.condition.c_p).taps(position);
            let taps = run(&mut tape, &student.y, &student.y_p).taps(position);
            let dcfg = DistillConfig {
                kind,
                ..cfg.distill.clone()
            };
            let (loss, _) = layer_distill_loss(&mut tape, &taps, &teacher, &dcfg).unwrap();
            worst = worst.max(tape.value(loss).item().abs());
        }
    }
    (
        worst < ZERO_LOSS_TOL,
        format!("max loss {worst:.2e} over {} positions x {} divergences", TapPosition::ALL.len(), DivergenceKind::ALL.len()),
    )
}

struct Reference {
    ratio: f64,
    initial: f64,
    smoothed: f64,
    cosine: f64,
    attn_mse: f64,
    block_mse: f64,
    runtime: Duration,
}

/// Reference run and its block-tap counterpart, trained side by side.
fn reference_runs() -> Reference {
    let cfg = RunConfig::default();
    assert_eq!(cfg.steps, REFERENCE_STEPS);
    assert_eq!(cfg.tap, TapPosition::Attn);
    let lab = Lab::new(&cfg).unwrap();
    let prompts = PromptSet::load(&cfg).unwrap();
    let train = Encoded::new(&lab, &prompts.train).unwrap();
    let heldout = Encoded::new(&lab, &prompts.heldout).unwrap();
    let mut block_lab = lab.clone();
    block_lab.cfg.tap = TapPosition::Block;
    let ((attn, runtime), block) = std::thread::scope(|s| {
        let block = s.spawn(|| train_align_with(&block_lab, &train, None).unwrap());
        let started = Instant::now();
        let attn = train_align_with(&lab, &train, None).unwrap();
        ((attn, started.elapsed()), block.join().unwrap())
    });
    let smoothed = *attn.smoothed(cfg.eval.ema_alpha).last().unwrap();
    let initial = attn.log[0].loss;
    let a = evaluate_heldout(&lab, &heldout, &attn.params).unwrap();
    let b = evaluate_heldout(&block_lab, &heldout, &block.params).unwrap();
    Reference {
        ratio: smoothed / initial,
        initial,
        smoothed,
        cosine: a.cosine,
        attn_mse: a.mse,
        block_mse: b.mse,
        runtime,
    }
}

/// Criterion 7: overlapped and sequential pipelines agree.
fn pipeline() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for strict in [true, false] {
        let mut cfg = short_run(PIPELINE_BATCHES);
        cfg.strict = strict;
        let lab = Lab::new(&cfg).unwrap();
        let data = Encoded::new(&lab, &PromptSet::load(&cfg).unwrap().train).unwrap();
        let seq = train_align_with(&lab, &data, None).unwrap();
        let mut olab = lab.clone();
        olab.cfg.pipeline = PipelineMode::Overlapped;
        let mut params = init_params(&cfg).unwrap();
        run_align(&olab, &data, &mut params, None).unwrap();
        let diff = params
            .iter()
            .zip(seq.params.iter())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0f32, f32::max);
        if strict {
            let same = params.hash() == seq.params.hash();
            ok &= same;
            details.push(format!("strict hashes equal {same}"));
        } else {
            ok &= diff <= PIPELINE_TOL;
            details.push(format!("non-strict max diff {diff:.1e}"));
        }
    }
    (ok, format!("{PIPELINE_BATCHES} batches: {}", details.join(", ")))
}

/// Criterion 8: metric oracles.
fn metrics() -> Verdict {
    let a = randn(&[8, 8, 3], 11).to_f64_vec();
    let b: Vec<f64> = a.iter().zip(randn(&[8, 8, 3], 12).data()).map(|(x, n)| x + 0.3 * n).collect();
    let self_one = ssim(&a, &a, [8, 8, 3], 5.0).unwrap() == 1.0;
    let err = (ssim(&a, &b, [8, 8, 3], 5.0).unwrap() - ssim_direct(&a, &b, 8, 8, 3, 5.0)).abs();
    let unit = |n: &str| MetricSpec::new(n, 0.0, 1.0).unwrap();
    let specs = [unit("a"), unit("b")];
    let full = pr_metric(&[0.4, 0.8], &[0.4, 0.8], &specs).unwrap().pr;
    let partial = pr_metric(&[0.5, 1.0], &[1.0, 1.0], &specs).unwrap().pr;
    (
        self_one && err < SSIM_ORACLE_TOL && full == 100.0 && partial == 75.0,
        format!("ssim(x,x)=1 {self_one}, oracle err {err:.1e}, PR {full}% and {partial}%"),
    )
}

/// Criterion 9: checkpoint round trip.
fn checkpoint() -> Verdict {
    let cfg = short_run(3);
    let dir = tempfile::tempdir().unwrap();
    let run = train_align(&cfg, Some(dir.path())).unwrap();
    let path = dir.path().join("checkpoint.x2i");
    let back = Checkpoint::load(&path).unwrap();
    let bitwise = back.arrays.iter().zip(run.checkpoint.arrays.iter()).all(|((na, a), (nb, b))| {
        na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back == run.checkpoint
        && back.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    let lab = Lab::new(&cfg).unwrap();
    let data = Encoded::new(&lab, &PromptSet::load(&cfg).unwrap().heldout).unwrap();
    let stack = data.student_batch(&[0, 1, 2, 3]).unwrap();
    let x = student_condition(&lab, &run.params, &stack).unwrap();
    let y = student_condition(&lab, &back.component("alignnet."), &stack).unwrap();
    let forward = x == y;
    (bitwise && forward, format!("arrays bitwise {bitwise}, forward bitwise {forward}"))
}

fn jsonl_without_wall(path: &std::path::Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

/// Criterion 10: identical configurations give identical artifacts.
fn determinism() -> Verdict {
    let cfg = short_run(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_align(&cfg, Some(a.path())).unwrap();
    train_align(&cfg, Some(b.path())).unwrap();
    let (ha, hb) = (hash_file(&a.path().join("checkpoint.x2i")).unwrap(), hash_file(&b.path().join("checkpoint.x2i")).unwrap());
    let logs = jsonl_without_wall(&a.path().join("metrics.jsonl")) == jsonl_without_wall(&b.path().join("metrics.jsonl"));
    (ha == hb && logs, format!("hash {} twice {}, logs equal {logs}", &ha[..12], ha == hb))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |n: u32, name: &'static str, v: Verdict| {
        println!("{} criterion {n}: {name} — {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((n, name, v));
    };
    record(1, "gradient checks", guarded(gradients));
    record(2, "divergence oracles", guarded(divergences));
    record(3, "no-op adapters and modulation", guarded(no_ops));
    record(4, "zero loss under identity wiring", guarded(zero_loss));
    let reference = catch_unwind(reference_runs);
    match &reference {
        Ok(r) => {
            record(
                5,
                "reference run converges",
                (
                    r.ratio < LOSS_RATIO_MAX && r.cosine >= HELDOUT_COSINE_MIN && r.runtime < REFERENCE_BUDGET,
                    format!(
                        "loss {:.4} -> {:.4} (ratio {:.4}, need < {LOSS_RATIO_MAX}), held-out cosine {:.4} (need >= {HELDOUT_COSINE_MIN}), {:.0}s",
                        r.initial,
                        r.smoothed,
                        r.ratio,
                        r.cosine,
                        r.runtime.as_secs_f64()
                    ),
                ),
            );
            record(
                6,
                "attention tap beats block tap",
                (
                    r.attn_mse < r.block_mse,
                    format!("held-out mse attn {:.5} vs block {:.5}", r.attn_mse, r.block_mse),
                ),
            );
        }
        Err(_) => {
            record(5, "reference run converges", (false, "reference run panicked".into()));
            record(6, "attention tap beats block tap", (false, "reference run panicked".into()));
        }
    }
    record(7, "pipeline equivalence", guarded(pipeline));
    record(8, "metric oracles", guarded(metrics));
    record(9, "checkpoint round trip", guarded(checkpoint));
    record(10, "determinism", guarded(determinism));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("\nacceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
