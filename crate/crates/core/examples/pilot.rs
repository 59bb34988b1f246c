//! Reference alignment run: prints loss trajectory, held-out metrics and timing.
//!
//! `cargo run --release -p alignlab --example pilot -- [steps] [tap] [config.json]`

use std::time::Instant;

use alignlab::trainer::align::init_params as init_params_for_report;
use alignlab::trainer::{evaluate_heldout, train_align_with, Encoded, Lab, PromptSet, RunConfig};

fn main() -> alignlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(3) {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.get(1) {
        cfg.steps = s.parse().expect("steps");
    }
    if let Some(t) = args.get(2) {
        cfg.tap = t.parse()?;
    }
    let t0 = Instant::now();
    let lab = Lab::new(&cfg)?;
    let prompts = PromptSet::load(&cfg)?;
    let train = Encoded::new(&lab, &prompts.train)?;
    let heldout = Encoded::new(&lab, &prompts.heldout)?;
    eprintln!("setup {:.1}s", t0.elapsed().as_secs_f64());
    let base = evaluate_heldout(&lab, &heldout, &init_params_for_report(&cfg)?)?;
    eprintln!("init heldout {base:?}");
    let t1 = Instant::now();
    let run = train_align_with(&lab, &train, None)?;
    let train_s = t1.elapsed().as_secs_f64();
    let sm = run.smoothed(cfg.eval.ema_alpha);
    for i in (0..sm.len()).step_by((sm.len() / 20).max(1)) {
        eprintln!("step {i:5} loss {:.6} smoothed {:.6}", run.log[i].loss, sm[i]);
    }
    let rep = evaluate_heldout(&lab, &heldout, &run.params)?;
    println!(
        "tap={} steps={} initial={:.6} final_smoothed={:.6} ratio={:.4} heldout={rep:?} train_s={train_s:.1}",
        cfg.tap,
        cfg.steps,
        run.log[0].loss,
        sm.last().unwrap(),
        sm.last().unwrap() / run.log[0].loss
    );
    Ok(())
}
