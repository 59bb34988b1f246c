//! Stage-2 pilot: stage-1 reference run (or an existing checkpoint), then
//! LightControl, LoRA and the modality-gap report.
//!
//! `cargo run --release -p alignlab --example stage2_pilot -- OUT_DIR [stage1.x2i]`

use std::path::PathBuf;
use std::time::Instant;

use alignlab::encoders::Modality;
use alignlab::trainer::{modality_gap_report, train_align, train_lightcontrol, train_lora, Checkpoint, RunConfig};

fn main() -> alignlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("stage2-pilot"));
    let cfg = RunConfig::default();
    let stage1 = match args.get(2) {
        Some(p) => Checkpoint::load(p.as_ref())?,
        None => {
            let run = train_align(&cfg, Some(&out.join("stage1")))?;
            run.checkpoint
        }
    };
    let gap = modality_gap_report(&cfg, &stage1.component("alignnet."), &Modality::ALL, 16)?;
    print!("{}", gap.table());
    let t = Instant::now();
    let lc = train_lightcontrol(&cfg, &stage1, Some(&out.join("lightcontrol")))?;
    println!("lightcontrol {:?} ratio={:.4} {:.1}s", lc.summary, lc.summary.final_val / lc.summary.baseline_val, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let lora = train_lora(&cfg, Some(&stage1), Some(&out.join("lora")))?;
    println!("lora {:?} ratio={:.4} {:.1}s", lora.summary, lora.summary.final_val / lora.summary.initial_val, t.elapsed().as_secs_f64());
    Ok(())
}
