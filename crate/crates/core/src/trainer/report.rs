//! Ablations, the modality-gap diagnostic, checkpoint evaluation, and
//! sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::alignnet::{self, Strategy};
use crate::distill::DivergenceKind;
use crate::encoders::{synth_modality_tokens, synth_payload, HiddenStateStack, Modality, Token, TokenStream};
use crate::error::{Error, Result};
use crate::mmdit::TapPosition;
use crate::params::ParamStore;
use crate::seed;
use crate::trainer::align::{evaluate_heldout, init_params, train_align_with, Encoded, HeldoutReport, Lab, PromptSet};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::RunConfig;
use crate::trainer::metrics::cosine;

/// Renders rows as an aligned plain-text table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&line(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

// ------------------------------------------------------------------ ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Alignnet,
    Position,
    Loss,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignnet" => Ok(AblationAxis::Alignnet),
            "position" => Ok(AblationAxis::Position),
            "loss" => Ok(AblationAxis::Loss),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Alignnet => "alignnet",
            AblationAxis::Position => "position",
            AblationAxis::Loss => "loss",
        })
    }
}

impl AblationAxis {
    /// Variant configurations derived from `base`, with their labels.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            AblationAxis::Alignnet => Strategy::ALL
                .iter()
                .map(|&s| {
                    let mut c = base.clone();
                    c.alignnet.strategy = s;
                    c.alignnet.layer_subset = None;
                    (s.name().to_string(), c)
                })
                .collect(),
            AblationAxis::Position => TapPosition::ALL
                .iter()
                .map(|&p| {
                    let mut c = base.clone();
                    c.tap = p;
                    (p.name().to_string(), c)
                })
                .collect(),
            AblationAxis::Loss => DivergenceKind::ALL
                .iter()
                .map(|&k| {
                    let mut c = base.clone();
                    c.distill.kind = k;
                    (k.name().to_string(), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub initial_loss: f64,
    /// Smoothed loss at the last step.
    pub final_loss: f64,
    pub heldout: HeldoutReport,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seed: u64,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    format!("{:.6}", r.initial_loss),
                    format!("{:.6}", r.final_loss),
                    format!("{:.4}", r.heldout.cosine),
                    format!("{:.6}", r.heldout.mse),
                    format!("{:.4}", r.heldout.ssim),
                ]
            })
            .collect();
        render_table(&["variant", "loss@0", "loss@end", "cosine", "mse", "ssim"], &rows)
    }
}

/// Trains every variant of `axis` with the base seed and step count and
/// compares them on the held-out prompts. Writes `ablation.json` and
/// `ablation.txt` when `out` is given.
pub fn ablate(base: &RunConfig, axis: AblationAxis, out: Option<&Path>) -> Result<AblationReport> {
    let lab = Lab::new(base)?;
    let prompts = PromptSet::load(base)?;
    let train = Encoded::new(&lab, &prompts.train)?;
    let heldout = Encoded::new(&lab, &prompts.heldout)?;
    let mut rows = Vec::new();
    for (label, cfg) in axis.variants(base) {
        cfg.validate()?;
        let mut vlab = lab.clone();
        vlab.cfg = cfg.clone();
        let run = train_align_with(&vlab, &train, None)?;
        let smoothed = run.smoothed(cfg.eval.ema_alpha);
        rows.push(AblationRow {
            variant: label,
            initial_loss: run.log.first().map_or(f64::NAN, |r| r.loss),
            final_loss: smoothed.last().copied().unwrap_or(f64::NAN),
            heldout: evaluate_heldout(&vlab, &heldout, &run.params)?,
            checkpoint_hash: run.hash,
        });
    }
    let report = AblationReport {
        axis,
        seed: base.seed,
        steps: base.steps,
        rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("ablation.txt"), report.table())?;
    }
    Ok(report)
}

// ------------------------------------------------------------------ modality gap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub modality: Modality,
    pub samples: usize,
    pub init_distance: f64,
    pub trained_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.modality.name().to_string(),
                    r.samples.to_string(),
                    format!("{:.4}", r.init_distance),
                    format!("{:.4}", r.trained_distance),
                ]
            })
            .collect();
        render_table(&["modality", "n", "init", "trained"], &rows)
    }
}

/// Cosine distance `1 − cos(a, b)`; a vanishing vector is at distance 1.
pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b)
}

/// Masked token mean of `[b, s, w]` values, one vector per batch entry.
fn pooled(x: &Tensor<f32>, mask: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (b, s, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (xd, md) = (x.data(), mask.data());
    (0..b)
        .map(|i| {
            let mut acc = vec![0.0; w];
            let mut n = 0.0;
            for j in 0..s {
                let m = md[i * s + j] as f64;
                if m > 0.0 {
                    n += m;
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += m * xd[(i * s + j) * w + k] as f64;
                    }
                }
            }
            if n > 0.0 {
                acc.iter_mut().for_each(|a| *a /= n);
            }
            acc
        })
        .collect()
}

/// Mean cosine distance between pooled bridge outputs and pooled teacher
/// sequence features, per modality, for the initial and the trained bridge.
/// Non-text streams carry the modality's tokens followed by the prompt text.
pub fn modality_gap_report(cfg: &RunConfig, trained: &ParamStore<f32>, modalities: &[Modality], samples: usize) -> Result<GapReport> {
    if modalities.len() < 2 {
        return Err(Error::Usage("gap report needs at least two modalities".into()));
    }
    let lab = Lab::new(cfg)?;
    let init = init_params(cfg)?;
    let prompts = PromptSet::load(cfg)?;
    let prompts: Vec<&String> = prompts.heldout.iter().take(samples).collect();
    let tok = lab.teacher.tokenizer();
    let text: Vec<TokenStream> = prompts
        .iter()
        .map(|p| TokenStream::text(tok, p).truncated(cfg.encoders.cond_len))
        .collect();
    let teacher = lab.teacher.encode_full::<f32>(&text)?;
    let teacher_vecs = pooled(&teacher.condition.c, &teacher.mask);
    let mut rows = Vec::new();
    for &m in modalities {
        let mut streams = Vec::with_capacity(prompts.len());
        for (i, t) in text.iter().enumerate() {
            let mut tokens: Vec<Token> = match m {
                Modality::Text => Vec::new(),
                other => synth_modality_tokens(other, &synth_payload(other, seed::derive(cfg.model_seed, "gap", i as u64))?)?,
            };
            tokens.extend(t.tokens.iter().cloned());
            streams.push(TokenStream { tokens }.truncated(cfg.encoders.max_seq));
        }
        let pad = streams.iter().map(TokenStream::len).max().unwrap_or(1);
        let stack: HiddenStateStack<f32> = lab.student.encode(&streams, pad)?;
        let dist = |params: &ParamStore<f32>| -> Result<f64> {
            let a = alignnet::align(params, &cfg.alignnet, &stack)?;
            let v = pooled(&a.y, &stack.mask);
            Ok(v.iter().zip(&teacher_vecs).map(|(s, t)| feature_distance(s, t)).sum::<f64>() / v.len() as f64)
        };
        rows.push(GapRow {
            modality: m,
            samples: prompts.len(),
            init_distance: dist(&init)?,
            trained_distance: dist(trained)?,
        });
    }
    Ok(GapReport { rows })
}

// ------------------------------------------------------------------ eval / sample

/// Held-out comparison of a stage-1 checkpoint against the teacher, under
/// the checkpoint's own configuration.
pub fn evaluate_checkpoint(ckpt: &Checkpoint) -> Result<HeldoutReport> {
    let cfg = &ckpt.config;
    let lab = Lab::new(cfg)?;
    let bridge = ckpt.component("alignnet.");
    if bridge.is_empty() {
        return Err(Error::Usage("checkpoint holds no bridge parameters".into()));
    }
    let prompts = PromptSet::load(cfg)?;
    let heldout = Encoded::new(&lab, &prompts.heldout)?;
    evaluate_heldout(&lab, &heldout, &bridge)
}

/// Final latent for `prompt`: through the teacher encoders, or through the
/// student encoder and the checkpoint's bridge when one is given.
pub fn sample_prompt(cfg: &RunConfig, prompt: &str, ckpt: Option<&Checkpoint>, steps: usize, seed: u64) -> Result<Tensor<f32>> {
    let lab = Lab::new(cfg)?;
    let encoded = Encoded::new(&lab, &[prompt.to_string()])?;
    let cond = match ckpt {
        Some(c) => {
            let bridge = c.component("alignnet.");
            crate::trainer::align::student_condition(&lab, &bridge, &encoded.student[0])?
        }
        None => encoded.teacher[0].clone(),
    };
    lab.model.sample(&cond, steps, seed, None, None)
}
