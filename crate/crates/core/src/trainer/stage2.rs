//! Rectified-flow training of the LightControl stack and of LoRA adapters,
//! both with the generator and the bridge frozen.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use diffcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{synth_modality_tokens, HiddenStateStack, Modality, Payload, TeacherCondition, TemplateParts, TokenStream};
use crate::error::{Error, Result};
use crate::lightcontrol::{init_lightcontrol, lightcontrol_forward, split_outputs, LightControlSpec, PairDataset};
use crate::mmdit::{attach_lora, Control, LoraParams, Weights};
use crate::params::ParamStore;
use crate::seed;
use crate::trainer::align::{check_trainable_set, student_condition, Lab, StepRecord};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::RunConfig;
use crate::trainer::optim::AdamW;

/// Loads a stage-1 checkpoint for a later stage, insisting that it was
/// produced with the same frozen components.
pub fn load_stage1(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!("stage-1 checkpoint {} not found", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    check_stage1(cfg, &ckpt)?;
    Ok(ckpt)
}

pub fn check_stage1(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let c = &ckpt.config;
    if c.encoders != cfg.encoders || c.mmdit != cfg.mmdit || c.alignnet != cfg.alignnet || c.model_seed != cfg.model_seed {
        return Err(Error::Config(
            "stage-1 checkpoint was trained with different encoders, generator, or bridge settings".into(),
        ));
    }
    if ckpt.component("alignnet.").is_empty() {
        return Err(Error::Usage("checkpoint holds no bridge parameters".into()));
    }
    Ok(())
}

/// Pair data with frozen per-pair conditions.
struct PairData {
    pairs: PairDataset,
    cond: Vec<TeacherCondition<f32>>,
}

impl PairData {
    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, TeacherCondition<f32>)> {
        let refs: Vec<Tensor<f32>> = idx.iter().map(|&i| self.pairs.references[i].cast()).collect();
        let tgts: Vec<Tensor<f32>> = idx.iter().map(|&i| self.pairs.targets[i].cast()).collect();
        let conds: Vec<&TeacherCondition<f32>> = idx.iter().map(|&i| &self.cond[i]).collect();
        Ok((Tensor::stack(&refs)?, Tensor::stack(&tgts)?, TeacherCondition::stack(&conds)?))
    }
}

fn conditions(lab: &Lab, bridge: &ParamStore<f32>, streams: Vec<TokenStream>, pad_to: usize) -> Result<Vec<TeacherCondition<f32>>> {
    let mut out = Vec::with_capacity(streams.len());
    for chunk in streams.chunks(32) {
        let stack: HiddenStateStack<f32> = lab.student.encode(chunk, pad_to)?;
        let cond = student_condition(lab, bridge, &stack)?;
        for i in 0..chunk.len() {
            let mut cs = vec![1];
            cs.extend_from_slice(&cond.c.shape()[1..]);
            out.push(TeacherCondition {
                c: cond.c.index0(i).reshaped(&cs)?,
                c_p: cond.c_p.index0(i).reshaped(&[1, cond.c_p.shape()[1]])?,
            });
        }
    }
    Ok(out)
}

/// Noisy latent and velocity target: `x_t = (1 − t) x_0 + t ε`, `v = ε − x_0`.
fn flow_pair(x0: &Tensor<f32>, t: &[f64], noise: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let per = x0.numel() / t.len();
    let mut xt = x0.clone();
    for (i, (x, &e)) in xt.data_mut().iter_mut().zip(noise.data()).enumerate() {
        let ti = t[i / per] as f32;
        *x = (1.0 - ti) * *x + ti * e;
    }
    let v = noise.zip_map(x0, |e, x| e - x)?;
    Ok((xt, v))
}

fn plan(seed_base: u64, label: &str, step: u64, batch: usize, pool: usize, lab: &Lab) -> (u64, Vec<usize>, Vec<f64>, Tensor<f32>) {
    let bs = seed::derive(seed_base, label, step);
    let mut rng = seed::rng(bs, "indices", 0);
    let idx = (0..batch).map(|_| rng.random_range(0..pool)).collect();
    let t = (0..batch).map(|_| rng.random_range(0.02..=1.0)).collect();
    (bs, idx, t, lab.model.noise(batch, bs))
}

/// Trainable component of a stage-2 style run.
enum Adapter<'a> {
    Control { spec: &'a LightControlSpec },
    Lora { lora: &'a LoraParams },
}

/// Mean squared velocity error of a batch, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
fn flow_loss(
    tape: &mut Tape<f32>,
    lab: &Lab,
    adapter: Option<(&Adapter, &crate::params::Bound)>,
    refs: &Tensor<f32>,
    xt: &Tensor<f32>,
    v: &Tensor<f32>,
    cond: &TeacherCondition<f32>,
    t: &[f64],
) -> Result<Var> {
    let base = lab.model.bind(tape);
    let x = tape.constant(xt.clone());
    let c = tape.constant(cond.c.clone());
    let c_p = tape.constant(cond.c_p.clone());
    let mut w = Weights::frozen(&base);
    let (mut double, mut single) = (Vec::new(), Vec::new());
    match adapter {
        Some((Adapter::Control { spec }, bound)) => {
            let ci = tape.constant(refs.clone());
            let outs = lightcontrol_forward(tape, bound, spec, ci, c_p)?;
            (double, single) = split_outputs(spec, &outs);
        }
        Some((Adapter::Lora { lora }, bound)) => w.lora = Some((bound, lora.scale as f32)),
        None => {}
    }
    let out = lab.model.forward_on(tape, &w, x, c, c_p, t, Control { double: &double, single: &single })?;
    let target = tape.constant(v.clone());
    let d = tape.sub(out.velocity, target)?;
    let sq = tape.square(d)?;
    Ok(tape.mean_all(sq))
}

/// Fixed-noise validation loss over every pair; `trained` is `None` for the
/// frozen baseline.
fn validation_loss(lab: &Lab, data: &PairData, trained: Option<(&Adapter, &ParamStore<f32>)>, seed_base: u64) -> Result<f64> {
    let n = data.pairs.len();
    let all: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (ci, idx) in all.chunks(16).enumerate() {
        let (_, _, t, noise) = plan(seed_base, "val", ci as u64, idx.len(), n, lab);
        let (refs, x0, cond) = data.batch(idx)?;
        let (xt, v) = flow_pair(&x0, &t, &noise)?;
        let mut tape = Tape::<f32>::new();
        let bound = trained.map(|(_, p)| p.bind(&mut tape, false));
        let adapter = trained.map(|(a, _)| a).zip(bound.as_ref());
        let loss = flow_loss(&mut tape, lab, adapter, &refs, &xt, &v, &cond, &t)?;
        total += tape.value(loss).item() as f64 * idx.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    /// Validation loss of the frozen model with no adapter.
    pub baseline_val: f64,
    /// Validation loss with the freshly initialized adapter.
    pub initial_val: f64,
    pub final_val: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub checkpoint: Checkpoint,
    pub hash: String,
    pub log: Vec<StepRecord>,
    pub summary: Stage2Summary,
    pub params: ParamStore<f32>,
}

#[allow(clippy::too_many_arguments)]
fn train_adapter(
    lab: &Lab,
    adapter: &Adapter,
    params: &mut ParamStore<f32>,
    train: &PairData,
    val: &PairData,
    steps: usize,
    batch: usize,
    lr: f64,
    label: &str,
) -> Result<(Vec<StepRecord>, Stage2Summary)> {
    let cfg = &lab.cfg;
    let val_seed = seed::derive(cfg.seed, label, u64::MAX);
    let baseline_val = validation_loss(lab, val, None, val_seed)?;
    let initial_val = validation_loss(lab, val, Some((adapter, params)), val_seed)?;
    let mut opt = AdamW::with_lr(&cfg.optim, lr);
    let mut log = Vec::with_capacity(steps);
    let seed_base = seed::derive(cfg.seed, label, 0);
    for step in 0..steps as u64 {
        let started = Instant::now();
        let (bs, idx, t, noise) = plan(seed_base, "batch", step, batch, train.pairs.len(), lab);
        let (refs, x0, cond) = train.batch(&idx)?;
        let (xt, v) = flow_pair(&x0, &t, &noise)?;
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, true);
        let loss = flow_loss(&mut tape, lab, Some((adapter, &bound)), &refs, &xt, &v, &cond, &t)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_seed: bs });
        }
        let grads = tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(var) {
                named.insert(name.to_string(), g.clone());
            }
        }
        check_trainable_set(params.names(), &named)?;
        opt.step(params, &named)?;
        log.push(StepRecord {
            step,
            loss: value,
            loss_per_block: Vec::new(),
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: bs,
        });
    }
    let final_val = validation_loss(lab, val, Some((adapter, params)), val_seed)?;
    Ok((
        log,
        Stage2Summary {
            baseline_val,
            initial_val,
            final_val,
        },
    ))
}

fn write_outputs(out: Option<&Path>, ckpt: &Checkpoint, log: &[StepRecord], summary: &Stage2Summary) -> Result<String> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut lines = String::new();
            for r in log {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            std::fs::write(dir.join("metrics.jsonl"), lines)?;
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
            ckpt.save(&dir.join("checkpoint.x2i"))
        }
        None => ckpt.hash(),
    }
}

/// Stage 2: train LightControl on edge-map → filled-shape pairs with the
/// stage-1 bridge frozen.
pub fn train_lightcontrol(cfg: &RunConfig, stage1: &Checkpoint, out: Option<&Path>) -> Result<Stage2Outcome> {
    let lab = Lab::new(cfg)?;
    check_stage1(cfg, stage1)?;
    let bridge = stage1.component("alignnet.");
    let spec = cfg.lightcontrol.resolve(&cfg.mmdit)?;
    let s2 = &cfg.stage2;
    let make = |count: usize, label: &str| -> Result<PairData> {
        let pairs = PairDataset::synthesize(count, spec.cfg.raster, &cfg.mmdit, seed::derive(cfg.model_seed, label, 0))?;
        let streams = pairs
            .prompts
            .iter()
            .map(|p| TokenStream::text(lab.student.tokenizer(), p).truncated(cfg.encoders.cond_len))
            .collect();
        let cond = conditions(&lab, &bridge, streams, cfg.encoders.cond_len)?;
        Ok(PairData { pairs, cond })
    };
    let train = make(s2.train_pairs, "pairs-train")?;
    let val = make(s2.val_pairs, "pairs-val")?;
    let mut params: ParamStore<f32> = init_lightcontrol(&spec, cfg.encoders.d_p, cfg.seed).cast();
    let adapter = Adapter::Control { spec: &spec };
    let (log, summary) = train_adapter(&lab, &adapter, &mut params, &train, &val, s2.steps, s2.batch_size, s2.lr, "stage2")?;
    let mut arrays = ParamStore::new();
    arrays.extend_prefixed("alignnet.", &bridge);
    arrays.extend_prefixed("lightcontrol.", &params);
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage: "lightcontrol".into(),
        step: s2.steps as u64,
        seed_state: seed::derive(seed::derive(cfg.seed, "stage2", 0), "batch", s2.steps as u64),
        arrays,
    };
    let hash = write_outputs(out, &checkpoint, &log, &summary)?;
    Ok(Stage2Outcome {
        checkpoint,
        hash,
        log,
        summary,
        params,
    })
}

/// 2× average pool of a `[2n, 2n, 3]` raster.
fn downsample(img: &Tensor<f64>) -> Payload {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let d = img.data();
    let mut data = Vec::with_capacity(h / 2 * w / 2 * 3);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + c];
                data.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
            }
        }
    }
    Payload {
        shape: vec![h / 2, w / 2, 3],
        data,
    }
}

/// LoRA training on templated image-conditioned prompts: the text prompt
/// names the shape, the image slot carries its edge map, and the target is
/// the filled shape. Only the adapter factors are updated.
pub fn train_lora(cfg: &RunConfig, stage1: Option<&Checkpoint>, out: Option<&Path>) -> Result<Stage2Outcome> {
    let lab = Lab::new(cfg)?;
    let bridge: ParamStore<f32> = match stage1 {
        Some(c) => {
            check_stage1(cfg, c)?;
            c.component("alignnet.")
        }
        None => crate::trainer::align::init_params(cfg)?,
    };
    let l = &cfg.lora;
    let targets = l.targets.clone().unwrap_or_else(|| lab.model.attention_targets());
    let lora = attach_lora(&lab.model, &targets, l.rank, l.scale, cfg.seed)?;
    let make = |count: usize, label: &str| -> Result<PairData> {
        let pairs = PairDataset::synthesize(count, 16, &cfg.mmdit, seed::derive(cfg.model_seed, label, 0))?;
        let mut streams = Vec::with_capacity(count);
        for (p, r) in pairs.prompts.iter().zip(&pairs.references) {
            let image = synth_modality_tokens(Modality::Image, &downsample(r))?;
            let parts = TemplateParts {
                text_prompt: p.clone(),
                image: Some(image),
                ..Default::default()
            };
            streams.push(crate::encoders::build_template(&parts, lab.student.tokenizer())?.stream);
        }
        let cond = conditions(&lab, &bridge, streams, cfg.encoders.max_seq)?;
        Ok(PairData { pairs, cond })
    };
    let train = make(l.train_pairs, "lora-train")?;
    let val = make(l.val_pairs, "lora-val")?;
    let mut params: ParamStore<f32> = lora.store.cast();
    let adapter = Adapter::Lora { lora: &lora };
    let (log, summary) = train_adapter(&lab, &adapter, &mut params, &train, &val, l.steps, l.batch_size, l.lr, "lora")?;
    let mut arrays = ParamStore::new();
    arrays.extend_prefixed("alignnet.", &bridge);
    arrays.extend_prefixed("lora.", &params);
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage: "lora".into(),
        step: l.steps as u64,
        seed_state: seed::derive(seed::derive(cfg.seed, "lora", 0), "batch", l.steps as u64),
        arrays,
    };
    let hash = write_outputs(out, &checkpoint, &log, &summary)?;
    Ok(Stage2Outcome {
        checkpoint,
        hash,
        log,
        summary,
        params,
    })
}
