//! Stage 1: train the bridge so the frozen generator, driven by the student
//! encoder, reproduces the teacher's per-block captures.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use diffcore::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignnet::{self, init_alignnet};
use crate::distill::layer_distill_loss;
use crate::encoders::{HiddenStateStack, StudentEncoder, TeacherCondition, TeacherEncoders, TokenStream};
use crate::error::{Error, Result};
use crate::mmdit::{Control, Mmdit, TapValues, Weights};
use crate::params::ParamStore;
use crate::seed;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::{PipelineMode, RunConfig, TimestepMode};
use crate::trainer::metrics::{cosine, ema, mse, ssim};
use crate::trainer::optim::AdamW;

/// The frozen world of one configuration: both encoder families and the
/// generator.
#[derive(Clone, Debug)]
pub struct Lab {
    pub cfg: RunConfig,
    pub teacher: TeacherEncoders,
    pub student: StudentEncoder,
    pub model: Mmdit,
}

impl Lab {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = TeacherEncoders::new(&cfg.encoders, cfg.model_seed);
        let student = StudentEncoder::new(&cfg.encoders, cfg.model_seed, &teacher);
        let model = Mmdit::new(&cfg.mmdit, cfg.encoders.d_c, cfg.encoders.d_p, cfg.model_seed)?;
        Ok(Lab {
            cfg: cfg.clone(),
            teacher,
            student,
            model,
        })
    }
}

// ------------------------------------------------------------------ prompts

const ADJECTIVES: [&str; 12] = [
    "small", "large", "shiny", "old", "fluffy", "wooden", "glass", "bright", "dark", "tiny", "striped", "round",
];
const COLOR_WORDS: [&str; 10] = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black", "pink", "gray"];
const NOUNS: [&str; 16] = [
    "cat", "dog", "house", "tree", "car", "boat", "bird", "flower", "chair", "lamp", "mountain", "river", "robot",
    "cup", "horse", "castle",
];
const PLACES: [&str; 8] = [
    "on a table", "in a garden", "near the sea", "under the moon", "in the snow", "on a hill", "in a city", "at night",
];
const STYLES: [&str; 6] = ["photo", "painting", "sketch", "watercolor", "render", "drawing"];

/// Seeded synthetic caption: "a {style} of a {adj} {color} {noun} {place}",
/// with optional parts dropped or a second object added.
pub fn synthetic_prompt(seed: u64, label: &str, index: u64) -> String {
    let mut rng = seed::rng(seed, label, index);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, words: &[&'static str]| words[rng.random_range(0..words.len())];
    let mut parts = Vec::new();
    if rng.random_bool(0.5) {
        parts.push(format!("a {} of", pick(&mut rng, &STYLES)));
    }
    let object = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut o = String::from("a");
        if rng.random_bool(0.6) {
            o.push(' ');
            o.push_str(pick(rng, &ADJECTIVES));
        }
        o.push(' ');
        o.push_str(pick(rng, &COLOR_WORDS));
        o.push(' ');
        o.push_str(pick(rng, &NOUNS));
        o
    };
    parts.push(object(&mut rng));
    if rng.random_bool(0.4) {
        parts.push(format!("and {}", object(&mut rng)));
    }
    if rng.random_bool(0.7) {
        parts.push(pick(&mut rng, &PLACES).to_string());
    }
    parts.join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

impl PromptSet {
    /// Reads the configured corpus file (training prompts first, held-out
    /// prompts next) or synthesizes disjoint seeded sets.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (nt, nh) = (cfg.data.train_prompts, cfg.data.heldout_prompts);
        match &cfg.data.prompts {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("prompt corpus {}: {e}", path.display())))?;
                let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
                if lines.len() < nt + nh {
                    return Err(Error::Usage(format!(
                        "prompt corpus has {} prompts, {} needed",
                        lines.len(),
                        nt + nh
                    )));
                }
                Ok(PromptSet {
                    train: lines[..nt].to_vec(),
                    heldout: lines[nt..nt + nh].to_vec(),
                })
            }
            None => Ok(PromptSet {
                train: (0..nt as u64).map(|i| synthetic_prompt(cfg.model_seed, "prompt", i)).collect(),
                heldout: (0..nh as u64).map(|i| synthetic_prompt(cfg.model_seed, "heldout-prompt", i)).collect(),
            }),
        }
    }
}

// ------------------------------------------------------------------ encoding cache

/// Frozen encodings of a prompt list, one batch-1 entry per prompt.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub prompts: Vec<String>,
    pub teacher: Vec<TeacherCondition<f32>>,
    pub student: Vec<HiddenStateStack<f32>>,
}

fn unbatch<T: diffcore::Scalar>(t: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let one = t.index0(i);
    let mut shape = vec![1];
    shape.extend_from_slice(one.shape());
    Ok(one.reshaped(&shape)?)
}

const ENCODE_CHUNK: usize = 32;

impl Encoded {
    /// Teacher conditions and student stacks of raw text prompts, both
    /// padded to the condition length so positions line up.
    pub fn new(lab: &Lab, prompts: &[String]) -> Result<Self> {
        let len = lab.cfg.encoders.cond_len;
        let mut teacher = Vec::with_capacity(prompts.len());
        let mut student = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(ENCODE_CHUNK) {
            let streams: Vec<TokenStream> = chunk
                .iter()
                .map(|p| TokenStream::text(lab.teacher.tokenizer(), p).truncated(len))
                .collect();
            let tc = lab.teacher.encode::<f32>(&streams)?;
            let st = lab.student.encode::<f32>(&streams, len)?;
            for i in 0..chunk.len() {
                teacher.push(TeacherCondition {
                    c: unbatch(&tc.c, i)?,
                    c_p: unbatch(&tc.c_p, i)?,
                });
                student.push(HiddenStateStack {
                    h: unbatch(&st.h, i)?,
                    mask: unbatch(&st.mask, i)?,
                });
            }
        }
        Ok(Encoded {
            prompts: prompts.to_vec(),
            teacher,
            student,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn teacher_batch(&self, idx: &[usize]) -> Result<TeacherCondition<f32>> {
        let parts: Vec<&TeacherCondition<f32>> = idx.iter().map(|&i| &self.teacher[i]).collect();
        TeacherCondition::stack(&parts)
    }

    pub fn student_batch(&self, idx: &[usize]) -> Result<HiddenStateStack<f32>> {
        let parts: Vec<&HiddenStateStack<f32>> = idx.iter().map(|&i| &self.student[i]).collect();
        HiddenStateStack::stack(&parts)
    }
}

// ------------------------------------------------------------------ steps

/// Everything random about one step, derived from `(run seed, step)` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub step: u64,
    pub batch_seed: u64,
    pub indices: Vec<usize>,
    pub t: Vec<f64>,
    pub noise: Tensor<f32>,
}

pub fn batch_seed(cfg: &RunConfig, step: u64) -> u64 {
    seed::derive(cfg.seed, "batch", step)
}

pub fn plan_batch(cfg: &RunConfig, model: &Mmdit, step: u64, pool: usize) -> BatchPlan {
    let bs = batch_seed(cfg, step);
    let mut rng = seed::rng(bs, "indices", 0);
    let indices = (0..cfg.batch_size).map(|_| rng.random_range(0..pool)).collect();
    let t = match cfg.timestep.mode {
        TimestepMode::Fixed => vec![1.0; cfg.batch_size],
        TimestepMode::Uniform => (0..cfg.batch_size).map(|_| rng.random_range(cfg.timestep.t_lo..=1.0)).collect(),
    };
    BatchPlan {
        step,
        batch_seed: bs,
        indices,
        t,
        noise: model.noise(cfg.batch_size, bs),
    }
}

/// Teacher-side result of one step.
#[derive(Clone, Debug)]
pub struct TeacherWork {
    pub plan: BatchPlan,
    pub latent: Tensor<f32>,
    pub taps: TapValues<f32>,
}

/// Noisy latent for the plan's timesteps (one teacher Euler step from the
/// noise when `t < 1`) and the teacher's captures on it.
pub fn teacher_job(lab: &Lab, data: &Encoded, plan: BatchPlan) -> Result<TeacherWork> {
    let cond = data.teacher_batch(&plan.indices)?;
    let latent = if plan.t.iter().all(|&t| t == 1.0) {
        plan.noise.clone()
    } else {
        let ones = vec![1.0; plan.t.len()];
        let v = lab.model.velocity(&plan.noise, &cond, &ones, None, None)?;
        let per = plan.noise.numel() / plan.t.len();
        let mut x = plan.noise.clone();
        for (i, (xi, vi)) in x.data_mut().iter_mut().zip(v.data()).enumerate() {
            *xi -= (1.0 - plan.t[i / per]) as f32 * vi;
        }
        x
    };
    let mut tape = Tape::<f32>::new();
    let base = lab.model.bind(&mut tape);
    let w = Weights::frozen(&base);
    let x = tape.constant(latent.clone());
    let c = tape.constant(cond.c);
    let c_p = tape.constant(cond.c_p);
    let out = lab.model.forward_on(&mut tape, &w, x, c, c_p, &plan.t, Control::default())?;
    let taps = out.taps(lab.cfg.tap).values(&tape);
    Ok(TeacherWork { plan, latent, taps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_per_block: Vec<f64>,
    pub lr: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

/// Names with gradients must be exactly the trainable set.
pub fn check_trainable_set<'a>(expected: impl Iterator<Item = &'a str>, got: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let expected: Vec<&str> = expected.collect();
    let got_names: Vec<&str> = got.keys().map(String::as_str).collect();
    if expected != got_names {
        return Err(Error::Usage(format!(
            "trainable set mismatch: expected {expected:?}, gradients for {got_names:?}"
        )));
    }
    Ok(())
}

/// One student forward/backward and optimizer update against prepared
/// teacher captures. Returns the loss and per-block losses before the update.
/// Non-finite values anywhere in the forward surface as
/// [`Error::NonFiniteLoss`].
pub fn student_step(
    lab: &Lab,
    data: &Encoded,
    params: &mut ParamStore<f32>,
    opt: &mut AdamW,
    work: &TeacherWork,
) -> Result<(f64, Vec<f64>)> {
    student_step_inner(lab, data, params, opt, work).map_err(|e| match e {
        Error::Diff(diffcore::DiffError::Numeric { .. }) => Error::NonFiniteLoss {
            step: work.plan.step,
            batch_seed: work.plan.batch_seed,
        },
        other => other,
    })
}

fn student_step_inner(
    lab: &Lab,
    data: &Encoded,
    params: &mut ParamStore<f32>,
    opt: &mut AdamW,
    work: &TeacherWork,
) -> Result<(f64, Vec<f64>)> {
    let cfg = &lab.cfg;
    let stack = data.student_batch(&work.plan.indices)?;
    let mut tape = Tape::<f32>::new();
    let trainable = params.bind(&mut tape, true);
    let h = tape.constant(stack.h);
    let (y, y_p) = alignnet::forward_on(&mut tape, &trainable, &cfg.alignnet, h, &stack.mask)?;
    let base = lab.model.bind(&mut tape);
    let w = Weights::frozen(&base);
    let x = tape.constant(work.latent.clone());
    let out = lab.model.forward_on(&mut tape, &w, x, y, y_p, &work.plan.t, Control::default())?;
    let student_taps = out.taps(cfg.tap);
    let teacher_taps = work.taps.bind(&mut tape);
    let (loss, per_block) = layer_distill_loss(&mut tape, &student_taps, &teacher_taps, &cfg.distill)?;
    let loss_value = tape.value(loss).item() as f64;
    let per_block: Vec<f64> = per_block.iter().map(|&v| tape.value(v).item() as f64).collect();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: work.plan.step,
            batch_seed: work.plan.batch_seed,
        });
    }
    let grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, var) in trainable.iter() {
        if let Some(g) = grads.get(var) {
            named.insert(name.to_string(), g.clone());
        }
    }
    check_trainable_set(params.names(), &named)?;
    opt.step(params, &named)?;
    Ok((loss_value, per_block))
}

// ------------------------------------------------------------------ loop

/// Result of a stage-1 run.
#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub checkpoint: Checkpoint,
    pub hash: String,
    pub log: Vec<StepRecord>,
    pub params: ParamStore<f32>,
}

impl AlignOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    pub fn smoothed(&self, alpha: f64) -> Vec<f64> {
        ema(&self.losses(), alpha)
    }
}

struct LogSink {
    file: Option<BufWriter<File>>,
}

impl LogSink {
    fn open(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
            }
            None => None,
        };
        Ok(LogSink { file })
    }

    fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Writes the batch that produced a non-finite loss next to the outputs.
fn dump_nan(out: Option<&Path>, data: &Encoded, cfg: &RunConfig, err: &Error) {
    let (Some(dir), Error::NonFiniteLoss { step, batch_seed: bs }) = (out, err) else { return };
    let plan_indices = {
        let mut rng = seed::rng(*bs, "indices", 0);
        (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect::<Vec<_>>()
    };
    let dump = serde_json::json!({
        "step": step,
        "batch_seed": bs,
        "prompts": plan_indices.iter().map(|&i| data.prompts[i].clone()).collect::<Vec<_>>(),
    });
    let _ = fs::write(dir.join("nan_dump.json"), dump.to_string());
}

pub fn init_params(cfg: &RunConfig) -> Result<ParamStore<f32>> {
    Ok(init_alignnet(&cfg.alignnet, cfg.align_dims(), cfg.seed)?.cast())
}

/// Runs `cfg.steps` alignment steps from `params`, sequentially or with the
/// teacher forward of step `i + 1` overlapping the student update of step
/// `i`. Both modes call the same step functions in the same order on the
/// same values, so their results agree bitwise.
pub fn run_align(lab: &Lab, data: &Encoded, params: &mut ParamStore<f32>, out: Option<&Path>) -> Result<Vec<StepRecord>> {
    let cfg = &lab.cfg;
    let steps = cfg.steps as u64;
    let mut opt = AdamW::new(&cfg.optim);
    let mut sink = LogSink::open(out)?;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut on_work = |work: TeacherWork, started: Instant, params: &mut ParamStore<f32>| -> Result<()> {
        let (loss, per_block) = student_step(lab, data, params, &mut opt, &work)?;
        let rec = StepRecord {
            step: work.plan.step,
            loss,
            loss_per_block: per_block,
            lr: opt.lr(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: work.plan.batch_seed,
        };
        sink.write(&rec)?;
        log.push(rec);
        Ok(())
    };
    let result = match cfg.pipeline {
        PipelineMode::Sequential => (|| {
            for step in 0..steps {
                let started = Instant::now();
                let work = teacher_job(lab, data, plan_batch(cfg, &lab.model, step, data.len()))?;
                on_work(work, started, params)?;
            }
            Ok(())
        })(),
        PipelineMode::Overlapped => std::thread::scope(|s| {
            let (tx, rx) = sync_channel::<Result<TeacherWork>>(2);
            s.spawn(move || {
                for step in 0..steps {
                    let work = teacher_job(lab, data, plan_batch(cfg, &lab.model, step, data.len()));
                    let failed = work.is_err();
                    if tx.send(work).is_err() || failed {
                        break;
                    }
                }
            });
            for step in 0..steps {
                let started = Instant::now();
                let work = rx
                    .recv()
                    .map_err(|_| Error::Usage("teacher worker stopped early".into()))??;
                if work.plan.step != step {
                    return Err(Error::Usage(format!("hand-off out of order: got step {} at {step}", work.plan.step)));
                }
                on_work(work, started, params)?;
            }
            Ok(())
        }),
    };
    if let Err(e) = &result {
        dump_nan(out, data, cfg, e);
    }
    result?;
    sink.finish()?;
    Ok(log)
}

pub fn align_checkpoint(cfg: &RunConfig, params: &ParamStore<f32>) -> Checkpoint {
    let mut arrays = ParamStore::new();
    arrays.extend_prefixed("alignnet.", params);
    Checkpoint {
        config: cfg.clone(),
        stage: "align".into(),
        step: cfg.steps as u64,
        seed_state: batch_seed(cfg, cfg.steps as u64),
        arrays,
    }
}

/// Stage-1 training end to end: encode the corpus, train, and (when `out`
/// is given) write `metrics.jsonl` and `checkpoint.x2i` there.
pub fn train_align(cfg: &RunConfig, out: Option<&Path>) -> Result<AlignOutcome> {
    let lab = Lab::new(cfg)?;
    let prompts = PromptSet::load(cfg)?;
    let data = Encoded::new(&lab, &prompts.train)?;
    train_align_with(&lab, &data, out)
}

/// [`train_align`] over an already built lab and encoded corpus.
pub fn train_align_with(lab: &Lab, data: &Encoded, out: Option<&Path>) -> Result<AlignOutcome> {
    let mut params = init_params(&lab.cfg)?;
    let log = run_align(lab, data, &mut params, out)?;
    let checkpoint = align_checkpoint(&lab.cfg, &params);
    let hash = match out {
        Some(dir) => checkpoint.save(&dir.join("checkpoint.x2i"))?,
        None => checkpoint.hash()?,
    };
    Ok(AlignOutcome {
        checkpoint,
        hash,
        log,
        params,
    })
}

// ------------------------------------------------------------------ held-out evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub prompts: usize,
    /// Mean cosine between student and teacher final latents.
    pub cosine: f64,
    /// Mean squared difference of the final latents.
    pub mse: f64,
    /// Mean SSIM of student against teacher final latents, with the
    /// teacher's value range as dynamic range.
    pub ssim: f64,
}

/// Student condition of a batch through `params`.
pub fn student_condition(lab: &Lab, params: &ParamStore<f32>, stack: &HiddenStateStack<f32>) -> Result<TeacherCondition<f32>> {
    Ok(alignnet::align(params, &lab.cfg.alignnet, stack)?.as_condition())
}

/// Samples every held-out prompt from the same seeded noise under the
/// teacher condition and under the student condition and compares the
/// final latents.
pub fn evaluate_heldout(lab: &Lab, data: &Encoded, params: &ParamStore<f32>) -> Result<HeldoutReport> {
    let cfg = &lab.cfg;
    let shape = [cfg.mmdit.latent_size, cfg.mmdit.latent_size, cfg.mmdit.latent_channels];
    let per = shape.iter().product::<usize>();
    let (mut cos, mut err, mut sim) = (0.0, 0.0, 0.0);
    let all: Vec<usize> = (0..data.len()).collect();
    for (chunk_id, idx) in all.chunks(16).enumerate() {
        let seed = seed::derive(cfg.seed, "heldout-noise", chunk_id as u64);
        let tc = data.teacher_batch(idx)?;
        let sc = student_condition(lab, params, &data.student_batch(idx)?)?;
        let ts = lab.model.sample(&tc, cfg.eval.sample_steps, seed, None, None)?.to_f64_vec();
        let ss = lab.model.sample(&sc, cfg.eval.sample_steps, seed, None, None)?.to_f64_vec();
        for i in 0..idx.len() {
            let (a, b) = (&ss[i * per..(i + 1) * per], &ts[i * per..(i + 1) * per]);
            cos += cosine(a, b);
            err += mse(a, b);
            let lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sim += ssim(a, b, shape, (hi - lo).max(1e-6))?;
        }
    }
    let n = data.len() as f64;
    Ok(HeldoutReport {
        prompts: data.len(),
        cosine: cos / n,
        mse: err / n,
        ssim: sim / n,
    })
}
