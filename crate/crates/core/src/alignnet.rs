//! The trainable bridge from the student's hidden-state stack to the
//! teacher's condition space: fuse the per-layer features into one sequence,
//! then project it to `(y, y_p)` with separate heads.

use diffcore::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{HiddenStateStack, TeacherCondition};
use crate::error::{Error, Result};
use crate::nn::masked_mean;
use crate::params::{apply_linear, init_linear, init_zero_linear, Bound, ParamStore};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Last layer only.
    A1,
    /// Mean of a fixed layer subset (default: first and last two).
    #[serde(rename = "A3_mean")]
    A3Mean,
    /// Softmax-normalized learned weight per selected layer.
    #[serde(rename = "ADA")]
    Ada,
    /// Convolution with the layers as input channels.
    #[serde(rename = "CNN")]
    Cnn,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::A1, Strategy::A3Mean, Strategy::Ada, Strategy::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::A1 => "A1",
            Strategy::A3Mean => "A3_mean",
            Strategy::Ada => "ADA",
            Strategy::Cnn => "CNN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Two layers with SiLU; the output layer starts at zero.
    Mlp,
    /// One affine map, zero-initialized.
    Linear,
    /// Pass-through; needs matching widths.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignNetConfig {
    pub strategy: Strategy,
    /// Layers used by `A3_mean` and `ADA`; `None` means the strategy default
    /// (`{0, m-2, m-1}` for `A3_mean`, every layer for `ADA`).
    pub layer_subset: Option<Vec<usize>>,
    pub kernel: usize,
    /// Sequence padding of the CNN fuse; defaults to `(kernel - 1) / 2`.
    pub padding: Option<usize>,
    pub hidden: usize,
    pub head: HeadKind,
    pub pooled_head: HeadKind,
    /// Extra residual MLP stack between fuse and heads.
    pub deep_mapper: bool,
    pub deep_layers: usize,
}

impl Default for AlignNetConfig {
    fn default() -> Self {
        AlignNetConfig {
            strategy: Strategy::Cnn,
            layer_subset: None,
            kernel: 3,
            padding: None,
            hidden: 64,
            head: HeadKind::Mlp,
            pooled_head: HeadKind::Mlp,
            deep_mapper: false,
            deep_layers: 2,
        }
    }
}

/// Widths AlignNet connects: `m` stacked layers of width `z` in, teacher
/// widths `d_c` / `d_p` out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignDims {
    pub m: usize,
    pub z: usize,
    pub d_c: usize,
    pub d_p: usize,
}

impl AlignNetConfig {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel.saturating_sub(1) / 2)
    }

    /// Layers mixed by the strategy, in order.
    pub fn layers(&self, m: usize) -> Result<Vec<usize>> {
        let layers = match (self.strategy, &self.layer_subset) {
            (Strategy::A1, _) => vec![m - 1],
            (Strategy::Cnn, _) => (0..m).collect(),
            (Strategy::A3Mean | Strategy::Ada, Some(s)) => s.clone(),
            (Strategy::A3Mean, None) => {
                let mut v = vec![0, m.saturating_sub(2), m - 1];
                v.dedup();
                v
            }
            (Strategy::Ada, None) => (0..m).collect(),
        };
        if layers.is_empty() {
            return Err(Error::Config("alignnet.layer_subset is empty".into()));
        }
        for (i, &l) in layers.iter().enumerate() {
            if l >= m {
                return Err(Error::Config(format!("alignnet.layer_subset entry {l} out of range for {m} layers")));
            }
            if layers[..i].contains(&l) {
                return Err(Error::Config(format!("alignnet.layer_subset repeats layer {l}")));
            }
        }
        Ok(layers)
    }

    pub fn validate(&self, dims: AlignDims) -> Result<()> {
        if dims.m == 0 {
            return Err(Error::Config("hidden-state stack has no layers".into()));
        }
        self.layers(dims.m)?;
        if self.strategy == Strategy::Cnn {
            let (k, p) = (self.kernel, self.padding());
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("alignnet.kernel must be odd, got {k}")));
            }
            if 2 * p + 1 != k {
                return Err(Error::Config(format!(
                    "alignnet.padding {p} does not preserve sequence length for kernel {k}"
                )));
            }
        }
        if self.hidden == 0 {
            return Err(Error::Config("alignnet.hidden must be positive".into()));
        }
        if self.deep_mapper && self.deep_layers == 0 {
            return Err(Error::Config("alignnet.deep_layers must be positive when deep_mapper is set".into()));
        }
        if self.head == HeadKind::Identity && dims.z != dims.d_c {
            return Err(Error::Config(format!("identity head needs z == d_c ({} vs {})", dims.z, dims.d_c)));
        }
        if self.pooled_head == HeadKind::Identity && dims.z != dims.d_p {
            return Err(Error::Config(format!("identity pooled head needs z == d_p ({} vs {})", dims.z, dims.d_p)));
        }
        Ok(())
    }
}

/// Student condition in the teacher's widths.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedCondition<T> {
    pub y: Tensor<T>,
    pub y_p: Tensor<T>,
}

impl<T: Scalar> AlignedCondition<T> {
    /// The generator reads values only; this view feeds it.
    pub fn as_condition(&self) -> TeacherCondition<T> {
        TeacherCondition {
            c: self.y.clone(),
            c_p: self.y_p.clone(),
        }
    }
}

fn init_head<R: rand::Rng>(store: &mut ParamStore<f64>, name: &str, kind: HeadKind, z: usize, hidden: usize, out: usize, rng: &mut R) {
    match kind {
        HeadKind::Mlp => {
            init_linear(store, &format!("{name}.fc1"), z, hidden, 1.0, true, rng);
            init_zero_linear(store, &format!("{name}.fc2"), hidden, out);
        }
        HeadKind::Linear => init_zero_linear(store, &format!("{name}.lin"), z, out),
        HeadKind::Identity => {}
    }
}

/// Deterministic parameters for `cfg`. Both heads end in a zero layer, so the
/// untrained bridge emits the zero condition.
pub fn init_alignnet(cfg: &AlignNetConfig, dims: AlignDims, seed: u64) -> Result<ParamStore<f64>> {
    cfg.validate(dims)?;
    let mut rng = seed::rng(seed, "alignnet", 0);
    let mut store = ParamStore::new();
    match cfg.strategy {
        Strategy::Ada => {
            let n = cfg.layers(dims.m)?.len();
            store.insert("fuse.ada", Tensor::zeros(&[n]));
        }
        Strategy::Cnn => {
            // Starts as the plain layer mean at each position.
            let mut kernel = Tensor::zeros(&[dims.m, cfg.kernel]);
            for l in 0..dims.m {
                kernel.data_mut()[l * cfg.kernel + cfg.padding()] = 1.0 / dims.m as f64;
            }
            store.insert("fuse.cnn", kernel);
        }
        Strategy::A1 | Strategy::A3Mean => {}
    }
    if cfg.deep_mapper {
        for i in 0..cfg.deep_layers {
            init_linear(&mut store, &format!("deep{i}.fc1"), dims.z, 2 * dims.z, 1.0, true, &mut rng);
            init_zero_linear(&mut store, &format!("deep{i}.fc2"), 2 * dims.z, dims.z);
        }
    }
    init_head(&mut store, "head_y", cfg.head, dims.z, cfg.hidden, dims.d_c, &mut rng);
    init_head(&mut store, "head_p", cfg.pooled_head, dims.z, cfg.hidden, dims.d_p, &mut rng);
    Ok(store)
}

/// Closed-form parameter count of [`init_alignnet`].
pub fn param_count(cfg: &AlignNetConfig, dims: AlignDims) -> Result<usize> {
    let head = |kind: HeadKind, out: usize| match kind {
        HeadKind::Mlp => dims.z * cfg.hidden + cfg.hidden + cfg.hidden * out + out,
        HeadKind::Linear => dims.z * out + out,
        HeadKind::Identity => 0,
    };
    let fuse = match cfg.strategy {
        Strategy::Ada => cfg.layers(dims.m)?.len(),
        Strategy::Cnn => dims.m * cfg.kernel,
        _ => 0,
    };
    let deep = if cfg.deep_mapper {
        cfg.deep_layers * (dims.z * 2 * dims.z + 2 * dims.z + 2 * dims.z * dims.z + dims.z)
    } else {
        0
    };
    Ok(fuse + deep + head(cfg.head, dims.d_c) + head(cfg.pooled_head, dims.d_p))
}

fn layer<T: Scalar>(tape: &mut Tape<T>, h: Var, l: usize) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let one = tape.slice(h, 1, l, 1)?;
    Ok(tape.reshape(one, &[s[0], s[2], s[3]])?)
}

/// `h` `[b, m, s, z]` → `[b, s, z]`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, cfg: &AlignNetConfig, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 {
        return Err(Error::Usage(format!("fuse expects [b, m, s, z], got {s:?}")));
    }
    let layers = cfg.layers(s[1])?;
    match cfg.strategy {
        Strategy::A1 => layer(tape, h, layers[0]),
        Strategy::A3Mean => {
            let mut acc = layer(tape, h, layers[0])?;
            for &l in &layers[1..] {
                let x = layer(tape, h, l)?;
                acc = tape.add(acc, x)?;
            }
            Ok(tape.mul_scalar(acc, T::one() / T::of(layers.len() as f64)))
        }
        Strategy::Ada => {
            let logits = bound.var("fuse.ada")?;
            if tape.shape(logits) != [layers.len()] {
                return Err(Error::Config("ADA weight count does not match the selected layers".into()));
            }
            let w = tape.softmax(logits, 0)?;
            let mut acc = None;
            for (i, &l) in layers.iter().enumerate() {
                let wi = tape.slice(w, 0, i, 1)?;
                let x = layer(tape, h, l)?;
                let term = tape.mul(x, wi)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("at least one layer"))
        }
        Strategy::Cnn => {
            let kernel = bound.var("fuse.cnn")?;
            let out = tape.conv_layers(h, kernel, cfg.padding())?;
            Ok(tape.reshape(out, &[s[0], s[2], s[3]])?)
        }
    }
}

fn apply_head<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, kind: HeadKind, x: Var) -> Result<Var> {
    match kind {
        HeadKind::Mlp => {
            let h = apply_linear(tape, bound, &format!("{name}.fc1"), x)?;
            let h = tape.silu(h);
            apply_linear(tape, bound, &format!("{name}.fc2"), h)
        }
        HeadKind::Linear => apply_linear(tape, bound, &format!("{name}.lin"), x),
        HeadKind::Identity => Ok(x),
    }
}

/// Fused `[b, s, z]` → `(y [b, s, d_c], y_p [b, d_p])`. The pooled head
/// reads the mean over valid positions of `mask` `[b, s]`.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &AlignNetConfig,
    fused: Var,
    mask: &Tensor<T>,
) -> Result<(Var, Var)> {
    let mut x = fused;
    if cfg.deep_mapper {
        for i in 0..cfg.deep_layers {
            let h = apply_linear(tape, bound, &format!("deep{i}.fc1"), x)?;
            let h = tape.silu(h);
            let h = apply_linear(tape, bound, &format!("deep{i}.fc2"), h)?;
            x = tape.add(x, h)?;
        }
    }
    let y = apply_head(tape, bound, "head_y", cfg.head, x)?;
    let pooled = masked_mean(tape, x, mask)?;
    let y_p = apply_head(tape, bound, "head_p", cfg.pooled_head, pooled)?;
    Ok((y, y_p))
}

/// Fuse and project a stack already recorded on the tape.
pub fn forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &AlignNetConfig,
    h: Var,
    mask: &Tensor<T>,
) -> Result<(Var, Var)> {
    let fused = fuse(tape, bound, cfg, h)?;
    project(tape, bound, cfg, fused, mask)
}

/// Frozen evaluation of the bridge.
pub fn align<T: Scalar, P: Scalar>(params: &ParamStore<P>, cfg: &AlignNetConfig, stack: &HiddenStateStack<T>) -> Result<AlignedCondition<T>> {
    let mut tape = Tape::<T>::new();
    let bound = params.cast::<T>().bind(&mut tape, false);
    let h = tape.constant(stack.h.clone());
    let (y, y_p) = forward_on(&mut tape, &bound, cfg, h, &stack.mask)?;
    Ok(AlignedCondition {
        y: tape.value(y).clone(),
        y_p: tape.value(y_p).clone(),
    })
}

/// Bridge parameters that reproduce the teacher exactly when the stack is
/// `concat(c, pooled hidden)` along the feature axis with a single layer:
/// `y` selects the first `d_c` features, `y_p` applies the teacher's pooled
/// projection to the remaining ones.
pub fn identity_wiring(cfg: &AlignNetConfig, d_c: usize, pool_w: &Tensor<f64>, pool_b: &Tensor<f64>) -> Result<ParamStore<f64>> {
    if cfg.strategy != Strategy::A1 || cfg.head != HeadKind::Linear || cfg.pooled_head != HeadKind::Linear || cfg.deep_mapper {
        return Err(Error::Config("identity wiring needs A1 with linear heads".into()));
    }
    let (pw, d_p) = (pool_w.shape()[0], pool_w.shape()[1]);
    let z = d_c + pw;
    let mut select = vec![0.0; z * d_c];
    for i in 0..d_c {
        select[i * d_c + i] = 1.0;
    }
    let mut pooled = vec![0.0; z * d_p];
    pooled[d_c * d_p..].copy_from_slice(&pool_w.to_f64_vec());
    let mut store = ParamStore::new();
    store.insert("head_y.lin.w", Tensor::from_f64(&[z, d_c], &select)?);
    store.insert("head_y.lin.b", Tensor::zeros(&[d_c]));
    store.insert("head_p.lin.w", Tensor::from_f64(&[z, d_p], &pooled)?);
    store.insert("head_p.lin.b", pool_b.clone());
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        let dims = AlignDims { m: 6, z: 48, d_c: 64, d_p: 32 };
        let cfg = AlignNetConfig::default();
        assert_eq!(param_count(&cfg, dims).unwrap(), 18 + 7296 + 5216);
        assert_eq!(init_alignnet(&cfg, dims, 0).unwrap().num_elements(), 12530);
    }

    #[test]
    fn bad_subset_is_config_error() {
        let cfg = AlignNetConfig {
            strategy: Strategy::A3Mean,
            layer_subset: Some(vec![0, 9]),
            ..Default::default()
        };
        let dims = AlignDims { m: 6, z: 4, d_c: 4, d_p: 4 };
        assert!(init_alignnet(&cfg, dims, 0).unwrap_err().is_config());
    }
}
