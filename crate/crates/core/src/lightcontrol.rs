//! Parallel residual stack that reads a reference raster and the pooled
//! condition and emits one additive feature map per generator block.

use std::fs;
use std::path::Path;

use diffcore::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{patchify, MmditConfig};
use crate::nn::norm;
use crate::params::{apply_linear, init_linear, init_zero_linear, Bound, ParamStore};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightControlConfig {
    /// Residual block count; must equal the number of blocks fed. Defaults
    /// to the generator's depth.
    pub blocks: Option<usize>,
    pub channels: usize,
    pub raster: usize,
    pub patch: usize,
    /// Also feed the single-stream blocks.
    pub inject_single: bool,
}

impl Default for LightControlConfig {
    fn default() -> Self {
        LightControlConfig {
            blocks: None,
            channels: 32,
            raster: 16,
            patch: 4,
            inject_single: false,
        }
    }
}

/// Resolved shape of a LightControl stack attached to one generator.
#[derive(Clone, Debug, PartialEq)]
pub struct LightControlSpec {
    pub cfg: LightControlConfig,
    pub blocks: usize,
    pub double: usize,
    pub grid: usize,
    pub width: usize,
}

impl LightControlConfig {
    pub fn resolve(&self, model: &MmditConfig) -> Result<LightControlSpec> {
        let needed = model.double_blocks + if self.inject_single { model.single_blocks } else { 0 };
        let blocks = self.blocks.unwrap_or(needed);
        if blocks != needed {
            return Err(Error::Config(format!(
                "lightcontrol.blocks is {blocks} but the generator has {needed} blocks to feed"
            )));
        }
        if self.channels == 0 || self.patch == 0 || !self.raster.is_multiple_of(self.patch) {
            return Err(Error::Config("lightcontrol raster must divide by patch; channels > 0".into()));
        }
        let grid = self.raster / self.patch;
        if grid * grid != model.tokens() {
            return Err(Error::Config(format!(
                "lightcontrol grid {grid}x{grid} does not match the generator's {} tokens",
                model.tokens()
            )));
        }
        Ok(LightControlSpec {
            cfg: self.clone(),
            blocks,
            double: model.double_blocks,
            grid,
            width: model.width,
        })
    }
}

impl LightControlSpec {
    /// Reference raster shape for a batch.
    pub fn reference_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.cfg.raster, self.cfg.raster, 3]
    }
}

/// Deterministic parameters. Output projections start at zero, so a fresh
/// stack injects nothing.
pub fn init_lightcontrol(spec: &LightControlSpec, d_p: usize, seed: u64) -> ParamStore<f64> {
    let mut rng = seed::rng(seed, "lightcontrol", 0);
    let ch = spec.cfg.channels;
    let mut p = ParamStore::new();
    init_linear(&mut p, "stem", spec.cfg.patch * spec.cfg.patch * 3, ch, 1.0, true, &mut rng);
    init_linear(&mut p, "cond", d_p, ch, 1.0, true, &mut rng);
    for l in 0..spec.blocks {
        init_linear(&mut p, &format!("res{l}.conv1"), 9 * ch, ch, 1.0, true, &mut rng);
        init_linear(&mut p, &format!("res{l}.conv2"), 9 * ch, ch, 0.5, true, &mut rng);
        init_zero_linear(&mut p, &format!("out{l}"), ch, spec.width);
    }
    p
}

/// Row indices of the 3×3 neighbourhood (zero padding) of every cell of a
/// `b` batch of `g × g` grids, flattened row-major.
pub fn im2col_index(b: usize, g: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(b * g * g * 9);
    for n in 0..b {
        for y in 0..g as isize {
            for x in 0..g as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < g as isize && xx < g as isize;
                        idx.push(inside.then(|| n * g * g + (yy as usize) * g + xx as usize));
                    }
                }
            }
        }
    }
    idx
}

/// 3×3 same-padded convolution over a `[b, g·g, ch]` token grid.
pub fn conv3x3<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, h: Var, g: usize) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let (b, ch) = (s[0], s[2]);
    let cols = tape.gather_rows(h, &im2col_index(b, g))?;
    let cols = tape.reshape(cols, &[b, g * g, 9 * ch])?;
    apply_linear(tape, bound, name, cols)
}

/// `[y_c^1 … y_c^L]`, each `[b, tokens, width]`. `c_i` is `[b, R, R, 3]`,
/// `c_p` `[b, d_p]`.
pub fn lightcontrol_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    spec: &LightControlSpec,
    c_i: Var,
    c_p: Var,
) -> Result<Vec<Var>> {
    let b = tape.shape(c_i)[0];
    if tape.shape(c_i) != spec.reference_shape(b) {
        return Err(Error::Config(format!(
            "reference image shape {:?} does not match {:?}",
            tape.shape(c_i),
            spec.reference_shape(b)
        )));
    }
    if tape.shape(c_p).len() != 2 || tape.shape(c_p)[0] != b {
        return Err(Error::Config(format!("pooled condition shape {:?} does not match batch {b}", tape.shape(c_p))));
    }
    let tokens = patchify(tape, c_i, spec.cfg.patch)?;
    let h = apply_linear(tape, bound, "stem", tokens)?;
    let cp = apply_linear(tape, bound, "cond", c_p)?;
    let cp = tape.reshape(cp, &[b, 1, spec.cfg.channels])?;
    let mut h = tape.add(h, cp)?;
    let mut outs = Vec::with_capacity(spec.blocks);
    for l in 0..spec.blocks {
        let r = conv3x3(tape, bound, &format!("res{l}.conv1"), h, spec.grid)?;
        let r = norm(tape, r)?;
        let r = tape.silu(r);
        let r = conv3x3(tape, bound, &format!("res{l}.conv2"), r, spec.grid)?;
        h = tape.add(h, r)?;
        outs.push(apply_linear(tape, bound, &format!("out{l}"), h)?);
    }
    Ok(outs)
}

/// Splits stack outputs into (double-stream, single-stream) injections.
pub fn split_outputs<X: Clone>(spec: &LightControlSpec, outs: &[X]) -> (Vec<X>, Vec<X>) {
    (outs[..spec.double].to_vec(), outs[spec.double..].to_vec())
}

// ------------------------------------------------------------------ pair data

/// Synthetic stylization pairs: an edge map of a shape (reference raster)
/// and the filled shape in latent layout (target).
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub prompts: Vec<String>,
    pub references: Vec<Tensor<f64>>,
    pub targets: Vec<Tensor<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSidecar {
    count: usize,
    dtype: String,
    reference_shape: Vec<usize>,
    target_shape: Vec<usize>,
    prompts: Vec<String>,
}

const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [1.0, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.2]),
    ("blue", [0.15, 0.2, 1.0]),
    ("yellow", [1.0, 0.9, 0.1]),
];

impl PairDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `count` seeded pairs for a `raster`² reference and a generator latent.
    pub fn synthesize(count: usize, raster: usize, model: &MmditConfig, seed: u64) -> Result<Self> {
        let size = model.latent_size;
        if !raster.is_multiple_of(size) || model.latent_channels < 4 {
            return Err(Error::Config("pair raster must be a multiple of the latent size; latent needs 4 channels".into()));
        }
        let f = raster / size;
        let mut out = PairDataset {
            prompts: Vec::with_capacity(count),
            references: Vec::with_capacity(count),
            targets: Vec::with_capacity(count),
        };
        for i in 0..count {
            let mut rng = seed::rng(seed, "pairs", i as u64);
            let (cname, color) = COLORS[rng.random_range(0..COLORS.len())];
            let circle = rng.random_bool(0.5);
            let lo = raster / 8;
            let (y0, x0) = (rng.random_range(lo..raster / 2), rng.random_range(lo..raster / 2));
            let (hh, ww) = (rng.random_range(raster / 4..raster / 2), rng.random_range(raster / 4..raster / 2));
            let inside = |y: usize, x: usize| -> bool {
                if circle {
                    let (cy, cx) = (y0 as f64 + hh as f64 / 2.0, x0 as f64 + ww as f64 / 2.0);
                    let (ry, rx) = (hh as f64 / 2.0, ww as f64 / 2.0);
                    let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    dy * dy + dx * dx <= 1.0
                } else {
                    y >= y0 && y < y0 + hh && x >= x0 && x < x0 + ww
                }
            };
            let mut fill = vec![false; raster * raster];
            for y in 0..raster {
                for x in 0..raster {
                    fill[y * raster + x] = inside(y, x);
                }
            }
            let mut reference = vec![0.0; raster * raster * 3];
            for y in 0..raster {
                for x in 0..raster {
                    if !fill[y * raster + x] {
                        continue;
                    }
                    let edge = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        yy < 0 || xx < 0 || yy >= raster as isize || xx >= raster as isize || !fill[yy as usize * raster + xx as usize]
                    });
                    if edge {
                        reference[(y * raster + x) * 3..(y * raster + x) * 3 + 3].copy_from_slice(&color);
                    }
                }
            }
            let ch = model.latent_channels;
            let mut target = vec![-1.0; size * size * ch];
            for y in 0..size {
                for x in 0..size {
                    let mut cover = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            if fill[(y * f + dy) * raster + x * f + dx] {
                                cover += 1.0;
                            }
                        }
                    }
                    let cover = cover / (f * f) as f64;
                    let at = (y * size + x) * ch;
                    for c in 0..3 {
                        target[at + c] = 2.0 * cover * color[c] - 1.0;
                    }
                    target[at + 3] = 2.0 * cover - 1.0;
                }
            }
            let shape = if circle { "circle" } else { "square" };
            out.prompts.push(format!("a filled {cname} {shape}"));
            out.references.push(Tensor::from_f64(&[raster, raster, 3], &reference)?);
            out.targets.push(Tensor::from_f64(&[size, size, ch], &target)?);
        }
        Ok(out)
    }

    /// Writes `{stem}.bin` (references then targets, little-endian f64) and
    /// `{stem}.json` describing them.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        let first = |v: &[Tensor<f64>]| v.first().map(|t| t.shape().to_vec()).unwrap_or_default();
        let sidecar = PairSidecar {
            count: self.len(),
            dtype: "f64".into(),
            reference_shape: first(&self.references),
            target_shape: first(&self.targets),
            prompts: self.prompts.clone(),
        };
        let mut bytes = Vec::new();
        for t in self.references.iter().chain(&self.targets) {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let sidecar: PairSidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if sidecar.dtype != "f64" || sidecar.prompts.len() != sidecar.count {
            return Err(Error::Usage("pair sidecar is inconsistent".into()));
        }
        let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
        let (rn, tn) = (
            sidecar.reference_shape.iter().product::<usize>(),
            sidecar.target_shape.iter().product::<usize>(),
        );
        if bytes.len() != 8 * sidecar.count * (rn + tn) {
            return Err(Error::Usage("pair data length does not match its sidecar".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut references = Vec::with_capacity(sidecar.count);
        let mut targets = Vec::with_capacity(sidecar.count);
        for i in 0..sidecar.count {
            references.push(Tensor::from_f64(&sidecar.reference_shape, &values[i * rn..(i + 1) * rn])?);
        }
        let base = sidecar.count * rn;
        for i in 0..sidecar.count {
            targets.push(Tensor::from_f64(&sidecar.target_shape, &values[base + i * tn..base + (i + 1) * tn])?);
        }
        Ok(PairDataset {
            prompts: sidecar.prompts,
            references,
            targets,
        })
    }
}
