//! Evaluation metrics: performance ratio, SSIM, cosine agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A metric's name and the range its raw values are normalized by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl MetricSpec {
    pub fn new(name: &str, lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::Config(format!("metric {name}: range must have hi > lo")));
        }
        Ok(MetricSpec {
            name: name.into(),
            lo,
            hi,
        })
    }

    /// Maps a raw value into `[0, 1]`; the flag reports clamping.
    pub fn normalize(&self, v: f64) -> (f64, bool) {
        let n = (v - self.lo) / (self.hi - self.lo);
        let c = n.clamp(0.0, 1.0);
        (c, c != n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    /// Mean of normalized student / normalized teacher, in percent.
    pub pr: f64,
    pub used: Vec<String>,
    pub warnings: Vec<String>,
}

/// Performance ratio of `student` to `teacher` over `specs`.
pub fn pr_metric(student: &[f64], teacher: &[f64], specs: &[MetricSpec]) -> Result<PrReport> {
    if student.len() != teacher.len() || student.len() != specs.len() {
        return Err(Error::Usage("pr_metric needs one student and one teacher value per spec".into()));
    }
    let mut ratios = Vec::new();
    let mut used = Vec::new();
    let mut warnings = Vec::new();
    for ((&s, &t), spec) in student.iter().zip(teacher).zip(specs) {
        let (ns, cs) = spec.normalize(s);
        let (nt, ct) = spec.normalize(t);
        if cs || ct {
            warnings.push(format!("{}: value outside [{}, {}] clamped", spec.name, spec.lo, spec.hi));
        }
        if nt == 0.0 {
            warnings.push(format!("{}: teacher normalizes to 0, skipped", spec.name));
            continue;
        }
        ratios.push(ns / nt);
        used.push(spec.name.clone());
    }
    if ratios.is_empty() {
        return Err(Error::Usage("pr_metric: every metric was skipped".into()));
    }
    let pr = 100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(PrReport { pr, used, warnings })
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized 7×7 Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / total);
        }
    }
    w
}

/// Mean SSIM of two `[h, w, c]` images with dynamic range `range`, over
/// every fully-contained window position and channel.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 3], range: f64) -> Result<f64> {
    let [h, w, c] = shape;
    if a.len() != h * w * c || b.len() != a.len() {
        return Err(Error::Usage(format!(
            "ssim: images of {} and {} values do not match shape {shape:?}",
            a.len(),
            b.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage("ssim: images smaller than the 7x7 window".into()));
    }
    if !(range > 0.0) {
        return Err(Error::Usage("ssim: dynamic range must be positive".into()));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[dy * SSIM_WINDOW + dx];
                        let i = ((y + dy) * w + x + dx) * c + ch;
                        let (va, vb) = (a[i], b[i]);
                        ma += g * va;
                        mb += g * vb;
                        saa += g * (va * va);
                        sbb += g * (vb * vb);
                        sab += g * (va * vb);
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                // Written symmetrically in (a, b) so identical inputs give
                // identical numerator and denominator.
                let num = (ma * mb + mb * ma + c1) * (cov + cov + c2);
                let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `a·b / (|a| |b|)`, 0 when either norm vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Exponential moving average of a loss curve, seeded with its first value.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => (1.0 - alpha) * a + alpha * v,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
