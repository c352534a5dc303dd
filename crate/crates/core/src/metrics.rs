//! Fidelity and distribution metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::rng::{self, Purpose};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metric", &a.shape(), &b.shape()));
    }
    Ok(())
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.pixels.len() as f64)
}

/// `10·log10(1 / mse)`; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Fixed-precision text with `inf` for the infinite sentinel.
pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn window_ssim(a: &[f32], b: &[f32], width: usize, y0: usize, x0: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            sa += a[y * width + x] as f64;
            sb += b[y * width + x] as f64;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + SSIM_WINDOW {
        for x in x0..x0 + SSIM_WINDOW {
            let da = a[y * width + x] as f64 - ma;
            let db = b[y * width + x] as f64 - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over 8×8 windows at stride 4, averaged over channels.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    same_shape(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height, a.width
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for y0 in (0..=a.height - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=a.width - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                total += window_ssim(pa, pb, a.width, y0, x0);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Project flattened images to this many Gaussian directions first.
    pub projections: Option<usize>,
    /// Estimate each expectation from this many random pairs instead of all pairs.
    pub max_pairs: Option<usize>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            projections: None,
            max_pairs: None,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>], max_pairs: Option<usize>, rng: &mut rng::StreamRng) -> f64 {
    match max_pairs {
        Some(m) if m < a.len() * b.len() => {
            let s: f64 = (0..m)
                .map(|_| dist(&a[rng.random_range(0..a.len())], &b[rng.random_range(0..b.len())]))
                .sum();
            s / m as f64
        }
        _ => {
            let s: f64 = a.iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).sum();
            s / (a.len() * b.len()) as f64
        }
    }
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` over point sets. In all-pairs mode the
/// within-set means include the diagonal, which makes the value the energy
/// distance between the two empirical measures and hence non-negative.
pub fn energy_distance_points(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &EnergyConfig, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs two non-empty sets"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::invalid("all points must share one dimension"));
    }
    let project = |pts: &[Vec<f64>], dirs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        pts.iter()
            .map(|p| dirs.iter().map(|u| u.iter().zip(p).map(|(x, y)| x * y).sum()).collect())
            .collect()
    };
    let (a, b) = match cfg.projections {
        Some(k) if k > 0 => {
            let mut r = rng::stream(seed, Purpose::Projection, 0);
            let scale = 1.0 / (k as f64).sqrt();
            let dirs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng::normal(&mut r) * scale).collect())
                .collect();
            (project(a, &dirs), project(b, &dirs))
        }
        _ => (a.to_vec(), b.to_vec()),
    };
    let mut r = rng::stream(seed, Purpose::Projection, 1);
    let ab = mean_pair_distance(&a, &b, cfg.max_pairs, &mut r);
    let aa = mean_pair_distance(&a, &a, cfg.max_pairs, &mut r);
    let bb = mean_pair_distance(&b, &b, cfg.max_pairs, &mut r);
    let e = 2.0 * ab - aa - bb;
    Ok(if cfg.max_pairs.is_none() { e.max(0.0) } else { e })
}

pub fn energy_distance(a: &[ImagePatch], b: &[ImagePatch], cfg: &EnergyConfig, seed: u64) -> Result<f64> {
    let flat = |s: &[ImagePatch]| -> Vec<Vec<f64>> {
        s.iter().map(|i| i.pixels.iter().map(|&v| v as f64).collect()).collect()
    };
    energy_distance_points(&flat(a), &flat(b), cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub energy_distance: f64,
}

impl EvalReport {
    /// Per-image fidelity of `restored` against `clean` plus the energy
    /// distance between the two sets.
    pub fn compute(
        ids: &[String],
        restored: &[ImagePatch],
        clean: &[ImagePatch],
        energy: &EnergyConfig,
        seed: u64,
    ) -> Result<Self> {
        if ids.len() != restored.len() || restored.len() != clean.len() || ids.is_empty() {
            return Err(Error::invalid(
                "ids, restored and clean must be equally long and non-empty",
            ));
        }
        let rows = ids
            .iter()
            .zip(restored.iter().zip(clean))
            .map(|(id, (r, c))| {
                let r = r.clone().clamped();
                let m = mse(&r, c)?;
                Ok(EvalRow {
                    id: id.clone(),
                    mse: m,
                    psnr: psnr_from_mse(m),
                    ssim: ssim(&r, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = rows.len() as f64;
        let clamped: Vec<ImagePatch> = restored.iter().map(|r| r.clone().clamped()).collect();
        Ok(Self {
            mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            energy_distance: energy_distance(&clamped, clean, energy, seed)?,
            rows,
        })
    }

    /// `id,mse,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mse,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.9e},{},{:.6}\n",
                r.id,
                r.mse,
                format_psnr(r.psnr),
                r.ssim
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let psnr = if self.mean_psnr.is_finite() {
            serde_json::json!(self.mean_psnr)
        } else {
            serde_json::json!("inf")
        };
        serde_json::json!({
            "count": self.rows.len(),
            "mean_mse": self.mean_mse,
            "mean_psnr": psnr,
            "mean_ssim": self.mean_ssim,
            "energy_distance": self.energy_distance,
        })
    }
}
