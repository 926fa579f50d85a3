//! Image-quality and progression metrics.
//!
//! Covers PSNR, SSIM over a uniform 7x7 window, region-level MAE on the
//! anatomical masks, the residual-based relative MAE over image change
//! (delta-RMAE), horizon-bucketed aggregation, and a Monte-Carlo harness
//! measuring how additive misregistration-style noise perturbs delta-RMAE.
//!
//! delta-RMAE compares the ground-truth change `xT - x0` against the
//! predicted change `xT_hat - x0` as one globally aggregated ratio, so a
//! prediction that copies the baseline scores exactly 2 whenever any real
//! change occurred, and a perfect prediction scores 0. Both residuals zero
//! scores 0: predicting stasis when stasis happened is correct.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::cohort::{Region, RegionMasks, ScanImage};
use crate::error::{DlfmError, Result};

/// PSNR of identical images is reported as this capped value together
/// with the exact-match flag instead of infinity.
pub const PSNR_CAP_DB: f64 = 999.0;

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    pub exact_match: bool,
}

fn check_same_shape(op: &'static str, a: &ScanImage, b: &ScanImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(DlfmError::ShapeMismatch {
            op,
            detail: format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10 log10(max_value^2 / MSE)`.
pub fn psnr(a: &ScanImage, b: &ScanImage, max_value: f64) -> Result<Psnr> {
    check_same_shape("psnr", a, b)?;
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(DlfmError::InvalidInput(format!(
            "psnr max_value must be positive and finite, got {max_value}"
        )));
    }
    let n = a.pixels.len() as f64;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, exact_match: true });
    }
    Ok(Psnr {
        db: 10.0 * (max_value * max_value / mse).log10(),
        exact_match: false,
    })
}

/// Mean local structural similarity over all fully valid 7x7 windows,
/// with the standard stabilizers k1=0.01, k2=0.03 at dynamic range 1.
pub fn ssim(a: &ScanImage, b: &ScanImage) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(DlfmError::InvalidInput(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let win_n = (SSIM_WINDOW * SSIM_WINDOW) as f64;

    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(a.height - SSIM_WINDOW) {
        for x0 in 0..=(a.width - SSIM_WINDOW) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let pa = a.pixels[y * a.width + x] as f64;
                    let pb = b.pixels[y * b.width + x] as f64;
                    sa += pa;
                    sb += pb;
                    saa += pa * pa;
                    sbb += pb * pb;
                    sab += pa * pb;
                }
            }
            let mu_a = sa / win_n;
            let mu_b = sb / win_n;
            let var_a = saa / win_n - mu_a * mu_a;
            let var_b = sbb / win_n - mu_b * mu_b;
            let cov = sab / win_n - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Per-region mean absolute error. A region with no pixels is reported as
/// absent; the mean covers the anatomical regions that are present
/// (background never contributes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMae {
    pub ventricle: Option<f64>,
    pub hippocampus: Option<f64>,
    pub cortex: Option<f64>,
    pub mean: Option<f64>,
}

impl RegionMae {
    pub fn get(&self, region: Region) -> Option<f64> {
        match region {
            Region::Ventricle => self.ventricle,
            Region::Hippocampus => self.hippocampus,
            Region::Cortex => self.cortex,
            Region::Background => None,
        }
    }
}

pub fn region_mae(gt: &ScanImage, gen: &ScanImage, masks: &RegionMasks) -> Result<RegionMae> {
    check_same_shape("region_mae", gt, gen)?;
    if masks.width != gt.width || masks.height != gt.height {
        return Err(DlfmError::ShapeMismatch {
            op: "region_mae",
            detail: format!(
                "masks {}x{} vs image {}x{}",
                masks.width, masks.height, gt.width, gt.height
            ),
        });
    }
    for i in 0..gt.pixels.len() {
        let hits = usize::from(masks.ventricle[i])
            + usize::from(masks.hippocampus[i])
            + usize::from(masks.cortex[i]);
        if hits > 1 {
            return Err(DlfmError::InvalidInput(format!(
                "region masks overlap at pixel {i}"
            )));
        }
    }

    let mae_over = |mask: &[bool]| -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &inside) in mask.iter().enumerate() {
            if inside {
                sum += (gt.pixels[i] as f64 - gen.pixels[i] as f64).abs();
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    };

    let per: Vec<Option<f64>> = Region::ANATOMICAL
        .iter()
        .map(|&r| mae_over(masks.region(r).as_ref()))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(RegionMae {
        ventricle: per[0],
        hippocampus: per[1],
        cortex: per[2],
        mean,
    })
}

/// Aggregate residual score on raw residual vectors: the total absolute
/// disagreement between the two residuals over the mean of their total
/// magnitudes. Always lands in [0, 2]; both residuals zero gives 0.
pub fn delta_rmae_from_residuals(gt: &[f64], gen: &[f64]) -> f64 {
    debug_assert_eq!(gt.len(), gen.len());
    let num: f64 = gt.iter().zip(gen).map(|(a, b)| (a - b).abs()).sum();
    let sum_gt: f64 = gt.iter().map(|v| v.abs()).sum();
    let sum_gen: f64 = gen.iter().map(|v| v.abs()).sum();
    let den = 0.5 * (sum_gt + sum_gen);
    if den == 0.0 {
        return 0.0;
    }
    (num / den).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaRmaeMode {
    /// One ratio over globally aggregated residual sums.
    Aggregate,
    /// Mean over pixels of the per-pixel ratio, each with the 0/0 -> 0
    /// convention. Exposed for comparison; the aggregate form is the
    /// default everywhere.
    PerPixelMean,
}

pub fn delta_rmae_with_mode(
    x0: &ScanImage,
    x_t: &ScanImage,
    x_t_hat: &ScanImage,
    mode: DeltaRmaeMode,
) -> Result<f64> {
    check_same_shape("delta_rmae", x0, x_t)?;
    check_same_shape("delta_rmae", x0, x_t_hat)?;
    let gt: Vec<f64> = x_t
        .pixels
        .iter()
        .zip(&x0.pixels)
        .map(|(&t, &z)| t as f64 - z as f64)
        .collect();
    let gen: Vec<f64> = x_t_hat
        .pixels
        .iter()
        .zip(&x0.pixels)
        .map(|(&t, &z)| t as f64 - z as f64)
        .collect();
    match mode {
        DeltaRmaeMode::Aggregate => Ok(delta_rmae_from_residuals(&gt, &gen)),
        DeltaRmaeMode::PerPixelMean => {
            let mut total = 0.0;
            for (a, b) in gt.iter().zip(&gen) {
                let den = 0.5 * (a.abs() + b.abs());
                if den > 0.0 {
                    total += ((a - b).abs() / den).clamp(0.0, 2.0);
                }
            }
            Ok(total / gt.len() as f64)
        }
    }
}

/// Residual-based relative mean absolute error between the true change
/// `x_t - x0` and the predicted change `x_t_hat - x0`.
pub fn delta_rmae(x0: &ScanImage, x_t: &ScanImage, x_t_hat: &ScanImage) -> Result<f64> {
    delta_rmae_with_mode(x0, x_t, x_t_hat, DeltaRmaeMode::Aggregate)
}

/// Everything measured for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub patient_id: u32,
    pub horizon_years: f64,
    pub psnr_db: f64,
    pub psnr_exact: bool,
    pub ssim: f64,
    pub region_mae: RegionMae,
    pub delta_rmae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat_of(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

/// Aggregates for every report whose horizon rounds to the same year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonBucket {
    pub horizon_years: i64,
    pub count: usize,
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub region_mae_mean: Option<Stat>,
    pub delta_rmae: Stat,
}

/// Buckets reports by rounded horizon year; buckets with no reports are
/// simply not emitted. Stds are population stds.
pub fn stratify_by_horizon(reports: &[MetricReport]) -> Vec<HorizonBucket> {
    let mut buckets: BTreeMap<i64, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        buckets.entry(r.horizon_years.round() as i64).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|(year, members)| {
            let collect = |f: fn(&MetricReport) -> f64| -> Vec<f64> {
                members.iter().map(|r| f(r)).collect()
            };
            let maes: Vec<f64> = members.iter().filter_map(|r| r.region_mae.mean).collect();
            HorizonBucket {
                horizon_years: year,
                count: members.len(),
                psnr_db: stat_of(&collect(|r| r.psnr_db)),
                ssim: stat_of(&collect(|r| r.ssim)),
                region_mae_mean: (!maes.is_empty()).then(|| stat_of(&maes)),
                delta_rmae: stat_of(&collect(|r| r.delta_rmae)),
            }
        })
        .collect()
}

/// How the ground-truth and predicted residuals relate in the noise
/// sensitivity simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensitivityScenario {
    /// Prediction exactly opposes the true change, the worst case: the
    /// noiseless score is exactly 2.
    OpposedResiduals,
    /// Prediction equals the true change: the noiseless score is 0 and
    /// noise can only push it up.
    IdenticalResiduals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub sigma: f64,
    pub mean: f64,
    pub std: f64,
    /// Shift of the mean score relative to the noiseless scenario value.
    pub bias: f64,
}

/// The 21-point noise grid 0.00, 0.05, ..., 1.00.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 0.05).collect()
}

/// Monte-Carlo sensitivity of the residual score to additive pixel noise
/// on the ground-truth residual.
///
/// Per trial, a standard-normal residual and a standard-normal noise
/// direction are drawn once and reused for every sigma (common random
/// numbers), so the curve across the grid is smooth in the trial budget:
/// the score is recomputed with the noise scaled to each sigma. At
/// sigma 0 the opposed scenario yields mean exactly 2 and std exactly 0.
pub fn sensitivity_table(
    sigma_grid: &[f64],
    n_pixels: usize,
    n_trials: usize,
    scenario: SensitivityScenario,
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    if n_pixels == 0 || n_trials == 0 {
        return Err(DlfmError::InvalidInput(
            "sensitivity_table needs at least one pixel and one trial".into(),
        ));
    }
    if sigma_grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(DlfmError::InvalidInput(format!(
            "sigma grid must be finite and nonnegative, got {sigma_grid:?}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |_: usize| -> Vec<f64> {
        (0..n_pixels).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let trials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_trials).map(|t| (draw(t), draw(t))).collect();

    let gen_residual = |gt: &[f64]| -> Vec<f64> {
        match scenario {
            SensitivityScenario::OpposedResiduals => gt.iter().map(|v| -v).collect(),
            SensitivityScenario::IdenticalResiduals => gt.to_vec(),
        }
    };

    let noiseless: f64 = trials
        .iter()
        .map(|(gt, _)| delta_rmae_from_residuals(gt, &gen_residual(gt)))
        .sum::<f64>()
        / n_trials as f64;

    let mut rows = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let scores: Vec<f64> = trials
            .iter()
            .map(|(gt, noise)| {
                let noisy: Vec<f64> =
                    gt.iter().zip(noise).map(|(g, xi)| sigma * xi + g).collect();
                delta_rmae_from_residuals(&noisy, &gen_residual(gt))
            })
            .collect();
        let stat = stat_of(&scores);
        rows.push(SensitivityRow {
            sigma,
            mean: stat.mean,
            std: stat.std,
            bias: stat.mean - noiseless,
        });
    }
    Ok(rows)
}
