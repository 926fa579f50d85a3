//! Synthetic scan rendering.
//!
//! Each scan is a stylized axial slice built from three structures on a
//! background: a central ventricle ellipse that grows with disease
//! severity, a small hippocampus blob below it that shrinks, and a cortex
//! ring whose thickness thins. Interior tissue and the cortex also dim as
//! severity rises, so progression shows up both as boundary shifts and as
//! broad intensity change. Per-patient anatomy (jitters of position,
//! size and brightness) comes from one seed and is independent of
//! severity, so a patient's scans differ only through disease state and
//! pixel noise.
//!
//! Severity enters every curve through a strictly increasing response that
//! saturates far beyond the generated range, so geometry keeps changing
//! monotonically at any severity without structures ever colliding: region
//! masks stay pairwise disjoint and cover the image.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DlfmError, Result};

/// Grayscale scan with pixels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl ScanImage {
    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Pixels as a single-row f64 tensor for the networks.
    pub fn to_row_tensor(&self) -> crate::gradcore::Tensor {
        crate::gradcore::Tensor::row(self.pixels.iter().map(|&p| p as f64).collect())
    }

    /// Clamps f64 model output back into a scan.
    pub fn from_row_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(DlfmError::ShapeMismatch {
                op: "ScanImage::from_row_values",
                detail: format!("{}x{} needs {} pixels, got {}", width, height, width * height, values.len()),
            });
        }
        Ok(ScanImage {
            width,
            height,
            pixels: values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        })
    }
}

/// Anatomical regions of a scan. The three named structures are scored by
/// the region metrics; everything else is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Ventricle,
    Hippocampus,
    Cortex,
    Background,
}

impl Region {
    /// The structures with their own masks, in reporting order.
    pub const ANATOMICAL: [Region; 3] = [Region::Ventricle, Region::Hippocampus, Region::Cortex];

    pub fn name(&self) -> &'static str {
        match self {
            Region::Ventricle => "ventricle",
            Region::Hippocampus => "hippocampus",
            Region::Cortex => "cortex",
            Region::Background => "background",
        }
    }
}

/// Boolean masks over the scan grid, pairwise disjoint, derived from the
/// noiseless geometry. Background is the complement of the three
/// structures.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub width: usize,
    pub height: usize,
    pub ventricle: Vec<bool>,
    pub hippocampus: Vec<bool>,
    pub cortex: Vec<bool>,
}

impl RegionMasks {
    pub fn region(&self, region: Region) -> std::borrow::Cow<'_, [bool]> {
        match region {
            Region::Ventricle => std::borrow::Cow::Borrowed(&self.ventricle),
            Region::Hippocampus => std::borrow::Cow::Borrowed(&self.hippocampus),
            Region::Cortex => std::borrow::Cow::Borrowed(&self.cortex),
            Region::Background => std::borrow::Cow::Owned(
                (0..self.width * self.height)
                    .map(|i| !(self.ventricle[i] || self.hippocampus[i] || self.cortex[i]))
                    .collect(),
            ),
        }
    }

    pub fn area(&self, region: Region) -> usize {
        self.region(region).iter().filter(|&&b| b).count()
    }
}

/// Continuous geometry of one scan before rasterization. Exposed so tests
/// can assert monotone trends without pixel quantization in the way.
#[derive(Debug, Clone)]
pub struct ScanGeometry {
    pub center_x: f64,
    pub center_y: f64,
    pub ventricle_a: f64,
    pub ventricle_b: f64,
    pub hippocampus_x: f64,
    pub hippocampus_y: f64,
    pub hippocampus_r: f64,
    pub ring_outer: f64,
    pub ring_inner: f64,
    pub intensity_background: f64,
    pub intensity_tissue: f64,
    pub intensity_ventricle: f64,
    pub intensity_hippocampus: f64,
    pub intensity_cortex: f64,
}

impl ScanGeometry {
    pub fn ring_thickness(&self) -> f64 {
        self.ring_outer - self.ring_inner
    }
}

/// Severity response for shrinking structures: strictly increasing, zero
/// at zero, saturating toward 6.
fn saturate(severity: f64) -> f64 {
    6.0 * severity / (6.0 + severity)
}

/// Severity response for the growing ventricle: identity across the range
/// generated cohorts actually reach, then an exponential approach to 6.2
/// so the ellipse keeps growing strictly but never touches its neighbors.
fn ramp(severity: f64) -> f64 {
    if severity <= 5.0 {
        severity
    } else {
        5.0 + 1.2 * (1.0 - (-(severity - 5.0) / 1.2).exp())
    }
}

/// Severity response for dimming intensities: identity across the range
/// generated cohorts actually reach, then an exponential approach to 4.6
/// so intensities keep falling strictly but never cross their floors.
fn fade(severity: f64) -> f64 {
    if severity <= 4.0 {
        severity
    } else {
        4.0 + 0.6 * (1.0 - (-(severity - 4.0) / 0.6).exp())
    }
}

/// Computes the continuous scene for one (anatomy, severity) pair.
pub fn scan_geometry(anatomy_seed: u64, severity: f64, width: usize, height: usize) -> Result<ScanGeometry> {
    if severity < 0.0 || !severity.is_finite() {
        return Err(DlfmError::InvalidInput(format!(
            "severity must be finite and nonnegative, got {severity}"
        )));
    }
    if width < 16 || height < 16 {
        return Err(DlfmError::InvalidInput(format!(
            "scan grid must be at least 16x16, got {width}x{height}"
        )));
    }

    // Anatomy jitters are drawn in a fixed order so one seed pins the
    // whole scene regardless of severity.
    let mut rng = ChaCha8Rng::seed_from_u64(anatomy_seed);
    let jitter_x: f64 = rng.gen_range(-1.2..1.2);
    let jitter_y: f64 = rng.gen_range(-1.2..1.2);
    let vent_ja: f64 = rng.gen_range(0.95..1.05);
    let vent_jb: f64 = rng.gen_range(0.95..1.05);
    let hip_jo: f64 = rng.gen_range(0.98..1.02);
    let hip_jr: f64 = rng.gen_range(0.95..1.05);
    let ring_jo: f64 = rng.gen_range(0.985..1.015);
    let ring_jt: f64 = rng.gen_range(0.95..1.05);
    let int_bg: f64 = rng.gen_range(0.9..1.1);
    let int_tissue: f64 = rng.gen_range(0.97..1.03);
    let int_vent: f64 = rng.gen_range(0.95..1.05);
    let int_hip: f64 = rng.gen_range(0.97..1.03);
    let int_ctx: f64 = rng.gen_range(0.97..1.03);

    let scale = width.min(height) as f64 / 32.0;
    let sat = saturate(severity);

    let grow = ramp(severity);

    Ok(ScanGeometry {
        center_x: width as f64 / 2.0 + jitter_x * scale,
        center_y: height as f64 / 2.0 + jitter_y * scale,
        ventricle_a: (3.4 + 0.90 * grow) * vent_ja * scale,
        ventricle_b: (2.35 + 0.50 * grow) * vent_jb * scale,
        hippocampus_x: width as f64 / 2.0 + jitter_x * scale,
        hippocampus_y: height as f64 / 2.0 + jitter_y * scale + 7.0 * hip_jo * scale,
        hippocampus_r: 1.55 * hip_jr / (1.0 + 0.55 * sat) * scale,
        ring_outer: 14.2 * ring_jo * scale,
        ring_inner: (14.2 * ring_jo - (1.3 + 2.6 * (-0.45 * severity).exp()) * ring_jt) * scale,
        intensity_background: 0.10 * int_bg,
        // Tissue and cortex dim as disease advances: broad, smooth signal
        // spread over many pixels, the way diffuse atrophy shows up, rather
        // than only thin boundary shifts. The fade is linear across the
        // severities cohorts actually generate, so consecutive visits keep a
        // visible intensity step, and saturates beyond so both responses
        // stay strictly decreasing yet bounded inside (0, 1) at any
        // severity.
        intensity_tissue: (0.62 - 0.110 * fade(severity)) * int_tissue,
        intensity_ventricle: 0.16 * int_vent,
        intensity_hippocampus: 0.68 * int_hip,
        intensity_cortex: (0.84 - 0.095 * fade(severity)) * int_ctx,
    })
}

/// Picks the `count` pixels with the smallest distance values, breaking
/// exact ties by pixel index so the selection is a total order.
fn closest_pixels(distances: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_unstable_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut mask = vec![false; distances.len()];
    for &idx in order.iter().take(count.min(distances.len())) {
        mask[idx] = true;
    }
    mask
}

/// Renders one scan plus its region masks.
///
/// Masks come from the noiseless geometry; pixel noise is additive
/// Gaussian clipped back into [0, 1]. Fully deterministic in all four
/// arguments. The ventricle and hippocampus masks hold exactly the
/// rounded continuous ellipse area in pixels (the closest pixels under
/// each structure's distance), so pixel areas inherit the continuous
/// trends: the ventricle grows and the hippocampus shrinks (floored at
/// one pixel) with severity, and the cortex ring thins.
pub fn render_scan(
    anatomy_seed: u64,
    severity: f64,
    noise_seed: u64,
    noise_std: f64,
    width: usize,
    height: usize,
) -> Result<(ScanImage, RegionMasks)> {
    if !(0.0..=0.1).contains(&noise_std) {
        return Err(DlfmError::InvalidInput(format!(
            "noise_std must lie in [0, 0.1], got {noise_std}"
        )));
    }
    let geo = scan_geometry(anatomy_seed, severity, width, height)?;

    let n = width * height;
    let mut vent_dist = vec![0.0f64; n];
    let mut hip_dist = vec![0.0f64; n];
    let mut radius = vec![0.0f64; n];
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - geo.center_x;
            let dy = py - geo.center_y;
            radius[idx] = (dx * dx + dy * dy).sqrt();
            vent_dist[idx] = ((dx / geo.ventricle_a).powi(2) + (dy / geo.ventricle_b).powi(2)).sqrt();
            let hdx = px - geo.hippocampus_x;
            let hdy = py - geo.hippocampus_y;
            hip_dist[idx] = (hdx * hdx + hdy * hdy).sqrt();
        }
    }

    let vent_count = (PI * geo.ventricle_a * geo.ventricle_b).round() as usize;
    let hip_count = ((PI * geo.hippocampus_r * geo.hippocampus_r).round() as usize).max(1);
    let ventricle = closest_pixels(&vent_dist, vent_count);
    let hip_wanted = closest_pixels(&hip_dist, hip_count);

    let mut hippocampus = vec![false; n];
    let mut cortex = vec![false; n];
    let mut pixels = vec![0.0f32; n];
    for idx in 0..n {
        // Precedence resolves any overlap: ventricle, then hippocampus,
        // then cortex.
        let in_ring = radius[idx] >= geo.ring_inner && radius[idx] <= geo.ring_outer;
        let intensity = if ventricle[idx] {
            geo.intensity_ventricle
        } else if hip_wanted[idx] {
            hippocampus[idx] = true;
            geo.intensity_hippocampus
        } else if in_ring {
            cortex[idx] = true;
            geo.intensity_cortex
        } else if radius[idx] < geo.ring_inner {
            geo.intensity_tissue
        } else {
            geo.intensity_background
        };
        pixels[idx] = intensity as f32;
    }

    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        for p in pixels.iter_mut() {
            let noisy = *p as f64 + normal.sample(&mut rng);
            *p = noisy.clamp(0.0, 1.0) as f32;
        }
    }

    Ok((
        ScanImage { width, height, pixels },
        RegionMasks { width, height, ventricle, hippocampus, cortex },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: usize = 32;
    const H: usize = 32;

    #[test]
    fn rendering_is_deterministic() {
        let (a1, m1) = render_scan(7, 1.3, 99, 0.05, W, H).unwrap();
        let (a2, m2) = render_scan(7, 1.3, 99, 0.05, W, H).unwrap();
        assert_eq!(a1.pixels, a2.pixels);
        assert_eq!(m1, m2);
    }

    #[test]
    fn masks_are_disjoint_and_cover() {
        for seed in [0u64, 3, 11] {
            for severity in [0.0, 0.7, 2.5, 40.0] {
                let (_, m) = render_scan(seed, severity, 1, 0.02, W, H).unwrap();
                let mut total = 0usize;
                for i in 0..W * H {
                    let hits = [m.ventricle[i], m.hippocampus[i], m.cortex[i]]
                        .iter()
                        .filter(|&&b| b)
                        .count();
                    assert!(hits <= 1, "pixel {i} in {hits} structures");
                    total += hits;
                }
                total += m.area(Region::Background);
                assert_eq!(total, W * H, "masks do not cover the grid");
            }
        }
    }

    #[test]
    fn ventricle_grows_from_severity_zero_to_two() {
        let (_, m0) = render_scan(5, 0.0, 1, 0.0, W, H).unwrap();
        let (_, m2) = render_scan(5, 2.0, 1, 0.0, W, H).unwrap();
        assert!(m2.area(Region::Ventricle) > m0.area(Region::Ventricle));
    }

    #[test]
    fn structure_trends_are_strictly_monotone_over_severity_grid() {
        // 20-point grid, 10 anatomies. The rasterized ventricle area must
        // rise at every step. The hippocampus disk spans so few pixels
        // that adjacent grid points can rasterize identically, so its
        // pixel area is held to nonincreasing per step and strictly lower
        // across the grid, while the continuous radius (and the ring
        // thickness) must fall at every step.
        for seed in 0..10u64 {
            let mut prev_vent = None;
            let mut prev_hip: Option<usize> = None;
            let mut prev_hip_r = None;
            let mut prev_thick = None;
            let mut first_hip = 0usize;
            let mut last_hip = 0usize;
            for k in 0..20 {
                let severity = k as f64 * 0.25;
                let (_, m) = render_scan(seed, severity, 1, 0.0, W, H).unwrap();
                let geo = scan_geometry(seed, severity, W, H).unwrap();
                let vent = m.area(Region::Ventricle);
                let hip = m.area(Region::Hippocampus);
                if let Some(p) = prev_vent {
                    assert!(vent > p, "seed {seed} severity {severity}: ventricle {p} -> {vent}");
                }
                if let Some(p) = prev_hip {
                    assert!(hip <= p, "seed {seed} severity {severity}: hippocampus grew {p} -> {hip}");
                    assert!(hip >= 1);
                }
                if let Some(p) = prev_hip_r {
                    assert!(geo.hippocampus_r < p, "seed {seed}: hippocampus radius not falling");
                }
                if let Some(p) = prev_thick {
                    assert!(geo.ring_thickness() < p, "seed {seed}: ring thickness not falling");
                }
                if k == 0 {
                    first_hip = hip;
                }
                last_hip = hip;
                prev_vent = Some(vent);
                prev_hip = Some(hip);
                prev_hip_r = Some(geo.hippocampus_r);
                prev_thick = Some(geo.ring_thickness());
            }
            assert!(last_hip < first_hip, "seed {seed}: hippocampus never shrank");
        }
    }

    #[test]
    fn hippocampus_never_vanishes() {
        let (_, m) = render_scan(2, 500.0, 1, 0.0, W, H).unwrap();
        assert!(m.area(Region::Hippocampus) >= 1);
    }

    #[test]
    fn noise_magnitude_matches_folded_normal_mean() {
        // E|N(0, s)| = s sqrt(2/pi); clipping is rare at s = 0.05 because
        // all intensity levels sit several sigma inside [0, 1].
        let sigma = 0.05;
        let (clean, _) = render_scan(9, 1.0, 4, 0.0, W, H).unwrap();
        let (noisy, _) = render_scan(9, 1.0, 4, sigma, W, H).unwrap();
        let mad: f64 = clean
            .pixels
            .iter()
            .zip(noisy.pixels.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / (W * H) as f64;
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mad - expected).abs() < 0.2 * expected,
            "mean abs diff {mad} vs expected {expected}"
        );
    }

    #[test]
    fn pixels_stay_clipped_under_heavy_noise() {
        let (img, _) = render_scan(1, 0.5, 77, 0.1, W, H).unwrap();
        assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn masks_ignore_noise() {
        let (_, m0) = render_scan(3, 1.0, 10, 0.0, W, H).unwrap();
        let (_, m1) = render_scan(3, 1.0, 11, 0.08, W, H).unwrap();
        assert_eq!(m0, m1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(render_scan(0, -1.0, 0, 0.0, W, H).is_err());
        assert!(render_scan(0, 1.0, 0, 0.2, W, H).is_err());
        assert!(render_scan(0, f64::NAN, 0, 0.0, W, H).is_err());
        assert!(render_scan(0, 1.0, 0, 0.0, 8, 8).is_err());
    }
}
