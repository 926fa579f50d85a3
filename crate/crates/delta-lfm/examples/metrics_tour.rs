//! Walks through every image metric on crafted inputs whose scores are
//! known in advance, ending with the change-aware relative error that
//! headlines the evaluation pipeline and its two key edge cases.
//!
//! Run with: cargo run --release --example metrics_tour

use delta_lfm::cohort::{render_scan, ScanImage};
use delta_lfm::metrics::{delta_rmae, psnr, region_mae, ssim, stratify_by_horizon, MetricReport};
use delta_lfm::Result;

fn shifted(image: &ScanImage, delta: f32) -> ScanImage {
    ScanImage {
        width: image.width,
        height: image.height,
        pixels: image.pixels.iter().map(|&p| (p + delta).clamp(0.0, 1.0)).collect(),
    }
}

fn main() -> Result<()> {
    let (scan, masks) = render_scan(99, 0.4, 1, 0.0, 32, 32)?;
    let (later, _) = render_scan(99, 0.8, 2, 0.0, 32, 32)?;

    // PSNR: identical images are flagged instead of forcing an infinity.
    let same = psnr(&scan, &scan, 1.0)?;
    println!("psnr(scan, scan)          -> exact match: {}", same.exact_match);
    let off = psnr(&scan, &shifted(&scan, 0.01), 1.0)?;
    println!("psnr(scan, scan + 0.01)   -> {:.2} dB (a uniform 1% shift is 40 dB)", off.db);

    // SSIM: structural similarity survives a brightness shift better
    // than pixelwise scores suggest, but drops for real anatomy change.
    println!("ssim(scan, scan)          -> {:.4}", ssim(&scan, &scan)?);
    println!("ssim(scan, scan + 0.01)   -> {:.4}", ssim(&scan, &shifted(&scan, 0.01))?);
    println!("ssim(scan, later scan)    -> {:.4}", ssim(&scan, &later)?);

    // Region MAE: error split by anatomical mask of the ground truth.
    let mae = region_mae(&later, &scan, &masks)?;
    println!(
        "region mae (stale scan):  ventricle {:.4}  hippocampus {:.4}  cortex {:.4}",
        mae.ventricle.expect("mask non-empty"),
        mae.hippocampus.expect("mask non-empty"),
        mae.cortex.expect("mask non-empty"),
    );

    // The change-aware score compares residuals, not images. Predicting
    // the source unchanged ("copy forward") misses all the change and
    // scores exactly 2; predicting the truth scores exactly 0.
    println!("\nchange-aware relative error (0 best, 2 worst):");
    println!("  perfect prediction      -> {:.4}", delta_rmae(&scan, &later, &later)?);
    println!("  copy-forward prediction -> {:.4}", delta_rmae(&scan, &later, &scan)?);
    let halfway = ScanImage {
        width: scan.width,
        height: scan.height,
        pixels: scan.pixels.iter().zip(&later.pixels).map(|(&a, &b)| (a + b) / 2.0).collect(),
    };
    println!("  half the true change    -> {:.4}", delta_rmae(&scan, &later, &halfway)?);

    // Reports stratify by prediction horizon for the summary tables.
    let reports: Vec<MetricReport> = (0..6)
        .map(|k| MetricReport {
            patient_id: k as u32,
            horizon_years: 1.0 + (k % 3) as f64,
            psnr_db: 30.0 - k as f64,
            psnr_exact: false,
            ssim: 0.9,
            region_mae: region_mae(&later, &scan, &masks).expect("same shapes"),
            delta_rmae: 0.2 * (k % 3 + 1) as f64,
        })
        .collect();
    println!("\nby prediction horizon:");
    for bucket in stratify_by_horizon(&reports) {
        println!(
            "  {} year(s): {} predictions, score {:.3} +/- {:.3}",
            bucket.horizon_years, bucket.count, bucket.delta_rmae.mean, bucket.delta_rmae.std
        );
    }
    Ok(())
}
