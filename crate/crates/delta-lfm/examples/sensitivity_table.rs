//! Reproduces the metric noise-sensitivity study: how does additive
//! pixel noise on the observed change shift the change-aware score when
//! the prediction is maximally wrong? The noiseless row is exact, and
//! the mean decays monotonically while the spread grows.
//!
//! Run with: cargo run --release --example sensitivity_table

use delta_lfm::metrics::{default_sigma_grid, sensitivity_table, SensitivityScenario};
use delta_lfm::Result;

fn bar(value: f64, max: f64, width: usize) -> String {
    let fill = ((value / max) * width as f64).round() as usize;
    "#".repeat(fill.min(width))
}

fn main() -> Result<()> {
    let grid = default_sigma_grid();
    let rows = sensitivity_table(&grid, 1024, 200, SensitivityScenario::OpposedResiduals, 7)?;

    println!("worst-case prediction under residual noise (1024 pixels, 200 trials):\n");
    println!("{:>6} {:>9} {:>9} {:>9}  mean", "sigma", "mean", "std", "bias");
    for row in &rows {
        println!(
            "{:>6.2} {:>9.4} {:>9.4} {:>+9.4}  {}",
            row.sigma,
            row.mean,
            row.std,
            row.bias,
            bar(row.mean, 2.0, 40)
        );
    }

    let first = &rows[0];
    println!(
        "\nat sigma 0 the score is exactly {} with spread {} — the metric is deterministic",
        first.mean, first.std
    );
    println!("growing noise drowns the true signal: the score drifts down, the spread up,");
    println!("so benchmark noise floors bias this metric optimistically.");

    let monotone_mean = rows.windows(2).all(|w| w[1].mean < w[0].mean);
    let monotone_std = rows.windows(2).all(|w| w[1].std > w[0].std);
    println!(
        "\nmonotonicity across the grid: mean strictly falls {monotone_mean}, std strictly rises {monotone_std}"
    );
    Ok(())
}
