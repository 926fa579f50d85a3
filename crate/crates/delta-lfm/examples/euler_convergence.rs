//! Demonstrates the forward-Euler integrator on a field with a known
//! closed-form solution: first-order convergence as the step shrinks,
//! an adaptive final step that lands exactly on the requested horizon,
//! and segment chaining that matches one long integration.
//!
//! Run with: cargo run --release --example euler_convergence

use delta_lfm::gradcore::Tensor;
use delta_lfm::integrate::euler_core;
use delta_lfm::Result;

/// dz/dt = lambda * z, so z(t) = z0 * exp(lambda * t).
const LAMBDA: f64 = 0.7;

fn field(z: &Tensor, _t: f64) -> Result<Tensor> {
    Ok(z.scale(LAMBDA))
}

fn main() -> Result<()> {
    let z0 = Tensor::filled(1, 1, 1.0);
    let (t0, t1) = (0.0, 2.0);
    let exact = (LAMBDA * (t1 - t0)).exp();

    println!("integrating dz/dt = {LAMBDA} z from t={t0} to t={t1} (exact {exact:.6}):\n");
    println!("{:>8} {:>7} {:>12} {:>12} {:>7}", "dt", "steps", "result", "abs error", "ratio");
    let mut previous: Option<f64> = None;
    for k in 0..8 {
        let dt = 0.5f64.powi(k);
        let (z, steps) = euler_core(&z0, t0, t1, dt, 0.0, None, field)?;
        let error = (z.data()[0] - exact).abs();
        let ratio = previous.map(|p| p / error);
        println!(
            "{:>8.5} {:>7} {:>12.6} {:>12.3e} {:>7}",
            dt,
            steps,
            z.data()[0],
            error,
            ratio.map(|r| format!("{r:.2}")).unwrap_or_else(|| "-".into())
        );
        previous = Some(error);
    }
    println!("\nthe error halves with the step: first-order convergence, as forward Euler should.");

    // A horizon that is not a multiple of the step: the last step shrinks.
    let (_, steps) = euler_core(&z0, 0.0, 2.5, 1.0, 0.0, None, field)?;
    println!("\nspan 2.5 with dt 1.0 takes {steps} steps (1.0 + 1.0 + a final 0.5),");
    let (za, _) = euler_core(&z0, 0.0, 2.5, 1.0, 0.0, None, field)?;
    println!("landing exactly on the horizon: z(2.5) ~ {:.6}", za.data()[0]);

    // Chaining year-long segments equals one long pass when the
    // boundaries align with the step grid.
    let dt = 0.25;
    let mut chained = z0.clone();
    for year in 0..4 {
        chained = euler_core(&chained, f64::from(year), f64::from(year) + 1.0, dt, 0.0, None, field)?.0;
    }
    let (direct, _) = euler_core(&z0, 0.0, 4.0, dt, 0.0, None, field)?;
    let gap = (chained.data()[0] - direct.data()[0]).abs();
    println!("\nfour chained 1-year segments vs one 4-year pass: difference {gap:.1e}");
    Ok(())
}
