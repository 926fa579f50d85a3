//! Verifies the reverse-mode engine against central finite differences
//! on progressively nastier functions, ending at the differentiable SVD
//! factors that the alignment losses train through.
//!
//! Run with: cargo run --release --example gradient_checks

use delta_lfm::gradcore::{check_gradients, Tensor};
use delta_lfm::latent::{arcrank_loss_on_tape, ArcRankConfig, ArcTerm, RankTerm};
use delta_lfm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let step = 1e-5;
    let tolerance = 1e-4;
    let mut worst: f64 = 0.0;

    let mut report = |name: &str, err: f64| {
        worst = worst.max(err);
        let verdict = if err < tolerance { "ok" } else { "FAIL" };
        println!("{name:<42} relative error {err:>12.3e}  {verdict}");
    };

    // Elementwise chain: tanh then sigmoid then mean.
    let x = random_matrix(3, 4, &mut rng);
    let err = check_gradients(
        |tape, x| {
            let t = tape.tanh(x)?;
            let s = tape.sigmoid(t)?;
            tape.mean(s)
        },
        &x,
        step,
    )?;
    report("tanh -> sigmoid -> mean", err);

    // Matrix product against a fixed right factor, then a soft norm.
    let w = random_matrix(4, 3, &mut rng);
    let x = random_matrix(2, 4, &mut rng);
    let err = check_gradients(
        |tape, x| {
            let w = tape.constant(w.clone());
            let y = tape.matmul(x, w)?;
            let sq = tape.mul_elem(y, y)?;
            let s = tape.sum(sq)?;
            tape.sqrt(s)
        },
        &x,
        step,
    )?;
    report("matmul -> frobenius norm", err);

    // Whole-tensor layer normalization inside a nonlinear sandwich.
    let x = random_matrix(1, 6, &mut rng);
    let err = check_gradients(
        |tape, x| {
            let t = tape.tanh(x)?;
            let n = tape.layer_norm(t, 1e-5)?;
            let e = tape.exp(n)?;
            tape.mean(e)
        },
        &x,
        step,
    )?;
    report("tanh -> layer_norm -> exp -> mean", err);

    // Sum of singular values (the nuclear norm) through the SVD.
    let x = random_matrix(5, 5, &mut rng);
    let err = check_gradients(
        |tape, x| {
            let (_, s) = tape.svd(x)?;
            tape.sum(s)
        },
        &x,
        step,
    )?;
    report("svd -> nuclear norm", err);

    // L1 distance between the singular-vector matrices of the input and
    // a fixed reference: the gradient must flow through U itself.
    let x = random_matrix(4, 4, &mut rng);
    let reference = random_matrix(4, 4, &mut rng);
    let err = check_gradients(
        |tape, x| {
            let (u_x, _) = tape.svd(x)?;
            let r = tape.constant(reference.clone());
            let (u_r, _) = tape.svd(r)?;
            let diff = tape.sub(u_x, u_r)?;
            let a = tape.abs(diff)?;
            tape.sum(a)
        },
        &x,
        step,
    )?;
    report("svd -> |U - U_ref| sum", err);

    // The full two-visit alignment objective, gradient on the later
    // visit (the earlier one is frozen by the configured stop-gradient).
    let z_i = random_matrix(4, 4, &mut rng);
    let z_j = random_matrix(4, 4, &mut rng);
    let cfg = ArcRankConfig::default();
    let err = check_gradients(
        |tape, z_j| {
            let z_i = tape.var(z_i.clone());
            let nodes = arcrank_loss_on_tape(
                tape,
                &[z_i, z_j],
                &cfg,
                ArcTerm::SvdL1,
                RankTerm::NuclearHinge,
            )?
            .expect("two visits yield a loss");
            Ok(nodes.total)
        },
        &z_j,
        step,
    )?;
    report("alignment objective (later visit)", err);

    println!("\nworst relative error: {worst:.3e} (tolerance {tolerance:.0e})");
    assert!(worst < tolerance, "a gradient check exceeded the tolerance");
    Ok(())
}
