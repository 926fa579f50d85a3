//! Temporary probe: where does the prediction error budget go?
//!
//! Measures the autoencoder-imposed floor on the residual score: even a
//! perfect latent forecast cannot beat delta_rmae(x0, xT, decode(encode(xT))).

use delta_lfm::cohort::{generate_cohort, split_cohort, Cohort, CohortConfig};
use delta_lfm::latent::{
    arc_loss, encode_visits, train_autoencoder, AeTrainConfig, AutoencoderConfig,
    AutoencoderParams,
};
use delta_lfm::metrics::delta_rmae;
use delta_lfm::Result;

fn ordering(params: &AutoencoderParams, cohort: &Cohort) -> Result<(f64, f64)> {
    let mut arc_sum = 0.0;
    let mut arc_pairs = 0usize;
    let mut ordered = 0usize;
    let mut adjacent = 0usize;
    for patient in &cohort.patients {
        let samples = encode_visits(params, patient)?;
        let factors: Vec<_> = samples.iter().map(|s| s.svd()).collect::<Result<Vec<_>>>()?;
        for i in 0..factors.len() {
            for j in (i + 1)..factors.len() {
                arc_sum += arc_loss(&factors[i].u, &factors[j].u)?;
                arc_pairs += 1;
            }
        }
        for pair in factors.windows(2) {
            adjacent += 1;
            if pair[1].nuclear_norm() > pair[0].nuclear_norm() {
                ordered += 1;
            }
        }
    }
    Ok((arc_sum / arc_pairs as f64, ordered as f64 / adjacent as f64))
}

/// (eval recon MAE, mean |change| per pixel, AE-floor residual score) over
/// all ordered visit pairs of the given patients.
fn ae_floor(params: &AutoencoderParams, cohort: &Cohort, ids: &[u32]) -> Result<(f64, f64, f64)> {
    let mut recon_mae_sum = 0.0;
    let mut recon_images = 0usize;
    let mut change_sum = 0.0;
    let mut score_sum = 0.0;
    let mut pairs = 0usize;
    let mut sigma_sum = 0.0;
    let mut sigma_count = 0usize;
    for &id in ids {
        let patient = cohort.patient(id).expect("id from split");
        let recons: Vec<_> = patient
            .visits
            .iter()
            .map(|v| -> Result<_> {
                let z = params.encode(&v.image)?;
                sigma_sum += z.logvar.data().iter().map(|lv| (lv / 2.0).exp()).sum::<f64>()
                    / z.logvar.len() as f64;
                sigma_count += 1;
                params.decode(&z.z)
            })
            .collect::<Result<Vec<_>>>()?;
        for (v, r) in patient.visits.iter().zip(&recons) {
            let n = v.image.pixels.len() as f64;
            recon_mae_sum += v
                .image
                .pixels
                .iter()
                .zip(&r.pixels)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / n;
            recon_images += 1;
        }
        for i in 0..patient.visits.len() {
            for j in (i + 1)..patient.visits.len() {
                let x0 = &patient.visits[i].image;
                let xt = &patient.visits[j].image;
                let n = x0.pixels.len() as f64;
                change_sum += x0
                    .pixels
                    .iter()
                    .zip(&xt.pixels)
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / n;
                score_sum += delta_rmae(x0, xt, &recons[j])?;
                pairs += 1;
            }
        }
    }
    println!("  mean posterior sigma {:.4}", sigma_sum / sigma_count as f64);
    Ok((recon_mae_sum / recon_images as f64, change_sum / pairs as f64, score_sum / pairs as f64))
}

fn main() -> Result<()> {
    let cohort = generate_cohort(&CohortConfig::default())?;
    let split = split_cohort(&cohort, (0.80, 0.05, 0.15), 1)?;

    for (tag, hidden, epochs, arc, rank) in [("both-128", 128, 60, 0.005, 0.01)] {
        let ae_config = AutoencoderConfig { hidden, ..AutoencoderConfig::default() };
        let mut cfg = AeTrainConfig { epochs, seed: 0, ..AeTrainConfig::default() };
        cfg.arcrank.lambda_arc = arc;
        cfg.arcrank.lambda_rank = rank;
        let t0 = std::time::Instant::now();
        let (params, hist) = train_autoencoder(&cohort, &split.train, &ae_config, &cfg)?;
        let last = hist.last().unwrap();
        let (arc_d, ord) = ordering(&params, &cohort)?;
        let (train_mae, train_change, train_floor) = ae_floor(&params, &cohort, &split.train)?;
        let (test_mae, test_change, test_floor) = ae_floor(&params, &cohort, &split.test)?;
        println!(
            "[{tag}] {:.1?} recon(train,sampled) {:.5} arc {:.4} ordered {:.3}",
            t0.elapsed(),
            last.reconstruction,
            arc_d,
            ord
        );
        println!(
            "  train: recon MAE {train_mae:.4} |change| {train_change:.4} AE-floor score {train_floor:.4}"
        );
        println!(
            "  test:  recon MAE {test_mae:.4} |change| {test_change:.4} AE-floor score {test_floor:.4}"
        );

        // Spectral shape after training: are trailing singular values
        // clustering (near-degenerate gradient denominators)?
        let mut min_gap2 = f64::INFINITY;
        for &id in split.train.iter().take(4) {
            let patient = cohort.patient(id).expect("id from split");
            let samples = encode_visits(&params, patient)?;
            for (k, s) in samples.iter().enumerate() {
                let f = s.svd()?;
                for w in f.s.windows(2) {
                    min_gap2 = min_gap2.min((w[0] * w[0] - w[1] * w[1]).abs());
                }
                if k < 2 {
                    let fmt: Vec<String> = f.s.iter().map(|v| format!("{v:.3}")).collect();
                    println!("  patient {id} visit {k} sigma [{}] nuc {:.3}", fmt.join(", "), f.nuclear_norm());
                }
            }
        }
        println!("  min |s_i^2 - s_j^2| over 4 train patients: {min_gap2:.6}");
    }
    Ok(())
}
