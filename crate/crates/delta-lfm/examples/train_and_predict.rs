//! The whole pipeline in miniature: generate a cohort, train the
//! aligned autoencoder, train the velocity field over its latents, then
//! integrate a held-out patient's first scan forward and score the
//! prediction against the truly observed follow-up.
//!
//! Run with: cargo run --release --example train_and_predict

use delta_lfm::cli::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use delta_lfm::cohort::{generate_cohort, split_cohort, CohortConfig};
use delta_lfm::flow::{encode_patients, train_flow, FlowConfig, FlowTrainConfig, PatientAttrs};
use delta_lfm::integrate::{predict_followup, ModelBundle};
use delta_lfm::latent::{train_autoencoder, AeTrainConfig, AutoencoderConfig};
use delta_lfm::metrics::{delta_rmae, psnr};
use delta_lfm::Result;

fn main() -> Result<()> {
    let cohort = generate_cohort(&CohortConfig {
        n_patients: 12,
        visit_range: (4, 5),
        width: 16,
        height: 16,
        seed: 3,
        ..CohortConfig::default()
    })?;
    let split = split_cohort(&cohort, (0.75, 0.0, 0.25), 1)?;
    println!(
        "cohort: {} patients ({} train / {} held out)",
        cohort.patients.len(),
        split.train.len(),
        split.test.len()
    );

    let ae_config = AutoencoderConfig {
        width: 16,
        height: 16,
        hidden: 24,
        latent_rows: 4,
        latent_cols: 4,
        ..AutoencoderConfig::default()
    };
    println!("training autoencoder ...");
    let (ae, ae_history) =
        train_autoencoder(&cohort, &split.train, &ae_config, &AeTrainConfig {
            epochs: 30,
            seed: 5,
            ..AeTrainConfig::default()
        })?;
    println!("  final reconstruction loss {:.5}", ae_history.last().expect("epochs ran").reconstruction);

    let flow_config = FlowConfig {
        latent_rows: 4,
        latent_cols: 4,
        hidden: 32,
        cond_hidden: 16,
        dt: 0.1,
        ..FlowConfig::default()
    };
    println!("training velocity field on the frozen latents ...");
    let encoded = encode_patients(&ae, &cohort, &split.train)?;
    let (velocity, flow_history) = train_flow(&encoded, &flow_config, &FlowTrainConfig {
        epochs: 60,
        seed: 11,
        ..FlowTrainConfig::default()
    })?;
    println!("  flow-matching loss {:.5} -> {:.5}", flow_history[0].fm_loss, flow_history.last().expect("epochs ran").fm_loss);

    // Persist and reload the trained pair; the round trip is exact.
    let dir = tempfile::tempdir().expect("temp dir");
    let ckpt_path = dir.path().join("model.ckpt");
    save_checkpoint(
        &ckpt_path,
        &ae,
        Some(&velocity),
        &AeTrainConfig::default().arcrank,
        &Provenance { config_hash: "example".into(), seed: 5, ae_epochs: 30, flow_epochs: Some(60) },
    )?;
    let bundle: ModelBundle = load_checkpoint(&ckpt_path)?.bundle()?;
    println!("checkpoint round-tripped through {}", ckpt_path.display());

    // Predict each held-out patient's last visit from their first.
    println!("\nheld-out predictions (score 0 is perfect, 2 is worst, copy-forward scores 2):");
    println!(
        "{:>4} {:>11} {:>9} {:>8} {:>12} {:>12}",
        "id", "from -> to", "steps", "psnr", "model score", "copy score"
    );
    let mut model_scores = Vec::new();
    for &id in &split.test {
        let patient = cohort.patient(id).expect("id from split");
        let source = &patient.visits[0];
        let target = patient.visits.last().expect("has visits");
        let (predicted, traj) = predict_followup(
            &bundle,
            &source.image,
            &PatientAttrs::from(patient),
            source.age,
            target.age,
            0,
        )?;
        let model_score = delta_rmae(&source.image, &target.image, &predicted)?;
        let copy_score = delta_rmae(&source.image, &target.image, &source.image)?;
        let quality = psnr(&target.image, &predicted, 1.0)?;
        println!(
            "{:>4} {:>4.1}->{:>4.1} {:>9} {:>7.2}dB {:>12.4} {:>12.4}",
            id,
            source.age,
            target.age,
            traj.steps_per_segment.iter().sum::<usize>(),
            quality.db,
            model_score,
            copy_score
        );
        model_scores.push(model_score);
    }
    let mean: f64 = model_scores.iter().sum::<f64>() / model_scores.len() as f64;
    println!("\nmean model score {mean:.4} (the copy-forward reference sits at 2.0)");
    Ok(())
}
