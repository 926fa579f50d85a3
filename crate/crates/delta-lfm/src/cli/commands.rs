//! The eight pipeline commands. Each one is deterministic given its
//! config and inputs, and stamps the governing config hash into every
//! artifact it writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifacts::{residual_map, sig9, sig9_opt, write_csv, write_pgm, write_text};
use super::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use super::{AblateVariant, ExperimentConfig, SplitFractions};
use crate::cohort::{generate_cohort, load_cohort, save_cohort, split_cohort, Cohort, ScanImage};
use crate::error::{DlfmError, Result};
use crate::flow::{encode_patients, train_flow, PatientAttrs};
use crate::gradcore::svd_thin;
use crate::gradcore::Tensor;
use crate::integrate::{predict_followup, predict_trajectory};
use crate::latent::{encode_visits, train_autoencoder, AeEpochStats};
use crate::metrics::{
    delta_rmae, psnr, region_mae, sensitivity_table, stratify_by_horizon, HorizonBucket,
    MetricReport, SensitivityScenario, Stat,
};

pub const SPLIT_FILE: &str = "split.json";
pub const SPLIT_FORMAT_VERSION: u32 = 1;

/// The persisted train/val/test assignment, `split.json` in the data
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDoc {
    pub format_version: u32,
    /// Hash of the experiment config that generated the data.
    pub config_hash: String,
    pub fractions: SplitFractions,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitDoc {
    pub fn subset(&self, name: &str) -> Result<&[u32]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(DlfmError::InvalidInput(format!(
                "unknown split {other:?}, expected train, val or test"
            ))),
        }
    }
}

/// Loads the cohort and its split from a gen-data output directory.
pub fn load_data_dir(dir: &Path) -> Result<(Cohort, SplitDoc)> {
    let cohort = load_cohort(dir)?;
    let split_path = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&split_path)
        .map_err(|e| DlfmError::io(format!("reading {}", split_path.display()), e))?;
    let split: SplitDoc = serde_json::from_str(&text)?;
    if split.format_version != SPLIT_FORMAT_VERSION {
        return Err(DlfmError::Format(format!(
            "split format_version {} is not supported (expected {SPLIT_FORMAT_VERSION})",
            split.format_version
        )));
    }
    Ok((cohort, split))
}

/// The passed config with the on-disk cohort settings adopted, so hashes
/// always describe the data actually used. Errors when shapes clash.
fn effective_config(config: &ExperimentConfig, cohort: &Cohort) -> Result<ExperimentConfig> {
    let mut effective = config.clone();
    effective.cohort = cohort.config.clone();
    effective.validate()?;
    Ok(effective)
}

fn write_config_copy(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    write_text(&dir.join("config.json"), &text)
}

/// Generates the synthetic cohort and its patient-level split.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let cohort = generate_cohort(&config.cohort)?;
    let split = split_cohort(
        &cohort,
        (config.split.train, config.split.val, config.split.test),
        config.split.seed,
    )?;
    save_cohort(&cohort, out)?;
    let doc = SplitDoc {
        format_version: SPLIT_FORMAT_VERSION,
        config_hash: config.hash()?,
        fractions: config.split,
        train: split.train,
        val: split.val,
        test: split.test,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_text(&out.join(SPLIT_FILE), &text)?;
    log::info!(
        "generated {} patients / {} visits into {} (split {}/{}/{})",
        cohort.patients.len(),
        cohort.total_visits(),
        out.display(),
        doc.train.len(),
        doc.val.len(),
        doc.test.len()
    );
    Ok(())
}

fn ae_history_rows(history: &[AeEpochStats]) -> Vec<String> {
    history
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{}",
                s.epoch,
                sig9(s.reconstruction),
                sig9(s.kl),
                sig9_opt(s.arc),
                sig9_opt(s.rank),
                sig9_opt(s.pull)
            )
        })
        .collect()
}

/// Trains the autoencoder on the train split and writes `ae.ckpt`,
/// `history.csv`, and the materialized config into `out`.
pub fn cmd_train_ae(
    config: &ExperimentConfig,
    data: &Path,
    out: &Path,
) -> Result<Vec<AeEpochStats>> {
    let (cohort, split) = load_data_dir(data)?;
    let config = effective_config(config, &cohort)?;
    let hash = config.hash()?;

    log::info!(
        "training autoencoder on {} patients for {} epochs",
        split.train.len(),
        config.ae_train.epochs
    );
    let (params, history) =
        train_autoencoder(&cohort, &split.train, &config.autoencoder, &config.ae_train)?;

    let provenance = Provenance {
        config_hash: hash,
        seed: config.ae_train.seed,
        ae_epochs: config.ae_train.epochs,
        flow_epochs: None,
    };
    save_checkpoint(&out.join("ae.ckpt"), &params, None, &config.ae_train.arcrank, &provenance)?;
    write_csv(&out.join("history.csv"), "epoch,recon,kl,arc,rank,pull", &ae_history_rows(&history))?;
    write_config_copy(out, &config)?;
    if let Some(last) = history.last() {
        log::info!("final epoch: recon {:.6}, kl {:.6}, total {:.6}", last.reconstruction, last.kl, last.total);
    }
    Ok(history)
}

/// Trains the velocity field on the frozen autoencoder and writes the
/// combined `model.ckpt`, `history.csv`, and config into `out`.
pub fn cmd_train_flow(
    config: &ExperimentConfig,
    data: &Path,
    ae_path: &Path,
    out: &Path,
) -> Result<Vec<crate::flow::FlowEpochStats>> {
    let (cohort, split) = load_data_dir(data)?;
    let config = effective_config(config, &cohort)?;
    let hash = config.hash()?;

    let ae_ckpt = load_checkpoint(ae_path)?;
    let ae_cfg = &ae_ckpt.autoencoder.config;
    if ae_cfg.latent_rows != config.flow.latent_rows
        || ae_cfg.latent_cols != config.flow.latent_cols
    {
        return Err(DlfmError::InvalidInput(format!(
            "velocity net expects {}x{} latents but the checkpointed autoencoder produces {}x{}",
            config.flow.latent_rows, config.flow.latent_cols, ae_cfg.latent_rows, ae_cfg.latent_cols
        )));
    }

    let encoded = encode_patients(&ae_ckpt.autoencoder, &cohort, &split.train)?;
    log::info!(
        "training velocity field on {} patients for {} epochs",
        encoded.len(),
        config.flow_train.epochs
    );
    let (velocity, history) = train_flow(&encoded, &config.flow, &config.flow_train)?;

    let provenance = Provenance {
        config_hash: hash,
        seed: config.flow_train.seed,
        ae_epochs: ae_ckpt.header.provenance.ae_epochs,
        flow_epochs: Some(config.flow_train.epochs),
    };
    save_checkpoint(
        &out.join("model.ckpt"),
        &ae_ckpt.autoencoder,
        Some(&velocity),
        &ae_ckpt.header.arcrank,
        &provenance,
    )?;
    let rows: Vec<String> =
        history.iter().map(|s| format!("{},{}", s.epoch, sig9(s.fm_loss))).collect();
    write_csv(&out.join("history.csv"), "epoch,fm", &rows)?;
    write_config_copy(out, &config)?;
    if let Some(last) = history.last() {
        log::info!("final epoch: fm {:.6}", last.fm_loss);
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub patient: u32,
    pub source_visit: usize,
    pub target_ages: Vec<f64>,
    pub horizon: Option<f64>,
    pub interval: f64,
    pub sde_seed: u64,
}

#[derive(Debug, Serialize)]
struct PredictionEntry {
    target_age: f64,
    horizon_years: f64,
    steps: usize,
    prediction: String,
    progression: String,
    ground_truth_age: Option<f64>,
    residual: Option<String>,
}

#[derive(Debug, Serialize)]
struct PredictionManifest {
    format_version: u32,
    config_hash: String,
    patient_id: u32,
    source_age: f64,
    sde_seed: u64,
    mode: &'static str,
    source_image: String,
    entries: Vec<PredictionEntry>,
}

/// Matches a predicted age to an observed visit, if one exists.
fn matching_visit<'a>(
    record: &'a crate::cohort::PatientRecord,
    age: f64,
) -> Option<&'a crate::cohort::Visit> {
    record.visits.iter().find(|v| (v.age - age).abs() < 1e-6)
}

/// Predicts future scans for one patient. Writes a predicted image per
/// target age, a change map against the source scan, a residual map
/// against the ground truth whenever the target age matches an observed
/// visit, and a JSON manifest tying them together.
pub fn cmd_predict(model: &Path, data: &Path, out: &Path, opts: PredictOptions) -> Result<()> {
    if opts.horizon.is_some() && !opts.target_ages.is_empty() {
        return Err(DlfmError::InvalidInput(
            "pass either --target-age or --horizon, not both".into(),
        ));
    }
    if opts.horizon.is_none() && opts.target_ages.is_empty() {
        return Err(DlfmError::InvalidInput(
            "pass at least one --target-age or a --horizon".into(),
        ));
    }
    let ckpt = load_checkpoint(model)?;
    let bundle = ckpt.bundle()?;
    let (cohort, _) = load_data_dir(data)?;
    let record = cohort.patient(opts.patient).ok_or_else(|| {
        DlfmError::InvalidInput(format!("patient {} not in cohort", opts.patient))
    })?;
    let source = record.visits.get(opts.source_visit).ok_or_else(|| {
        DlfmError::InvalidInput(format!(
            "patient {} has {} visits, no index {}",
            opts.patient,
            record.visits.len(),
            opts.source_visit
        ))
    })?;
    let attrs = PatientAttrs::from(record);
    let hash = ckpt.header.provenance.config_hash.clone();

    let (mode, ages, images, steps): (&'static str, Vec<f64>, Vec<ScanImage>, Vec<usize>) =
        match opts.horizon {
            Some(horizon) => {
                let traj = predict_trajectory(
                    &bundle,
                    &source.image,
                    &attrs,
                    source.age,
                    horizon,
                    opts.interval,
                    opts.sde_seed,
                )?;
                ("trajectory", traj.query_ages, traj.images, traj.steps_per_segment)
            }
            None => {
                let mut ages = opts.target_ages.clone();
                ages.sort_by(f64::total_cmp);
                let mut images = Vec::with_capacity(ages.len());
                let mut steps = Vec::with_capacity(ages.len());
                for &age in &ages {
                    let (image, traj) = predict_followup(
                        &bundle,
                        &source.image,
                        &attrs,
                        source.age,
                        age,
                        opts.sde_seed,
                    )?;
                    images.push(image);
                    steps.push(traj.steps_per_segment.iter().sum());
                }
                ("followup", ages, images, steps)
            }
        };

    let source_name = format!("source_age_{:.2}.pgm", source.age);
    write_pgm(&out.join(&source_name), &source.image, &hash)?;
    let mut entries = Vec::with_capacity(ages.len());
    for ((&age, image), &n_steps) in ages.iter().zip(&images).zip(&steps) {
        let pred_name = format!("pred_age_{age:.2}.pgm");
        write_pgm(&out.join(&pred_name), image, &hash)?;
        let prog_name = format!("progression_age_{age:.2}.pgm");
        write_pgm(&out.join(&prog_name), &residual_map(image, &source.image)?, &hash)?;
        let (gt_age, residual) = match matching_visit(record, age) {
            None => (None, None),
            Some(visit) => {
                let res_name = format!("residual_age_{age:.2}.pgm");
                write_pgm(&out.join(&res_name), &residual_map(image, &visit.image)?, &hash)?;
                (Some(visit.age), Some(res_name))
            }
        };
        entries.push(PredictionEntry {
            target_age: age,
            horizon_years: age - source.age,
            steps: n_steps,
            prediction: pred_name,
            progression: prog_name,
            ground_truth_age: gt_age,
            residual,
        });
    }
    let manifest = PredictionManifest {
        format_version: 1,
        config_hash: hash,
        patient_id: opts.patient,
        source_age: source.age,
        sde_seed: opts.sde_seed,
        mode,
        source_image: source_name,
        entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_text(&out.join("prediction.json"), &text)?;
    log::info!("wrote {} predictions for patient {} into {}", ages.len(), opts.patient, out.display());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub split: String,
    /// Score the copy-forward reference instead of the model.
    pub copy_baseline: bool,
}

/// Headline numbers of one evaluation, also persisted in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOutcome {
    pub config_hash: String,
    pub n_pairs: usize,
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub delta_rmae: Stat,
}

#[derive(Debug, Serialize)]
struct EvaluationSummary<'a> {
    format_version: u32,
    config_hash: &'a str,
    split: &'a str,
    predictor: &'a str,
    n_pairs: usize,
    psnr_db: Stat,
    ssim: Stat,
    delta_rmae: Stat,
    region_mae_mean: Option<Stat>,
    by_horizon: &'a [HorizonBucket],
}

fn stat_of(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

/// Scores predictions over every ordered visit pair of one split and
/// writes `metrics.csv` plus `summary.json` into `out`.
pub fn cmd_evaluate(
    model: &Path,
    data: &Path,
    out: &Path,
    opts: EvaluateOptions,
) -> Result<EvaluateOutcome> {
    let ckpt = load_checkpoint(model)?;
    let bundle = if opts.copy_baseline { None } else { Some(ckpt.bundle()?) };
    let (cohort, split) = load_data_dir(data)?;
    let mut ids: Vec<u32> = split.subset(&opts.split)?.to_vec();
    ids.sort_unstable();
    let hash = ckpt.header.provenance.config_hash.clone();

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &id in &ids {
        let record = cohort
            .patient(id)
            .ok_or_else(|| DlfmError::InvalidInput(format!("patient {id} not in cohort")))?;
        let attrs = PatientAttrs::from(record);
        for i in 0..record.visits.len() {
            for j in (i + 1)..record.visits.len() {
                let (source, target) = (&record.visits[i], &record.visits[j]);
                let predicted: ScanImage = match &bundle {
                    None => source.image.clone(),
                    Some(bundle) => {
                        predict_followup(bundle, &source.image, &attrs, source.age, target.age, 0)?
                            .0
                    }
                };
                let p = psnr(&target.image, &predicted, 1.0)?;
                let s = crate::metrics::ssim(&target.image, &predicted)?;
                let mae = region_mae(&target.image, &predicted, &target.masks)?;
                let score = delta_rmae(&source.image, &target.image, &predicted)?;
                let report = MetricReport {
                    patient_id: id,
                    horizon_years: target.age - source.age,
                    psnr_db: p.db,
                    psnr_exact: p.exact_match,
                    ssim: s,
                    region_mae: mae,
                    delta_rmae: score,
                };
                rows.push(format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    id,
                    sig9(source.age),
                    sig9(target.age),
                    sig9(report.horizon_years),
                    sig9(report.psnr_db),
                    report.psnr_exact,
                    sig9(report.ssim),
                    sig9_opt(report.region_mae.ventricle),
                    sig9_opt(report.region_mae.hippocampus),
                    sig9_opt(report.region_mae.cortex),
                    sig9_opt(report.region_mae.mean),
                    sig9(report.delta_rmae),
                    hash,
                ));
                reports.push(report);
            }
        }
    }
    if reports.is_empty() {
        return Err(DlfmError::InvalidInput(format!(
            "split {:?} has no visit pairs to evaluate",
            opts.split
        )));
    }

    write_csv(
        &out.join("metrics.csv"),
        "patient_id,source_age,target_age,horizon_years,psnr_db,psnr_exact,ssim,\
         mae_ventricle,mae_hippocampus,mae_cortex,mae_mean,delta_rmae,config_hash",
        &rows,
    )?;

    let by_horizon = stratify_by_horizon(&reports);
    let maes: Vec<f64> = reports.iter().filter_map(|r| r.region_mae.mean).collect();
    let outcome = EvaluateOutcome {
        config_hash: hash.clone(),
        n_pairs: reports.len(),
        psnr_db: stat_of(&reports.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
        ssim: stat_of(&reports.iter().map(|r| r.ssim).collect::<Vec<_>>()),
        delta_rmae: stat_of(&reports.iter().map(|r| r.delta_rmae).collect::<Vec<_>>()),
    };
    let summary = EvaluationSummary {
        format_version: 1,
        config_hash: &hash,
        split: &opts.split,
        predictor: if opts.copy_baseline { "copy" } else { "model" },
        n_pairs: outcome.n_pairs,
        psnr_db: outcome.psnr_db,
        ssim: outcome.ssim,
        delta_rmae: outcome.delta_rmae,
        region_mae_mean: if maes.is_empty() { None } else { Some(stat_of(&maes)) },
        by_horizon: &by_horizon,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&out.join("summary.json"), &text)?;
    log::info!(
        "evaluated {} pairs on split {:?}: mean residual score {:.4}, mean psnr {:.2} dB",
        outcome.n_pairs,
        opts.split,
        outcome.delta_rmae.mean,
        outcome.psnr_db.mean
    );
    Ok(outcome)
}

/// Exports one row per scan: identifiers, the nuclear norm, the
/// flattened left singular vectors, and a 2-D principal-component
/// projection of the latent itself.
pub fn cmd_export_latents(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let (cohort, _) = load_data_dir(data)?;
    let hash = &ckpt.header.provenance.config_hash;
    let latent_len = ckpt.autoencoder.config.latent_len();

    struct Row {
        patient_id: u32,
        age: f64,
        status: u8,
        nuclear: f64,
        u_flat: Vec<f64>,
        z_flat: Vec<f64>,
    }
    let mut entries = Vec::new();
    for record in &cohort.patients {
        let samples = encode_visits(&ckpt.autoencoder, record)?;
        for (visit, sample) in record.visits.iter().zip(samples) {
            let factors = sample.svd()?;
            entries.push(Row {
                patient_id: record.id,
                age: visit.age,
                status: record.status,
                nuclear: factors.nuclear_norm(),
                u_flat: factors.u.data().to_vec(),
                z_flat: sample.z.data().to_vec(),
            });
        }
    }
    if entries.is_empty() {
        return Err(DlfmError::InvalidInput("cohort has no visits to export".into()));
    }

    // Principal components of the flattened latents: center, thin-SVD,
    // then score by u[:, k] * s[k]. A rank-deficient second direction
    // degrades to zero.
    let n = entries.len();
    let mut centered = Vec::with_capacity(n * latent_len);
    let mut means = vec![0.0; latent_len];
    for row in &entries {
        for (m, v) in means.iter_mut().zip(&row.z_flat) {
            *m += v / n as f64;
        }
    }
    for row in &entries {
        centered.extend(row.z_flat.iter().zip(&means).map(|(v, m)| v - m));
    }
    let factors = svd_thin(&Tensor::new(n, latent_len, centered)?)?;
    let score = |i: usize, k: usize| -> f64 {
        if k < factors.s.len() && factors.s[k] > 0.0 {
            factors.u.at(i, k) * factors.s[k]
        } else {
            0.0
        }
    };

    let u_cols: Vec<String> = (0..entries[0].u_flat.len()).map(|k| format!("u{k}")).collect();
    let header = format!(
        "patient_id,age,status,nuclear_norm,{},pca_x,pca_y,config_hash",
        u_cols.join(",")
    );
    let rows: Vec<String> = entries
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let u_cells: Vec<String> = row.u_flat.iter().map(|&v| sig9(v)).collect();
            format!(
                "{},{},{},{},{},{},{},{}",
                row.patient_id,
                sig9(row.age),
                row.status,
                sig9(row.nuclear),
                u_cells.join(","),
                sig9(score(i, 0)),
                sig9(score(i, 1)),
                hash,
            )
        })
        .collect();
    write_csv(&out.join("latents.csv"), &header, &rows)?;
    log::info!("exported {} latent rows into {}", entries.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SensitivityMeta {
    format_version: u32,
    /// Hash of the parameters below, mirroring the config hashes that
    /// other artifacts carry.
    config_hash: String,
    scenario: &'static str,
    sigma_grid: Vec<f64>,
    n_pixels: usize,
    n_trials: usize,
    seed: u64,
}

/// Tabulates how additive noise on the true change shifts the residual
/// score in its worst-case scenario. Writes `sensitivity.csv` with the
/// fixed four columns and a JSON sidecar with the run parameters.
pub fn cmd_sensitivity(out: &Path, trials: usize, pixels: usize, seed: u64) -> Result<()> {
    let grid = crate::metrics::default_sigma_grid();
    let table =
        sensitivity_table(&grid, pixels, trials, SensitivityScenario::OpposedResiduals, seed)?;
    let rows: Vec<String> = table
        .iter()
        .map(|r| format!("{},{},{},{}", sig9(r.sigma), sig9(r.mean), sig9(r.std), sig9(r.bias)))
        .collect();
    write_csv(&out.join("sensitivity.csv"), "sigma,mean,std,bias", &rows)?;

    let params = serde_json::json!({
        "scenario": "opposed",
        "sigma_grid": grid,
        "n_pixels": pixels,
        "n_trials": trials,
        "seed": seed,
    });
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&params)?.as_bytes());
    let meta = SensitivityMeta {
        format_version: 1,
        config_hash: format!("{:x}", hasher.finalize()),
        scenario: "opposed",
        sigma_grid: grid,
        n_pixels: pixels,
        n_trials: trials,
        seed,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_text(&out.join("sensitivity_meta.json"), &text)?;
    log::info!("wrote {}-point sensitivity table into {}", table.len(), out.display());
    Ok(())
}

/// Runs one named variant end to end (data reuse, autoencoder, flow,
/// test-split evaluation) and upserts its row in `ablations.csv`.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    out: &Path,
    variant: AblateVariant,
    data: Option<&Path>,
) -> Result<()> {
    let config = variant.apply(config.clone());
    let data_dir: PathBuf = match data {
        Some(dir) => dir.to_path_buf(),
        None => {
            let dir = out.join("data");
            if !dir.join(SPLIT_FILE).exists() {
                cmd_gen_data(&config, &dir)?;
            }
            dir
        }
    };
    let vdir = out.join(variant.slug());
    cmd_train_ae(&config, &data_dir, &vdir.join("ae"))?;
    cmd_train_flow(&config, &data_dir, &vdir.join("ae").join("ae.ckpt"), &vdir.join("flow"))?;
    let outcome = cmd_evaluate(
        &vdir.join("flow").join("model.ckpt"),
        &data_dir,
        &vdir.join("eval"),
        EvaluateOptions { split: "test".into(), copy_baseline: false },
    )?;

    let table = out.join("ablations.csv");
    let header = "variant,config_hash,n_pairs,delta_rmae_mean,delta_rmae_std,psnr_db_mean,ssim_mean";
    let mut rows: Vec<String> = match fs::read_to_string(&table) {
        Err(_) => Vec::new(),
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|line| !line.is_empty() && line.split(',').next() != Some(variant.slug()))
            .map(str::to_owned)
            .collect(),
    };
    rows.push(format!(
        "{},{},{},{},{},{},{}",
        variant.slug(),
        outcome.config_hash,
        outcome.n_pairs,
        sig9(outcome.delta_rmae.mean),
        sig9(outcome.delta_rmae.std),
        sig9(outcome.psnr_db.mean),
        sig9(outcome.ssim.mean),
    ));
    write_csv(&table, header, &rows)?;
    log::info!(
        "variant {} scored mean residual {:.4} over {} pairs",
        variant.slug(),
        outcome.delta_rmae.mean,
        outcome.n_pairs
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::CohortConfig;
    use crate::flow::FlowConfig;
    use crate::latent::AutoencoderConfig;

    /// A configuration small enough to train inside a unit test.
    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.cohort = CohortConfig {
            n_patients: 6,
            visit_range: (3, 4),
            width: 16,
            height: 16,
            seed: 11,
            ..CohortConfig::default()
        };
        config.split = SplitFractions { train: 0.5, val: 0.0, test: 0.5, seed: 2 };
        config.autoencoder = AutoencoderConfig {
            width: 16,
            height: 16,
            hidden: 10,
            latent_rows: 4,
            latent_cols: 4,
            ..AutoencoderConfig::default()
        };
        config.ae_train.epochs = 2;
        config.flow = FlowConfig {
            latent_rows: 4,
            latent_cols: 4,
            hidden: 8,
            cond_hidden: 6,
            embed_dim: 4,
            dt: 0.5,
            ..FlowConfig::default()
        };
        config.flow_train.epochs = 2;
        config
    }

    #[test]
    fn pipeline_runs_end_to_end_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let data = dir.path().join("data");
        cmd_gen_data(&config, &data).unwrap();
        let split_bytes = fs::read(data.join(SPLIT_FILE)).unwrap();

        let (cohort, split) = load_data_dir(&data).unwrap();
        assert_eq!(cohort.patients.len(), 6);
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 6);

        let ae_dir = dir.path().join("ae");
        cmd_train_ae(&config, &data, &ae_dir).unwrap();
        let ae_bytes = fs::read(ae_dir.join("ae.ckpt")).unwrap();
        let history = fs::read_to_string(ae_dir.join("history.csv")).unwrap();
        assert!(history.starts_with("epoch,recon,kl,arc,rank,pull\n"));
        assert_eq!(history.lines().count(), 1 + config.ae_train.epochs);

        let flow_dir = dir.path().join("flow");
        cmd_train_flow(&config, &data, &ae_dir.join("ae.ckpt"), &flow_dir).unwrap();
        let model = flow_dir.join("model.ckpt");
        let flow_history = fs::read_to_string(flow_dir.join("history.csv")).unwrap();
        assert!(flow_history.starts_with("epoch,fm\n"));

        // Reruns must reproduce every artifact byte for byte.
        cmd_gen_data(&config, &data).unwrap();
        assert_eq!(fs::read(data.join(SPLIT_FILE)).unwrap(), split_bytes);
        cmd_train_ae(&config, &data, &ae_dir).unwrap();
        assert_eq!(fs::read(ae_dir.join("ae.ckpt")).unwrap(), ae_bytes);

        let eval_dir = dir.path().join("eval");
        let outcome = cmd_evaluate(
            &model,
            &data,
            &eval_dir,
            EvaluateOptions { split: "test".into(), copy_baseline: false },
        )
        .unwrap();
        assert!(outcome.n_pairs >= 3, "3-4 visits give at least 3 ordered pairs per patient");
        let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + outcome.n_pairs);
        assert!(metrics.lines().nth(1).unwrap().ends_with(&outcome.config_hash));

        let copy = cmd_evaluate(
            &model,
            &data,
            &dir.path().join("eval_copy"),
            EvaluateOptions { split: "test".into(), copy_baseline: true },
        )
        .unwrap();
        assert!((copy.delta_rmae.mean - 2.0).abs() < 1e-9, "copy-forward scores exactly 2");

        let latents_dir = dir.path().join("latents");
        cmd_export_latents(&model, &data, &latents_dir).unwrap();
        let latents = fs::read_to_string(latents_dir.join("latents.csv")).unwrap();
        let header = latents.lines().next().unwrap();
        assert!(header.starts_with("patient_id,age,status,nuclear_norm,u0,"));
        assert!(header.ends_with("pca_x,pca_y,config_hash"));
        assert_eq!(latents.lines().count(), 1 + cohort.total_visits());

        let pred_dir = dir.path().join("pred");
        let patient = split.test[0];
        let source_age = cohort.patient(patient).unwrap().visits[0].age;
        let target_age = cohort.patient(patient).unwrap().visits[1].age;
        cmd_predict(
            &model,
            &data,
            &pred_dir,
            PredictOptions {
                patient,
                source_visit: 0,
                target_ages: vec![target_age],
                horizon: None,
                interval: 1.0,
                sde_seed: 0,
            },
        )
        .unwrap();
        assert!(pred_dir.join(format!("pred_age_{target_age:.2}.pgm")).exists());
        assert!(
            pred_dir.join(format!("residual_age_{target_age:.2}.pgm")).exists(),
            "target age matches an observed visit, so a residual map is written"
        );
        assert!(pred_dir.join(format!("source_age_{source_age:.2}.pgm")).exists());
        let manifest = fs::read_to_string(pred_dir.join("prediction.json")).unwrap();
        assert!(manifest.contains("\"mode\": \"followup\""));
    }

    #[test]
    fn sensitivity_writes_the_fixed_schema() {
        let dir = tempfile::tempdir().unwrap();
        cmd_sensitivity(dir.path(), 8, 64, 3).unwrap();
        let text = fs::read_to_string(dir.path().join("sensitivity.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sigma,mean,std,bias"));
        assert_eq!(text.lines().count(), 22, "21 grid points plus the header");
        let first = text.lines().nth(1).unwrap();
        assert!(first.starts_with("0.00000000e0,2.00000000e0,0.00000000e0,0.00000000e0"));
        assert!(dir.path().join("sensitivity_meta.json").exists());
    }

    #[test]
    fn predict_rejects_contradictory_targets() {
        let opts = PredictOptions {
            patient: 0,
            source_visit: 0,
            target_ages: vec![70.0],
            horizon: Some(5.0),
            interval: 1.0,
            sde_seed: 0,
        };
        let err = cmd_predict(Path::new("x"), Path::new("y"), Path::new("z"), opts).unwrap_err();
        assert!(err.to_string().contains("not both"));

        let neither = PredictOptions {
            patient: 0,
            source_visit: 0,
            target_ages: vec![],
            horizon: None,
            interval: 1.0,
            sde_seed: 0,
        };
        let err =
            cmd_predict(Path::new("x"), Path::new("y"), Path::new("z"), neither).unwrap_err();
        assert!(err.to_string().contains("at least one"));
    }
}
