//! The experiment pipeline behind the `delta-lfm` binary: configuration,
//! subcommand dispatch, checkpoints, and file exports.
//!
//! Every subcommand is a pure function of its config and seeds; rerunning
//! with the same inputs rewrites byte-identical artifacts. Exit codes:
//! 0 success, 1 validation error, 2 I/O or file-format error.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;

pub use artifacts::{residual_map, sig9, sig9_opt, write_csv, write_pgm};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, Provenance, TensorMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use commands::{
    cmd_evaluate, cmd_export_latents, cmd_gen_data, cmd_predict, cmd_sensitivity, cmd_train_ae,
    cmd_train_flow, EvaluateOptions, EvaluateOutcome, PredictOptions,
};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::CohortConfig;
use crate::error::{DlfmError, Result};
use crate::flow::{FlowConfig, FlowTrainConfig, SamplingMode};
use crate::latent::{AeTrainConfig, ArcTerm, AutoencoderConfig, RankTerm};

/// How patients are divided between training, validation, and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.80, val: 0.05, test: 0.15, seed: 1 }
    }
}

/// Everything one experiment run needs, serialized as a single JSON file.
/// Missing fields take the defaults below, which are also what a missing
/// config file means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub cohort: CohortConfig,
    pub split: SplitFractions,
    pub autoencoder: AutoencoderConfig,
    pub ae_train: AeTrainConfig,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(DlfmError::InvalidInput(format!(
                "split fractions must be nonnegative and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.split.validate()?;
        self.autoencoder.validate()?;
        self.ae_train.arcrank.validate()?;
        self.flow.validate()?;
        if self.autoencoder.width != self.cohort.width
            || self.autoencoder.height != self.cohort.height
        {
            return Err(DlfmError::InvalidInput(format!(
                "autoencoder expects {}x{} images but the cohort renders {}x{}",
                self.autoencoder.width, self.autoencoder.height, self.cohort.width, self.cohort.height
            )));
        }
        if self.flow.latent_rows != self.autoencoder.latent_rows
            || self.flow.latent_cols != self.autoencoder.latent_cols
        {
            return Err(DlfmError::InvalidInput(format!(
                "velocity net expects {}x{} latents but the autoencoder produces {}x{}",
                self.flow.latent_rows,
                self.flow.latent_cols,
                self.autoencoder.latent_rows,
                self.autoencoder.latent_cols
            )));
        }
        Ok(())
    }

    /// SHA-256 of the fully materialized config JSON; stamped into every
    /// artifact so outputs can be traced to the exact settings.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Loads the config file, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| DlfmError::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text)?
        }
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FmSamplingArg {
    /// Flow time is elapsed years in [0, T].
    Temporal,
    /// Flow time is normalized to [0, 1].
    Physical,
}

impl FmSamplingArg {
    pub fn mode(self) -> SamplingMode {
        match self {
            FmSamplingArg::Temporal => SamplingMode::Temporal0T,
            FmSamplingArg::Physical => SamplingMode::Physical01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    /// Predict the source scan unchanged at every horizon.
    Copy,
}

/// Named training variants for side-by-side comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateVariant {
    /// The full method as configured.
    Default,
    /// Drop the orientation term.
    NoArc,
    /// Drop the magnitude terms.
    NoRank,
    /// Swap the orientation term for cosine distance on raw latents.
    Cosine,
    /// Swap the magnitude hinge for the bare one-sided penalty.
    SimpleRank,
    /// Train the flow on normalized [0, 1] time.
    FmPhysical,
    /// Drop patient attributes from the condition vector.
    Unconditional,
}

impl AblateVariant {
    pub fn slug(self) -> &'static str {
        match self {
            AblateVariant::Default => "default",
            AblateVariant::NoArc => "no-arc",
            AblateVariant::NoRank => "no-rank",
            AblateVariant::Cosine => "cosine",
            AblateVariant::SimpleRank => "simple-rank",
            AblateVariant::FmPhysical => "fm-physical",
            AblateVariant::Unconditional => "unconditional",
        }
    }

    /// Rewrites a base config into this variant's config.
    pub fn apply(self, mut config: ExperimentConfig) -> ExperimentConfig {
        match self {
            AblateVariant::Default => {}
            AblateVariant::NoArc => config.ae_train.arcrank.lambda_arc = 0.0,
            AblateVariant::NoRank => config.ae_train.arcrank.lambda_rank = 0.0,
            AblateVariant::Cosine => config.ae_train.arc_term = ArcTerm::Cosine,
            AblateVariant::SimpleRank => config.ae_train.rank_term = RankTerm::Simple,
            AblateVariant::FmPhysical => config.flow.sampling_mode = SamplingMode::Physical01,
            AblateVariant::Unconditional => config.flow.conditioning_enabled = false,
        }
        config
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "delta-lfm",
    about = "Latent flow matching for longitudinal image progression",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort and its train/val/test split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the cohort seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the autoencoder with the trajectory-alignment objective.
    TrainAe {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the autoencoder training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the orientation term.
        #[arg(long)]
        no_arc: bool,
        /// Drop the magnitude terms.
        #[arg(long)]
        no_rank: bool,
        /// Use cosine distance on raw latents instead of the
        /// orientation term.
        #[arg(long)]
        cosine: bool,
        /// Use the bare one-sided magnitude penalty instead of the
        /// hinge-plus-pull pair.
        #[arg(long)]
        simple_rank: bool,
    },
    /// Train the velocity field on the frozen autoencoder's latents.
    TrainFlow {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Autoencoder checkpoint from train-ae.
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the flow training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Flow-time convention for training samples.
        #[arg(long, value_enum)]
        fm_sampling: Option<FmSamplingArg>,
        /// Drop patient attributes from the condition vector.
        #[arg(long)]
        unconditional: bool,
    },
    /// Predict future scans for one patient and export image files.
    Predict {
        /// Full model checkpoint from train-flow.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patient: u32,
        /// Index of the source visit within the patient's record.
        #[arg(long, default_value_t = 0)]
        source_visit: usize,
        /// Absolute target age; repeatable.
        #[arg(long = "target-age")]
        target_ages: Vec<f64>,
        /// Predict a whole trajectory this many years past the source.
        #[arg(long)]
        horizon: Option<f64>,
        /// Snapshot spacing for --horizon, in years.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        /// Seed for the stochastic integration variant.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions over every observed visit pair of a split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Score a degenerate reference predictor instead of the model.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
    },
    /// Export per-scan latent descriptors with a 2-D projection.
    ExportLatents {
        /// Model checkpoint; the autoencoder part is all that is used.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate how additive noise shifts the residual score.
    Sensitivity {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1024)]
        pixels: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one named variant end to end and append its scores to a
    /// comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: AblateVariant,
        /// Reuse an existing cohort directory instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.cohort.seed = seed;
            }
            commands::cmd_gen_data(&config, &out)
        }
        Command::TrainAe { config, data, out, seed, no_arc, no_rank, cosine, simple_rank } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.ae_train.seed = seed;
            }
            if no_arc {
                config.ae_train.arcrank.lambda_arc = 0.0;
            }
            if no_rank {
                config.ae_train.arcrank.lambda_rank = 0.0;
            }
            if cosine {
                config.ae_train.arc_term = ArcTerm::Cosine;
            }
            if simple_rank {
                config.ae_train.rank_term = RankTerm::Simple;
            }
            commands::cmd_train_ae(&config, &data, &out).map(|_| ())
        }
        Command::TrainFlow { config, data, ae, out, seed, fm_sampling, unconditional } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.flow_train.seed = seed;
            }
            if let Some(sampling) = fm_sampling {
                config.flow.sampling_mode = sampling.mode();
            }
            if unconditional {
                config.flow.conditioning_enabled = false;
            }
            commands::cmd_train_flow(&config, &data, &ae, &out).map(|_| ())
        }
        Command::Predict {
            model,
            data,
            out,
            patient,
            source_visit,
            target_ages,
            horizon,
            interval,
            seed,
        } => commands::cmd_predict(
            &model,
            &data,
            &out,
            PredictOptions {
                patient,
                source_visit,
                target_ages,
                horizon,
                interval,
                sde_seed: seed.unwrap_or(0),
            },
        ),
        Command::Evaluate { model, data, out, split, baseline } => commands::cmd_evaluate(
            &model,
            &data,
            &out,
            EvaluateOptions { split, copy_baseline: baseline == Some(BaselineArg::Copy) },
        )
        .map(|_| ()),
        Command::ExportLatents { model, data, out } => {
            commands::cmd_export_latents(&model, &data, &out)
        }
        Command::Sensitivity { out, trials, pixels, seed } => {
            commands::cmd_sensitivity(&out, trials, pixels, seed.unwrap_or(0))
        }
        Command::Ablate { config, out, variant, data } => {
            let config = load_config(config.as_deref())?;
            commands::cmd_ablate(&config, &out, variant, data.as_deref())
        }
    }
}
