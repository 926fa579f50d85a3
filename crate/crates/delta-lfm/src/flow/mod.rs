//! Temporal flow matching: a velocity network over latent states,
//! conditioned on times and patient attributes, trained to match the
//! straight-line velocity between a patient's visit latents.
//!
//! Time is real elapsed years. In the default `Temporal0T` mode a pair of
//! visits (t_i, t_j) defines a flow over [0, T] with T = t_j - t_i and a
//! constant target velocity (z_j - z_i) / T in latent units per year;
//! `Physical01` rescales the same path onto [0, 1] for comparison runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientRecord};
use crate::error::{DlfmError, Result};
use crate::gradcore::{NodeId, Tape, Tensor};
use crate::latent::{encode_visits, AutoencoderParams};
use crate::nn::{Linear, LinearNodes};
use crate::optim::{AdamW, OptimizerConfig};

/// Where flow time lives for a visit pair spanning T years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Flow time is elapsed years in [0, T]; velocity has units
    /// latent per year.
    Temporal0T,
    /// Flow time is normalized to [0, 1]; velocity is the full
    /// displacement.
    Physical01,
}

/// How multi-snapshot trajectory integration anchors the condition times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorMode {
    /// One coherent flow: start fixed at the source age, end fixed at the
    /// final horizon age for every step.
    FixedSourceHorizon,
    /// Each snapshot segment re-anchors start and end to its own bounds.
    PerSegment,
}

/// Velocity-field shape, conditioning layout, and integration defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sampling_mode: SamplingMode,
    /// Euler step size in years.
    pub dt: f64,
    /// Noise scale of the stochastic integration variant; 0 is the
    /// deterministic flow.
    pub sde_sigma: f64,
    /// Width of each sinusoidal time embedding; must be even.
    pub embed_dim: usize,
    /// Standard deviation of the Gaussian noise added to the status label
    /// during training (a third of the class interval of 3).
    pub status_noise_std: f64,
    /// With conditioning off the attribute block has zero width and only
    /// the time embeddings remain.
    pub conditioning_enabled: bool,
    pub anchor_mode: AnchorMode,
    /// Trunk layer width.
    pub hidden: usize,
    /// Width of the processed condition representation.
    pub cond_hidden: usize,
    pub latent_rows: usize,
    pub latent_cols: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sampling_mode: SamplingMode::Temporal0T,
            dt: 0.01,
            sde_sigma: 0.0,
            embed_dim: 8,
            status_noise_std: 1.0,
            conditioning_enabled: true,
            anchor_mode: AnchorMode::FixedSourceHorizon,
            hidden: 96,
            cond_hidden: 32,
            latent_rows: 8,
            latent_cols: 8,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DlfmError::InvalidInput(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.sde_sigma >= 0.0 && self.sde_sigma.is_finite()) {
            return Err(DlfmError::InvalidInput(format!(
                "sde_sigma must be nonnegative, got {}",
                self.sde_sigma
            )));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(DlfmError::InvalidInput(format!(
                "embed_dim must be even and at least 2, got {}",
                self.embed_dim
            )));
        }
        if !(self.status_noise_std >= 0.0 && self.status_noise_std.is_finite()) {
            return Err(DlfmError::InvalidInput("status_noise_std must be nonnegative".into()));
        }
        if self.hidden == 0 || self.cond_hidden == 0 {
            return Err(DlfmError::InvalidInput("network widths must be positive".into()));
        }
        if self.latent_rows == 0 || self.latent_cols == 0 {
            return Err(DlfmError::InvalidInput("latent shape must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_len(&self) -> usize {
        self.latent_rows * self.latent_cols
    }

    /// Width of the raw condition vector: three time embeddings plus the
    /// attribute block.
    pub fn condition_width(&self) -> usize {
        3 * self.embed_dim + if self.conditioning_enabled { 3 } else { 0 }
    }
}

/// Interleaved sinusoidal features `[sin(t w_k), cos(t w_k)]` with
/// `w_k = 10000^(-2k/dim)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(DlfmError::InvalidInput(format!(
            "embedding dim must be even and at least 2, got {dim}"
        )));
    }
    if !t.is_finite() {
        return Err(DlfmError::InvalidInput("embedding time must be finite".into()));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out.push((t * omega).sin());
        out.push((t * omega).cos());
    }
    Ok(out)
}

/// The attributes the condition vector sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientAttrs {
    pub sex: u8,
    pub baseline_age: f64,
    pub status: u8,
}

impl From<&PatientRecord> for PatientAttrs {
    fn from(record: &PatientRecord) -> Self {
        Self { sex: record.sex, baseline_age: record.baseline_age, status: record.status }
    }
}

/// Conditioning input of one velocity evaluation: embedded start, current,
/// and end times, then the attribute block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub values: Tensor,
}

/// Builds the condition for (start, current, end) absolute ages. A
/// training rng perturbs the status label with seeded Gaussian noise;
/// inference passes `None` and keeps the clean label.
pub fn make_condition(
    attrs: &PatientAttrs,
    t_start: f64,
    t_current: f64,
    t_end: f64,
    cfg: &FlowConfig,
    training_rng: Option<&mut ChaCha8Rng>,
) -> Result<ConditionVector> {
    if !(t_start.is_finite() && t_current.is_finite() && t_end.is_finite()) {
        return Err(DlfmError::InvalidInput("condition times must be finite".into()));
    }
    if !(t_start <= t_current && t_current <= t_end) {
        return Err(DlfmError::InvalidInput(format!(
            "condition times must satisfy start <= current <= end, got {t_start}, {t_current}, {t_end}"
        )));
    }
    let mut values = Vec::with_capacity(cfg.condition_width());
    values.extend(sinusoidal_embed(t_start, cfg.embed_dim)?);
    values.extend(sinusoidal_embed(t_current, cfg.embed_dim)?);
    values.extend(sinusoidal_embed(t_end, cfg.embed_dim)?);
    if cfg.conditioning_enabled {
        let status = attrs.status as f64
            + match training_rng {
                Some(rng) => cfg.status_noise_std * rng.sample::<f64, _>(StandardNormal),
                None => 0.0,
            };
        values.push(attrs.sex as f64);
        values.push(attrs.baseline_age / 100.0);
        values.push(status);
    }
    Ok(ConditionVector { values: Tensor::row(values) })
}

/// Weights of the conditioned velocity field: a two-layer trunk over the
/// flattened latent, with per-layer scale/shift generators fed by one
/// processed condition representation.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNetParams {
    pub config: FlowConfig,
    pub trunk_in: Linear,
    pub trunk_mid: Linear,
    pub trunk_out: Linear,
    pub cond_proc: Linear,
    pub scale_in: Linear,
    pub shift_in: Linear,
    pub scale_mid: Linear,
    pub shift_mid: Linear,
}

pub const FLOW_PARAM_NAMES: [&str; 16] = [
    "trunk_in.weight",
    "trunk_in.bias",
    "trunk_mid.weight",
    "trunk_mid.bias",
    "trunk_out.weight",
    "trunk_out.bias",
    "cond_proc.weight",
    "cond_proc.bias",
    "scale_in.weight",
    "scale_in.bias",
    "shift_in.weight",
    "shift_in.bias",
    "scale_mid.weight",
    "scale_mid.bias",
    "shift_mid.weight",
    "shift_mid.bias",
];

impl VelocityNetParams {
    /// Initializes the trunk and condition processor randomly and the
    /// modulation generators at zero, so modulation starts as the
    /// identity (scale 1, shift 0).
    pub fn init(config: &FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.latent_len();
        let h = config.hidden;
        let c = config.cond_hidden;
        Ok(Self {
            config: config.clone(),
            trunk_in: Linear::init(n, h, &mut rng),
            trunk_mid: Linear::init(h, h, &mut rng),
            trunk_out: Linear::init(h, n, &mut rng),
            cond_proc: Linear::init(config.condition_width(), c, &mut rng),
            scale_in: Linear::zeros(c, h),
            shift_in: Linear::zeros(c, h),
            scale_mid: Linear::zeros(c, h),
            shift_mid: Linear::zeros(c, h),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.trunk_in.weight,
            &self.trunk_in.bias,
            &self.trunk_mid.weight,
            &self.trunk_mid.bias,
            &self.trunk_out.weight,
            &self.trunk_out.bias,
            &self.cond_proc.weight,
            &self.cond_proc.bias,
            &self.scale_in.weight,
            &self.scale_in.bias,
            &self.shift_in.weight,
            &self.shift_in.bias,
            &self.scale_mid.weight,
            &self.scale_mid.bias,
            &self.shift_mid.weight,
            &self.shift_mid.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.trunk_in.weight,
            &mut self.trunk_in.bias,
            &mut self.trunk_mid.weight,
            &mut self.trunk_mid.bias,
            &mut self.trunk_out.weight,
            &mut self.trunk_out.bias,
            &mut self.cond_proc.weight,
            &mut self.cond_proc.bias,
            &mut self.scale_in.weight,
            &mut self.scale_in.bias,
            &mut self.shift_in.weight,
            &mut self.shift_in.bias,
            &mut self.scale_mid.weight,
            &mut self.scale_mid.bias,
            &mut self.shift_mid.weight,
            &mut self.shift_mid.bias,
        ]
    }

    pub fn on_tape(&self, tape: &mut Tape) -> VelocityNetNodes {
        VelocityNetNodes {
            trunk_in: self.trunk_in.on_tape(tape),
            trunk_mid: self.trunk_mid.on_tape(tape),
            trunk_out: self.trunk_out.on_tape(tape),
            cond_proc: self.cond_proc.on_tape(tape),
            scale_in: self.scale_in.on_tape(tape),
            shift_in: self.shift_in.on_tape(tape),
            scale_mid: self.scale_mid.on_tape(tape),
            shift_mid: self.shift_mid.on_tape(tape),
        }
    }
}

/// Tape-resident copies of the velocity-net parameters.
pub struct VelocityNetNodes {
    pub trunk_in: LinearNodes,
    pub trunk_mid: LinearNodes,
    pub trunk_out: LinearNodes,
    pub cond_proc: LinearNodes,
    pub scale_in: LinearNodes,
    pub shift_in: LinearNodes,
    pub scale_mid: LinearNodes,
    pub shift_mid: LinearNodes,
}

impl VelocityNetNodes {
    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![
            self.trunk_in.weight,
            self.trunk_in.bias,
            self.trunk_mid.weight,
            self.trunk_mid.bias,
            self.trunk_out.weight,
            self.trunk_out.bias,
            self.cond_proc.weight,
            self.cond_proc.bias,
            self.scale_in.weight,
            self.scale_in.bias,
            self.shift_in.weight,
            self.shift_in.bias,
            self.scale_mid.weight,
            self.scale_mid.bias,
            self.shift_mid.weight,
            self.shift_mid.bias,
        ]
    }

    /// Condition-processing layer: one linear map plus tanh.
    pub fn process_condition(&self, tape: &mut Tape, cond: NodeId) -> Result<NodeId> {
        let pre = self.cond_proc.apply(tape, cond)?;
        tape.tanh(pre)
    }

    /// Full conditioned trunk on the tape. `z` is the latent matrix node;
    /// `c` the processed condition.
    pub fn velocity(
        &self,
        tape: &mut Tape,
        cfg: &FlowConfig,
        z: NodeId,
        c: NodeId,
    ) -> Result<NodeId> {
        let flat = tape.reshape(z, 1, cfg.latent_len())?;
        let pre_in = self.trunk_in.apply(tape, flat)?;
        let mod_in = adaln_modulate_on_tape(tape, pre_in, c, &self.scale_in, &self.shift_in)?;
        let h1 = tape.tanh(mod_in)?;
        let pre_mid = self.trunk_mid.apply(tape, h1)?;
        let mod_mid = adaln_modulate_on_tape(tape, pre_mid, c, &self.scale_mid, &self.shift_mid)?;
        let h2 = tape.tanh(mod_mid)?;
        let out = self.trunk_out.apply(tape, h2)?;
        tape.reshape(out, cfg.latent_rows, cfg.latent_cols)
    }
}

/// Normalizes the activations to zero mean and unit variance (epsilon
/// 1e-5), then applies condition-generated scale and shift. The scale
/// generator output is offset by one, so zero weights modulate by the
/// identity.
pub fn adaln_modulate_on_tape(
    tape: &mut Tape,
    h: NodeId,
    c: NodeId,
    scale_gen: &LinearNodes,
    shift_gen: &LinearNodes,
) -> Result<NodeId> {
    let normed = tape.layer_norm(h, 1e-5)?;
    let raw_scale = scale_gen.apply(tape, c)?;
    let scale = tape.add_scalar(raw_scale, 1.0)?;
    let shift = shift_gen.apply(tape, c)?;
    let scaled = tape.mul_elem(normed, scale)?;
    tape.add(scaled, shift)
}

/// Plain evaluation of the modulation outside any tape.
pub fn adaln_modulate(
    h: &Tensor,
    c: &Tensor,
    scale_gen: &Linear,
    shift_gen: &Linear,
) -> Result<Tensor> {
    let n = h.len() as f64;
    let mu = h.data().iter().sum::<f64>() / n;
    let var = h.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    let normed = h.map(|v| (v - mu) / denom);
    let scale = scale_gen.forward(c)?.map(|v| v + 1.0);
    let shift = shift_gen.forward(c)?;
    if !normed.same_shape(&scale) {
        return Err(DlfmError::ShapeMismatch {
            op: "adaln_modulate",
            detail: format!("{:?} activations vs {:?} modulation", normed.shape(), scale.shape()),
        });
    }
    let mut out = normed;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * scale.data()[i] + shift.data()[i];
    }
    Ok(out)
}

/// Evaluates the velocity field without a tape; used by inference.
pub fn velocity(params: &VelocityNetParams, z: &Tensor, cond: &ConditionVector) -> Result<Tensor> {
    let cfg = &params.config;
    if z.shape() != (cfg.latent_rows, cfg.latent_cols) {
        return Err(DlfmError::ShapeMismatch {
            op: "velocity",
            detail: format!(
                "latent {:?} vs configured {}x{}",
                z.shape(),
                cfg.latent_rows,
                cfg.latent_cols
            ),
        });
    }
    let c = params.cond_proc.forward(&cond.values)?.map(f64::tanh);
    let flat = z.reshape(1, cfg.latent_len())?;
    let pre_in = params.trunk_in.forward(&flat)?;
    let h1 = adaln_modulate(&pre_in, &c, &params.scale_in, &params.shift_in)?.map(f64::tanh);
    let pre_mid = params.trunk_mid.forward(&h1)?;
    let h2 = adaln_modulate(&pre_mid, &c, &params.scale_mid, &params.shift_mid)?.map(f64::tanh);
    let out = params.trunk_out.forward(&h2)?;
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(DlfmError::NonFinite { op: "velocity" });
    }
    out.reshape(cfg.latent_rows, cfg.latent_cols)
}

/// One flow-matching training sample on the straight path between two
/// visit latents.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// Interpolated latent at the sampled flow time.
    pub z_t: Tensor,
    /// Sampled flow time in mode-native units: years in [0, T] or a
    /// fraction in [0, 1].
    pub tau: f64,
    /// Absolute age corresponding to `tau`, for conditioning.
    pub t_current: f64,
    pub v_target: Tensor,
    /// Pair span T = t_j - t_i in years.
    pub span: f64,
}

/// Draws the flow time uniformly and interpolates state and target
/// velocity on the straight path from (z_i, t_i) to (z_j, t_j).
pub fn fm_training_sample(
    z_i: &Tensor,
    z_j: &Tensor,
    t_i: f64,
    t_j: f64,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<FlowSample> {
    if !z_i.same_shape(z_j) {
        return Err(DlfmError::ShapeMismatch {
            op: "fm_training_sample",
            detail: format!("{:?} vs {:?}", z_i.shape(), z_j.shape()),
        });
    }
    if !(t_j > t_i) {
        return Err(DlfmError::InvalidInput(format!(
            "pair times must be strictly ordered, got {t_i} then {t_j}"
        )));
    }
    let span = t_j - t_i;
    let displacement = z_j.sub(z_i)?;
    match mode {
        SamplingMode::Temporal0T => {
            let tau = rng.gen_range(0.0..span);
            let frac = tau / span;
            let z_t = z_i.add(&displacement.scale(frac))?;
            Ok(FlowSample {
                z_t,
                tau,
                t_current: t_i + tau,
                v_target: displacement.scale(1.0 / span),
                span,
            })
        }
        SamplingMode::Physical01 => {
            let tau = rng.gen_range(0.0..1.0);
            let z_t = z_i.add(&displacement.scale(tau))?;
            Ok(FlowSample { z_t, tau, t_current: t_i + tau * span, v_target: displacement, span })
        }
    }
}

/// One batch element: the path sample plus its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatchItem {
    pub sample: FlowSample,
    pub cond: ConditionVector,
}

/// Flow-matching loss on the tape: for each item the squared error
/// between predicted and target velocity, summed over latent entries,
/// averaged over the batch.
pub fn fm_loss_on_tape(
    tape: &mut Tape,
    nodes: &VelocityNetNodes,
    cfg: &FlowConfig,
    batch: &[FlowBatchItem],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(DlfmError::InvalidInput("flow-matching batch is empty".into()));
    }
    let mut acc: Option<NodeId> = None;
    for item in batch {
        let z = tape.constant(item.sample.z_t.clone());
        let cond = tape.constant(item.cond.values.clone());
        let c = nodes.process_condition(tape, cond)?;
        let v = nodes.velocity(tape, cfg, z, c)?;
        let target = tape.constant(item.sample.v_target.clone());
        let diff = tape.sub(v, target)?;
        let sq = tape.mul_elem(diff, diff)?;
        let err = tape.sum(sq)?;
        acc = Some(match acc {
            None => err,
            Some(a) => tape.add(a, err)?,
        });
    }
    tape.scale(acc.expect("nonempty batch"), 1.0 / batch.len() as f64)
}

/// Scalar flow-matching loss of a batch under fixed parameters.
pub fn fm_loss(params: &VelocityNetParams, batch: &[FlowBatchItem]) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = params.on_tape(&mut tape);
    let loss = fm_loss_on_tape(&mut tape, &nodes, &params.config, batch)?;
    let value = tape.value(loss).scalar_value()?;
    if !value.is_finite() {
        return Err(DlfmError::NonFinite { op: "fm_loss" });
    }
    Ok(value)
}

/// A patient's visits after encoding: evaluation-mode latents plus the
/// data the condition vector needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVisit {
    pub age: f64,
    pub z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub id: u32,
    pub attrs: PatientAttrs,
    pub visits: Vec<EncodedVisit>,
}

/// Encodes the listed patients with the frozen autoencoder in evaluation
/// mode (posterior means).
pub fn encode_patients(
    ae: &AutoencoderParams,
    cohort: &Cohort,
    patient_ids: &[u32],
) -> Result<Vec<EncodedPatient>> {
    patient_ids
        .iter()
        .map(|&id| {
            let record = cohort
                .patient(id)
                .ok_or_else(|| DlfmError::InvalidInput(format!("patient {id} not in cohort")))?;
            let latents = encode_visits(ae, record)?;
            Ok(EncodedPatient {
                id,
                attrs: PatientAttrs::from(record),
                visits: record
                    .visits
                    .iter()
                    .zip(latents)
                    .map(|(v, l)| EncodedVisit { age: v.age, z: l.z })
                    .collect(),
            })
        })
        .collect()
}

/// Knobs of one velocity-net training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    /// Visit pairs per optimization step.
    pub batch_pairs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_pairs: 4,
            seed: 0,
            optimizer: OptimizerConfig::with_learning_rate(3e-5),
        }
    }
}

/// Mean flow-matching loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEpochStats {
    pub epoch: usize,
    pub fm_loss: f64,
}

/// Trains the velocity net on every ordered same-patient visit pair,
/// shuffled each epoch and batched. Deterministic in the seed.
pub fn train_flow(
    encoded: &[EncodedPatient],
    flow_config: &FlowConfig,
    train_config: &FlowTrainConfig,
) -> Result<(VelocityNetParams, Vec<FlowEpochStats>)> {
    flow_config.validate()?;
    train_config.optimizer.validate()?;
    if train_config.batch_pairs == 0 {
        return Err(DlfmError::InvalidInput("batch_pairs must be positive".into()));
    }
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (p, patient) in encoded.iter().enumerate() {
        for i in 0..patient.visits.len() {
            for j in i + 1..patient.visits.len() {
                pairs.push((p, i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(DlfmError::InvalidInput(
            "no ordered visit pairs to train on; every patient needs at least two visits".into(),
        ));
    }
    for patient in encoded {
        for visit in &patient.visits {
            if visit.z.shape() != (flow_config.latent_rows, flow_config.latent_cols) {
                return Err(DlfmError::ShapeMismatch {
                    op: "train_flow",
                    detail: format!(
                        "latent {:?} vs configured {}x{}",
                        visit.z.shape(),
                        flow_config.latent_rows,
                        flow_config.latent_cols
                    ),
                });
            }
        }
    }

    let mut params = VelocityNetParams::init(flow_config, train_config.seed)?;
    let mut optimizer = AdamW::new(train_config.optimizer.clone(), &params.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(1));

    let mut history = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        use rand::seq::SliceRandom;
        let mut order = pairs.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_config.batch_pairs) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &(p, i, j) in chunk {
                let patient = &encoded[p];
                let (vi, vj) = (&patient.visits[i], &patient.visits[j]);
                let sample = fm_training_sample(
                    &vi.z,
                    &vj.z,
                    vi.age,
                    vj.age,
                    flow_config.sampling_mode,
                    &mut rng,
                )?;
                let cond = make_condition(
                    &patient.attrs,
                    vi.age,
                    sample.t_current,
                    vj.age,
                    flow_config,
                    Some(&mut rng),
                )?;
                batch.push(FlowBatchItem { sample, cond });
            }

            let mut tape = Tape::new();
            let nodes = params.on_tape(&mut tape);
            let loss = fm_loss_on_tape(&mut tape, &nodes, flow_config, &batch)?;
            let loss_value = tape.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(DlfmError::Numeric(format!(
                    "flow training diverged at epoch {epoch}"
                )));
            }
            loss_sum += loss_value;
            batches += 1;

            let grads = tape.backward(loss)?;
            let grad_list: Vec<Option<Tensor>> = nodes
                .param_ids()
                .iter()
                .map(|&id| grads.get(id).cloned())
                .collect();
            optimizer.step(&mut params.params_mut(), &grad_list)?;
        }

        history.push(FlowEpochStats { epoch, fm_loss: loss_sum / batches as f64 });
    }

    Ok((params, history))
}
