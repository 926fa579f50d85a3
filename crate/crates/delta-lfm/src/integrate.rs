//! Arbitrary-horizon inference: forward Euler integration of the learned
//! velocity field from a source visit's latent to any queried future age,
//! then decoding back to image space.
//!
//! The step count is `ceil(span / dt)` with the final step shrunk to land
//! exactly on the query age. With `sde_sigma > 0` each step also adds
//! seeded Gaussian noise scaled by the square root of the step size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cohort::ScanImage;
use crate::error::{DlfmError, Result};
use crate::flow::{
    make_condition, velocity, AnchorMode, ConditionVector, FlowConfig, PatientAttrs,
    VelocityNetParams,
};
use crate::gradcore::Tensor;
use crate::latent::AutoencoderParams;

/// The trained pieces inference needs: the frozen autoencoder and the
/// velocity field (whose config carries dt, noise scale, and anchors).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub autoencoder: AutoencoderParams,
    pub velocity: VelocityNetParams,
}

/// Latents and decoded images along one integration, aligned with the
/// query ages; `steps_per_segment[k]` counts the Euler steps from the
/// previous snapshot (or the source) to query k.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrediction {
    pub source_age: f64,
    pub query_ages: Vec<f64>,
    pub latents: Vec<Tensor>,
    pub images: Vec<ScanImage>,
    pub steps_per_segment: Vec<usize>,
}

/// Forward Euler over an injectable field `f(state, absolute_time)`.
/// Returns the terminal state and the number of steps taken.
pub fn euler_core<F>(
    z0: &Tensor,
    t_i: f64,
    t_j: f64,
    dt: f64,
    sde_sigma: f64,
    rng: Option<&mut ChaCha8Rng>,
    mut field: F,
) -> Result<(Tensor, usize)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if !(t_j > t_i && t_i.is_finite() && t_j.is_finite()) {
        return Err(DlfmError::InvalidInput(format!(
            "integration requires t_j > t_i, got {t_i} to {t_j}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DlfmError::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if !(sde_sigma >= 0.0 && sde_sigma.is_finite()) {
        return Err(DlfmError::InvalidInput("sde_sigma must be nonnegative".into()));
    }
    let mut rng = rng;
    if sde_sigma > 0.0 && rng.is_none() {
        return Err(DlfmError::InvalidInput(
            "stochastic integration needs a seeded rng".into(),
        ));
    }

    let span = t_j - t_i;
    // The tiny slack keeps spans that are float-exact multiples of dt from
    // picking up a spurious near-zero final step.
    let n_steps = ((span / dt - 1e-9).ceil() as usize).max(1);
    let mut z = z0.clone();
    for k in 0..n_steps {
        let t_cur = t_i + k as f64 * dt;
        let h = if k + 1 == n_steps { t_j - t_cur } else { dt };
        let v = field(&z, t_cur)?;
        if !v.same_shape(&z) {
            return Err(DlfmError::ShapeMismatch {
                op: "euler_core",
                detail: format!("field returned {:?} for state {:?}", v.shape(), z.shape()),
            });
        }
        z.add_scaled_assign(&v, h)?;
        if sde_sigma > 0.0 {
            let r = rng.as_mut().expect("checked above");
            let scale = sde_sigma * h.sqrt();
            for value in z.data_mut() {
                *value += scale * r.sample::<f64, _>(StandardNormal);
            }
        }
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(DlfmError::Numeric(format!(
                "integration diverged at step {k} of {n_steps} (t = {t_cur:.4})"
            )));
        }
    }
    Ok((z, n_steps))
}

/// Integrates the learned velocity field, rebuilding the condition at
/// every step's current time through `cond_builder`.
pub fn euler_integrate<C>(
    params: &VelocityNetParams,
    z0: &Tensor,
    t_i: f64,
    t_j: f64,
    rng: Option<&mut ChaCha8Rng>,
    cond_builder: C,
) -> Result<(Tensor, usize)>
where
    C: Fn(f64) -> Result<ConditionVector>,
{
    let cfg = &params.config;
    euler_core(z0, t_i, t_j, cfg.dt, cfg.sde_sigma, rng, |z, t| {
        let cond = cond_builder(t)?;
        velocity(params, z, &cond)
    })
}

fn clean_condition(
    attrs: &PatientAttrs,
    cfg: &FlowConfig,
    t_start: f64,
    t: f64,
    t_end: f64,
) -> Result<ConditionVector> {
    make_condition(attrs, t_start, t, t_end, cfg, None)
}

/// Encodes the source scan, integrates to the target age, and decodes.
/// Deterministic whenever the config's noise scale is zero; `sde_seed`
/// drives the noise stream otherwise.
pub fn predict_followup(
    bundle: &ModelBundle,
    source_scan: &ScanImage,
    attrs: &PatientAttrs,
    source_age: f64,
    target_age: f64,
    sde_seed: u64,
) -> Result<(ScanImage, TrajectoryPrediction)> {
    if !(target_age > source_age) {
        return Err(DlfmError::InvalidInput(format!(
            "target age {target_age} must exceed source age {source_age}"
        )));
    }
    let cfg = &bundle.velocity.config;
    let z0 = bundle.autoencoder.encode(source_scan)?.z;
    let mut rng = ChaCha8Rng::seed_from_u64(sde_seed);
    let (z_end, steps) = euler_integrate(
        &bundle.velocity,
        &z0,
        source_age,
        target_age,
        (cfg.sde_sigma > 0.0).then_some(&mut rng),
        |t| clean_condition(attrs, cfg, source_age, t, target_age),
    )?;
    let image = bundle.autoencoder.decode(&z_end)?;
    let prediction = TrajectoryPrediction {
        source_age,
        query_ages: vec![target_age],
        latents: vec![z_end],
        images: vec![image.clone()],
        steps_per_segment: vec![steps],
    };
    Ok((image, prediction))
}

/// Integrates once over the whole horizon, snapshotting the latent at
/// every interval boundary (the horizon itself is always the final
/// snapshot) and decoding each snapshot. No re-encoding happens between
/// snapshots.
pub fn predict_trajectory(
    bundle: &ModelBundle,
    source_scan: &ScanImage,
    attrs: &PatientAttrs,
    source_age: f64,
    horizon_years: f64,
    interval_years: f64,
    sde_seed: u64,
) -> Result<TrajectoryPrediction> {
    if !(horizon_years > 0.0 && horizon_years.is_finite()) {
        return Err(DlfmError::InvalidInput(format!(
            "horizon must be positive, got {horizon_years}"
        )));
    }
    if !(interval_years > 0.0 && interval_years.is_finite()) {
        return Err(DlfmError::InvalidInput(format!(
            "interval must be positive, got {interval_years}"
        )));
    }
    let cfg = &bundle.velocity.config;

    let mut query_ages = Vec::new();
    let mut k = 1usize;
    while k as f64 * interval_years < horizon_years - 1e-9 {
        query_ages.push(source_age + k as f64 * interval_years);
        k += 1;
    }
    query_ages.push(source_age + horizon_years);
    let final_age = *query_ages.last().expect("at least the horizon");

    let mut z = bundle.autoencoder.encode(source_scan)?.z;
    let mut rng = ChaCha8Rng::seed_from_u64(sde_seed);
    let mut latents = Vec::with_capacity(query_ages.len());
    let mut steps_per_segment = Vec::with_capacity(query_ages.len());
    let mut seg_start = source_age;
    for &seg_end in &query_ages {
        let (anchor_start, anchor_end) = match cfg.anchor_mode {
            AnchorMode::FixedSourceHorizon => (source_age, final_age),
            AnchorMode::PerSegment => (seg_start, seg_end),
        };
        let (z_next, steps) = euler_integrate(
            &bundle.velocity,
            &z,
            seg_start,
            seg_end,
            (cfg.sde_sigma > 0.0).then_some(&mut rng),
            |t| clean_condition(attrs, cfg, anchor_start, t, anchor_end),
        )?;
        latents.push(z_next.clone());
        steps_per_segment.push(steps);
        z = z_next;
        seg_start = seg_end;
    }

    let images = latents
        .iter()
        .map(|z| bundle.autoencoder.decode(z))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryPrediction { source_age, query_ages, latents, images, steps_per_segment })
}
