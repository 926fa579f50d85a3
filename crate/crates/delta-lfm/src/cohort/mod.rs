//! Synthetic longitudinal cohort: rendering, generation, splitting, storage.
//!
//! A cohort is a set of patients, each with a hidden severity trajectory
//! that is linear in age (optionally piecewise linear) and a list of
//! irregularly spaced visits. Every visit carries a rendered scan plus its
//! region masks. Generation is a pure function of the config, and each
//! patient is generated from its own derived seed.

pub mod io;
pub mod render;

pub use io::{load_cohort, save_cohort};
pub use render::*;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};

/// Everything that determines a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    /// Inclusive visit-count bounds per patient.
    pub visit_range: (usize, usize),
    /// Baseline age window in years.
    pub age_range: (f64, f64),
    /// Severity-per-year progression rate bounds.
    pub rate_range: (f64, f64),
    /// Baseline severity bounds.
    pub severity_range: (f64, f64),
    /// Maximum years between the first and last visit.
    pub followup_span: f64,
    /// Minimum years between consecutive visits.
    pub min_gap: f64,
    pub noise_std: f64,
    pub width: usize,
    pub height: usize,
    /// When set, each patient's progression rate jumps at a hidden
    /// breakpoint instead of staying constant.
    pub uneven_progression: bool,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 64,
            visit_range: (4, 8),
            age_range: (55.0, 70.0),
            rate_range: (0.08, 0.25),
            severity_range: (0.2, 1.2),
            followup_span: 10.0,
            min_gap: 0.5,
            noise_std: 0.01,
            width: 32,
            height: 32,
            uneven_progression: false,
            seed: 7,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(DlfmError::InvalidInput("n_patients must be at least 1".into()));
        }
        let (vmin, vmax) = self.visit_range;
        if vmin < 2 || vmax > 10 || vmin > vmax {
            return Err(DlfmError::InvalidInput(format!(
                "visit_range must satisfy 2 <= min <= max <= 10, got ({vmin}, {vmax})"
            )));
        }
        if !(self.age_range.0 < self.age_range.1) {
            return Err(DlfmError::InvalidInput(format!(
                "age_range must be nonempty, got {:?}",
                self.age_range
            )));
        }
        if !(self.rate_range.0 > 0.0 && self.rate_range.0 < self.rate_range.1) {
            return Err(DlfmError::InvalidInput(format!(
                "rate_range must be nonempty and positive, got {:?}",
                self.rate_range
            )));
        }
        if !(self.severity_range.0 >= 0.0 && self.severity_range.0 < self.severity_range.1) {
            return Err(DlfmError::InvalidInput(format!(
                "severity_range must be nonempty and nonnegative, got {:?}",
                self.severity_range
            )));
        }
        if !(self.min_gap > 0.0 && self.followup_span > 0.0) {
            return Err(DlfmError::InvalidInput(
                "min_gap and followup_span must be positive".into(),
            ));
        }
        if (vmax as f64 - 1.0) * self.min_gap > self.followup_span {
            return Err(DlfmError::InvalidInput(format!(
                "infeasible schedule: {} visits with min gap {} cannot fit a {}-year span",
                vmax, self.min_gap, self.followup_span
            )));
        }
        if !(0.0..=0.1).contains(&self.noise_std) {
            return Err(DlfmError::InvalidInput(format!(
                "noise_std must lie in [0, 0.1], got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// One imaging visit. Severity is the hidden ground truth that drove the
/// rendering; models never see it.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub age: f64,
    pub severity: f64,
    pub image: ScanImage,
    pub masks: RegionMasks,
}

/// One synthetic patient with visits sorted by strictly increasing age.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: u32,
    /// Binary sex code, 0 or 1.
    pub sex: u8,
    pub baseline_age: f64,
    /// Ordinal clinical class: 0, 3 or 6 (class interval 3).
    pub status: u8,
    pub progression_rate: f64,
    pub anatomy_seed: u64,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn patient(&self, id: u32) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn total_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }
}

/// Attributes drawn before statuses can be assigned (statuses depend on
/// the whole cohort's baseline severities).
struct PatientDraft {
    anatomy_seed: u64,
    sex: u8,
    baseline_age: f64,
    rate: f64,
    baseline_severity: f64,
    visit_offsets: Vec<f64>,
    noise_seeds: Vec<u64>,
    breakpoint: Option<(f64, f64)>,
}

fn draw_patient(seed: u64, config: &CohortConfig) -> PatientDraft {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy_seed: u64 = rng.gen();
    let sex = u8::from(rng.gen_bool(0.5));
    let baseline_age = rng.gen_range(config.age_range.0..config.age_range.1);
    let rate = rng.gen_range(config.rate_range.0..config.rate_range.1);
    let baseline_severity = rng.gen_range(config.severity_range.0..config.severity_range.1);
    let n_visits = rng.gen_range(config.visit_range.0..=config.visit_range.1);

    let gaps = n_visits - 1;
    let reserved = gaps as f64 * config.min_gap;
    let span_lo = (0.6 * config.followup_span).max(reserved);
    let span = if span_lo < config.followup_span {
        rng.gen_range(span_lo..config.followup_span)
    } else {
        span_lo
    };
    let weights: Vec<f64> = (0..gaps).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let slack = span - reserved;
    let mut visit_offsets = Vec::with_capacity(n_visits);
    let mut t = 0.0;
    visit_offsets.push(t);
    for w in &weights {
        let share = if total > 0.0 { w / total } else { 1.0 / gaps as f64 };
        t += config.min_gap + share * slack;
        visit_offsets.push(t);
    }

    let breakpoint = config.uneven_progression.then(|| {
        let at = rng.gen_range(0.25..0.75) * config.followup_span;
        let multiplier = rng.gen_range(1.5..2.5);
        (at, multiplier)
    });
    let noise_seeds = (0..n_visits).map(|_| rng.gen()).collect();

    PatientDraft {
        anatomy_seed,
        sex,
        baseline_age,
        rate,
        baseline_severity,
        visit_offsets,
        noise_seeds,
        breakpoint,
    }
}

fn severity_at(draft: &PatientDraft, offset: f64) -> f64 {
    match draft.breakpoint {
        None => draft.baseline_severity + draft.rate * offset,
        Some((at, multiplier)) => {
            let before = offset.min(at);
            let after = (offset - at).max(0.0);
            draft.baseline_severity + draft.rate * (before + multiplier * after)
        }
    }
}

/// Generates a full cohort from the config. Statuses come from baseline
/// severity terciles: the lowest third is class 0, the middle 3, the top 6.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let patient_seeds: Vec<u64> = (0..config.n_patients).map(|_| master.gen()).collect();
    let drafts: Vec<PatientDraft> = patient_seeds
        .iter()
        .map(|&s| draw_patient(s, config))
        .collect();

    let mut by_baseline: Vec<usize> = (0..drafts.len()).collect();
    by_baseline.sort_by(|&a, &b| {
        drafts[a]
            .baseline_severity
            .total_cmp(&drafts[b].baseline_severity)
            .then(a.cmp(&b))
    });
    let mut statuses = vec![0u8; drafts.len()];
    for (rank, &idx) in by_baseline.iter().enumerate() {
        let tercile = 3 * rank / drafts.len();
        statuses[idx] = 3 * tercile as u8;
    }

    let mut patients = Vec::with_capacity(drafts.len());
    for (idx, draft) in drafts.iter().enumerate() {
        let mut visits = Vec::with_capacity(draft.visit_offsets.len());
        for (v, &offset) in draft.visit_offsets.iter().enumerate() {
            let severity = severity_at(draft, offset);
            let (image, masks) = render_scan(
                draft.anatomy_seed,
                severity,
                draft.noise_seeds[v],
                config.noise_std,
                config.width,
                config.height,
            )?;
            visits.push(Visit { age: draft.baseline_age + offset, severity, image, masks });
        }
        patients.push(PatientRecord {
            id: idx as u32,
            sex: draft.sex,
            baseline_age: draft.baseline_age,
            status: statuses[idx],
            progression_rate: draft.rate,
            anatomy_seed: draft.anatomy_seed,
            visits,
        });
    }

    Ok(Cohort { config: config.clone(), patients })
}

/// Patient-level split assignment. Each list holds sorted patient ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl CohortSplit {
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

/// Splits patients into train/val/test. Validation and test sizes are the
/// rounded fractions; every remaining patient goes to train.
pub fn split_cohort(cohort: &Cohort, fractions: (f64, f64, f64), seed: u64) -> Result<CohortSplit> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 || f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(DlfmError::InvalidInput(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let n = cohort.patients.len();
    let n_val = (f_val * n as f64).round() as usize;
    let n_test = (f_test * n as f64).round() as usize;
    if f_test > 0.0 && n_test == 0 {
        return Err(DlfmError::InvalidInput(format!(
            "cohort of {n} patients rounds to an empty test split at fraction {f_test}"
        )));
    }
    if n_val + n_test > n {
        return Err(DlfmError::InvalidInput(format!(
            "cohort of {n} patients cannot fill val {n_val} plus test {n_test}"
        )));
    }

    let mut ids: Vec<u32> = cohort.patients.iter().map(|p| p.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut val: Vec<u32> = ids[..n_val].to_vec();
    let mut test: Vec<u32> = ids[n_val..n_val + n_test].to_vec();
    let mut train: Vec<u32> = ids[n_val + n_test..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(CohortSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config(seed: u64) -> CohortConfig {
        CohortConfig { n_patients: 10, seed, ..CohortConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config(7);
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ages_and_severities_strictly_increase() {
        let cohort = generate_cohort(&small_config(3)).unwrap();
        for p in &cohort.patients {
            assert!(p.visits.len() >= 2 && p.visits.len() <= 10);
            assert!(p.progression_rate > 0.0);
            assert!(matches!(p.status, 0 | 3 | 6));
            for pair in p.visits.windows(2) {
                assert!(pair[1].age > pair[0].age, "ages out of order for patient {}", p.id);
                assert!(
                    pair[1].severity > pair[0].severity,
                    "severities out of order for patient {}",
                    p.id
                );
                assert!(pair[1].age - pair[0].age >= cohort.config.min_gap - 1e-9);
            }
            let span = p.visits.last().unwrap().age - p.visits[0].age;
            assert!(span <= cohort.config.followup_span + 1e-9);
        }
    }

    #[test]
    fn default_cohort_scan_count_is_within_bounds() {
        let cohort = generate_cohort(&CohortConfig::default()).unwrap();
        let total = cohort.total_visits();
        assert!((256..=512).contains(&total), "total scans {total}");
    }

    #[test]
    fn statuses_follow_baseline_terciles() {
        let cohort = generate_cohort(&CohortConfig::default()).unwrap();
        let n = cohort.patients.len();
        let count = |s: u8| cohort.patients.iter().filter(|p| p.status == s).count();
        for status in [0u8, 3, 6] {
            let c = count(status);
            assert!(
                c >= n / 3 - 1 && c <= n / 3 + 2,
                "status {status} count {c} out of tercile balance"
            );
        }
        let healthiest = cohort
            .patients
            .iter()
            .min_by(|a, b| a.visits[0].severity.total_cmp(&b.visits[0].severity))
            .unwrap();
        let sickest = cohort
            .patients
            .iter()
            .max_by(|a, b| a.visits[0].severity.total_cmp(&b.visits[0].severity))
            .unwrap();
        assert_eq!(healthiest.status, 0);
        assert_eq!(sickest.status, 6);
    }

    #[test]
    fn uneven_progression_stays_monotone() {
        let cfg = CohortConfig {
            n_patients: 6,
            uneven_progression: true,
            seed: 11,
            ..CohortConfig::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        for p in &cohort.patients {
            for pair in p.visits.windows(2) {
                assert!(pair[1].severity > pair[0].severity);
            }
        }
    }

    #[test]
    fn infeasible_schedule_is_rejected() {
        let cfg = CohortConfig {
            followup_span: 1.0,
            visit_range: (4, 4),
            ..CohortConfig::default()
        };
        assert!(generate_cohort(&cfg).is_err());
        let cfg = CohortConfig { visit_range: (1, 4), ..CohortConfig::default() };
        assert!(generate_cohort(&cfg).is_err());
        let cfg = CohortConfig { rate_range: (0.0, 0.2), ..CohortConfig::default() };
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn split_matches_rounding_rule() {
        let cfg = CohortConfig { n_patients: 20, ..CohortConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let split = split_cohort(&cohort, (0.80, 0.05, 0.15), 1).unwrap();
        assert_eq!(split.train.len(), 16);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 3);

        let mut all: Vec<u32> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        let expected: Vec<u32> = (0..20).collect();
        assert_eq!(all, expected, "splits must partition the cohort");
    }

    #[test]
    fn split_is_deterministic_and_handles_degenerate_fractions() {
        let cohort = generate_cohort(&small_config(2)).unwrap();
        let a = split_cohort(&cohort, (0.80, 0.05, 0.15), 9).unwrap();
        let b = split_cohort(&cohort, (0.80, 0.05, 0.15), 9).unwrap();
        assert_eq!(a, b);

        let all_train = split_cohort(&cohort, (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!(all_train.train.len(), 10);
        assert!(all_train.val.is_empty() && all_train.test.is_empty());

        assert!(split_cohort(&cohort, (0.5, 0.5, 0.5), 9).is_err());
    }

    #[test]
    fn tiny_cohort_cannot_fill_test_split() {
        let cfg = CohortConfig { n_patients: 3, ..CohortConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        assert!(split_cohort(&cohort, (0.80, 0.05, 0.15), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn any_seed_yields_monotone_patients(seed in 0u64..1_000_000, n in 1usize..6) {
            let cfg = CohortConfig { n_patients: n, visit_range: (2, 4), seed, ..CohortConfig::default() };
            let cohort = generate_cohort(&cfg).unwrap();
            prop_assert_eq!(cohort.patients.len(), n);
            for p in &cohort.patients {
                for pair in p.visits.windows(2) {
                    prop_assert!(pair[1].age > pair[0].age);
                    prop_assert!(pair[1].severity > pair[0].severity);
                }
                for v in &p.visits {
                    prop_assert!(v.image.pixels.iter().all(|&px| (0.0..=1.0).contains(&px)));
                }
            }
        }
    }
}
