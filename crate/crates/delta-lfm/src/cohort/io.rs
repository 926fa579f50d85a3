//! Cohort persistence.
//!
//! A cohort is stored as a directory holding two files: `cohort.json` with
//! the config, all patient metadata, per-visit ages and severities, and
//! run-length encoded region masks; and `scans.bin` with every scan's
//! pixels as little-endian f32, concatenated in metadata order, row-major.
//! The JSON records a CRC-32 of the binary payload so corruption is caught
//! at load time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};

use super::render::{RegionMasks, ScanImage};
use super::{Cohort, CohortConfig, PatientRecord, Visit};

pub const COHORT_FORMAT_VERSION: u32 = 1;
const METADATA_FILE: &str = "cohort.json";
const SCANS_FILE: &str = "scans.bin";

/// Run lengths of alternating mask values, starting with the number of
/// leading `false` pixels. `[0, 5, 3]` means five set pixels then three
/// clear ones.
fn rle_encode(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &bit in mask {
        if bit == current {
            count += 1;
        } else {
            runs.push(count);
            current = bit;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<bool>> {
    let total: usize = runs.iter().map(|&r| r as usize).sum();
    if total != len {
        return Err(DlfmError::Format(format!(
            "mask run lengths sum to {total}, expected {len} pixels"
        )));
    }
    let mut mask = Vec::with_capacity(len);
    let mut value = false;
    for &run in runs {
        mask.extend(std::iter::repeat(value).take(run as usize));
        value = !value;
    }
    Ok(mask)
}

#[derive(Serialize, Deserialize)]
struct MasksDoc {
    ventricle: Vec<u32>,
    hippocampus: Vec<u32>,
    cortex: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct VisitDoc {
    age: f64,
    severity: f64,
    masks: MasksDoc,
}

#[derive(Serialize, Deserialize)]
struct PatientDoc {
    id: u32,
    sex: u8,
    baseline_age: f64,
    status: u8,
    progression_rate: f64,
    anatomy_seed: u64,
    visits: Vec<VisitDoc>,
}

#[derive(Serialize, Deserialize)]
struct CohortDoc {
    format_version: u32,
    config: CohortConfig,
    scans_crc32: u32,
    patients: Vec<PatientDoc>,
}

/// Writes `cohort.json` and `scans.bin` under `dir`, creating it first.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    let (w, h) = (cohort.config.width, cohort.config.height);
    let mut payload: Vec<u8> = Vec::new();
    let mut patients = Vec::with_capacity(cohort.patients.len());
    for p in &cohort.patients {
        let mut visits = Vec::with_capacity(p.visits.len());
        for v in &p.visits {
            if v.image.width != w || v.image.height != h || v.image.pixels.len() != w * h {
                return Err(DlfmError::InvalidInput(format!(
                    "patient {} holds a scan of shape {}x{}, config says {w}x{h}",
                    p.id, v.image.width, v.image.height
                )));
            }
            for &px in &v.image.pixels {
                payload.extend_from_slice(&px.to_le_bytes());
            }
            visits.push(VisitDoc {
                age: v.age,
                severity: v.severity,
                masks: MasksDoc {
                    ventricle: rle_encode(&v.masks.ventricle),
                    hippocampus: rle_encode(&v.masks.hippocampus),
                    cortex: rle_encode(&v.masks.cortex),
                },
            });
        }
        patients.push(PatientDoc {
            id: p.id,
            sex: p.sex,
            baseline_age: p.baseline_age,
            status: p.status,
            progression_rate: p.progression_rate,
            anatomy_seed: p.anatomy_seed,
            visits,
        });
    }

    let doc = CohortDoc {
        format_version: COHORT_FORMAT_VERSION,
        config: cohort.config.clone(),
        scans_crc32: crc32fast::hash(&payload),
        patients,
    };

    fs::create_dir_all(dir).map_err(|e| DlfmError::io(format!("creating {}", dir.display()), e))?;
    let json = serde_json::to_string_pretty(&doc)?;
    fs::write(dir.join(METADATA_FILE), json)
        .map_err(|e| DlfmError::io(format!("writing {}", dir.join(METADATA_FILE).display()), e))?;
    fs::write(dir.join(SCANS_FILE), payload)
        .map_err(|e| DlfmError::io(format!("writing {}", dir.join(SCANS_FILE).display()), e))?;
    Ok(())
}

/// Loads a cohort directory written by [`save_cohort`], verifying the
/// format version, the payload length and the CRC-32 checksum.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let meta_path = dir.join(METADATA_FILE);
    let json = fs::read_to_string(&meta_path)
        .map_err(|e| DlfmError::io(format!("reading {}", meta_path.display()), e))?;
    let doc: CohortDoc = serde_json::from_str(&json)?;
    if doc.format_version != COHORT_FORMAT_VERSION {
        return Err(DlfmError::Format(format!(
            "cohort format_version {} is not supported (expected {COHORT_FORMAT_VERSION})",
            doc.format_version
        )));
    }

    let scans_path = dir.join(SCANS_FILE);
    let payload = fs::read(&scans_path)
        .map_err(|e| DlfmError::io(format!("reading {}", scans_path.display()), e))?;
    let (w, h) = (doc.config.width, doc.config.height);
    let pixels_per_scan = w * h;
    let total_scans: usize = doc.patients.iter().map(|p| p.visits.len()).sum();
    let expected = total_scans * pixels_per_scan * 4;
    if payload.len() != expected {
        return Err(DlfmError::Format(format!(
            "scan payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let crc = crc32fast::hash(&payload);
    if crc != doc.scans_crc32 {
        return Err(DlfmError::Format(format!(
            "scan payload checksum {crc:#010x} does not match recorded {:#010x}",
            doc.scans_crc32
        )));
    }

    let mut offset = 0usize;
    let mut patients = Vec::with_capacity(doc.patients.len());
    for p in doc.patients {
        let mut visits = Vec::with_capacity(p.visits.len());
        for v in p.visits {
            let mut pixels = Vec::with_capacity(pixels_per_scan);
            for _ in 0..pixels_per_scan {
                let bytes: [u8; 4] = payload[offset..offset + 4].try_into().expect("length checked");
                pixels.push(f32::from_le_bytes(bytes));
                offset += 4;
            }
            visits.push(Visit {
                age: v.age,
                severity: v.severity,
                image: ScanImage { width: w, height: h, pixels },
                masks: RegionMasks {
                    width: w,
                    height: h,
                    ventricle: rle_decode(&v.masks.ventricle, pixels_per_scan)?,
                    hippocampus: rle_decode(&v.masks.hippocampus, pixels_per_scan)?,
                    cortex: rle_decode(&v.masks.cortex, pixels_per_scan)?,
                },
            });
        }
        patients.push(PatientRecord {
            id: p.id,
            sex: p.sex,
            baseline_age: p.baseline_age,
            status: p.status,
            progression_rate: p.progression_rate,
            anatomy_seed: p.anatomy_seed,
            visits,
        });
    }

    Ok(Cohort { config: doc.config, patients })
}
