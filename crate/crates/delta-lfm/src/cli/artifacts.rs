//! Output artifact plumbing: portable graymap images, CSV formatting
//! with nine significant digits, and residual-map normalization.

use std::fs;
use std::path::Path;

use crate::cohort::ScanImage;
use crate::error::{DlfmError, Result};

/// Formats a float with nine significant digits, '.' decimal separator.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Formats an optional metric; absent values become empty CSV cells.
pub fn sig9_opt(x: Option<f64>) -> String {
    x.map(sig9).unwrap_or_default()
}

/// Writes UTF-8 comma-separated rows under a header line.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    body.push_str(header);
    body.push('\n');
    for row in rows {
        body.push_str(row);
        body.push('\n');
    }
    write_text(path, &body)
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, content)
        .map_err(|e| DlfmError::io(format!("writing {}", path.display()), e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| DlfmError::io(format!("creating {}", parent.display()), e))?;
        }
    }
    Ok(())
}

/// Writes an 8-bit binary portable graymap (P5). Pixels are clamped to
/// [0, 1] and quantized to 0..=255; the comment line records the config
/// hash that produced the image.
pub fn write_pgm(path: &Path, image: &ScanImage, config_hash: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(64 + image.pixels.len());
    bytes.extend_from_slice(b"P5\n");
    bytes.extend_from_slice(format!("# config_hash {config_hash}\n").as_bytes());
    bytes.extend_from_slice(format!("{} {}\n255\n", image.width, image.height).as_bytes());
    bytes.extend(
        image
            .pixels
            .iter()
            .map(|&p| (f64::from(p).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| DlfmError::io(format!("writing {}", path.display()), e))
}

/// Linear-interpolation percentile of pre-sorted values, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Absolute difference of two images rescaled to its 1st-99th percentile
/// range and clamped to [0, 1]. A constant map comes out all zero.
pub fn residual_map(a: &ScanImage, b: &ScanImage) -> Result<ScanImage> {
    if a.width != b.width || a.height != b.height {
        return Err(DlfmError::ShapeMismatch {
            op: "residual_map",
            detail: format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        });
    }
    let abs: Vec<f64> = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .collect();
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, 0.01);
    let hi = percentile(&sorted, 0.99);
    let range = hi - lo;
    let pixels: Vec<f32> = if range <= 0.0 {
        vec![0.0; abs.len()]
    } else {
        abs.iter().map(|v| (((v - lo) / range).clamp(0.0, 1.0)) as f32).collect()
    };
    Ok(ScanImage { width: a.width, height: a.height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(pixels: Vec<f32>, w: usize, h: usize) -> ScanImage {
        ScanImage { width: w, height: h, pixels }
    }

    #[test]
    fn sig9_keeps_nine_significant_digits() {
        assert_eq!(sig9(2.0), "2.00000000e0");
        assert_eq!(sig9(0.012345678949), "1.23456789e-2");
        assert_eq!(sig9(-1.5e-9), "-1.50000000e-9");
        assert_eq!(sig9_opt(None), "");
    }

    #[test]
    fn pgm_layout_is_stable_and_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = image(vec![0.0, 0.5, 1.0, 2.0], 2, 2);
        write_pgm(&path, &img, "deadbeef").unwrap();
        let bytes = fs::read(&path).unwrap();
        let expected_head = b"P5\n# config_hash deadbeef\n2 2\n255\n";
        assert_eq!(&bytes[..expected_head.len()], expected_head);
        assert_eq!(&bytes[expected_head.len()..], &[0u8, 128, 255, 255]);

        write_pgm(&path, &img, "deadbeef").unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes, "rewrite must be identical");
    }

    #[test]
    fn residual_map_normalizes_to_percentile_range() {
        let n = 100;
        let a = image((0..n).map(|i| i as f32 / n as f32).collect(), 10, 10);
        let b = image(vec![0.0; n], 10, 10);
        let map = residual_map(&a, &b).unwrap();
        assert!(map.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(map.pixels[0], 0.0, "below the 1st percentile clamps to 0");
        assert_eq!(*map.pixels.last().unwrap(), 1.0, "above the 99th percentile clamps to 1");

        let flat = residual_map(&a, &a).unwrap();
        assert!(flat.pixels.iter().all(|&p| p == 0.0));

        assert!(residual_map(&a, &image(vec![0.0; 4], 2, 2)).is_err());
    }
}
