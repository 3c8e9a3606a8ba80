//! Cube-level classification, mask export and the downlink decision.
//!
//! Masks are written as binary graymaps (P5): the class map holds raw
//! class values 0/1/2 and the confidence map holds the per-pixel maximum
//! probability scaled to 0-255.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{apply_zscore, exclude_bands, SpectralCube, CLASS_CLOUD, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::registry::PixelClassifier;

/// Per-pixel classes and confidences for one cube.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskResult {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
    /// Maximum softmax probability per pixel.
    pub confidence: Vec<f32>,
    /// count(class == cloud) / total, exact.
    pub cloud_fraction: f64,
}

impl MaskResult {
    pub fn from_classes(height: usize, width: usize, classes: Vec<u8>, confidence: Vec<f32>) -> Result<Self> {
        if classes.len() != height * width || confidence.len() != classes.len() {
            return Err(Error::invalid_argument("mask buffers do not match dimensions".to_string()));
        }
        if classes.iter().any(|&c| c as usize >= CLASS_COUNT) {
            return Err(Error::invalid_data("class value out of range".to_string()));
        }
        let cloud = classes.iter().filter(|&&c| c == CLASS_CLOUD).count();
        let cloud_fraction = cloud as f64 / classes.len() as f64;
        Ok(MaskResult {
            height,
            width,
            classes,
            confidence,
            cloud_fraction,
        })
    }
}

/// Classify every pixel of a cube: drop invalid bands, standardize with
/// the model's frozen statistics when it carries them, then predict.
/// Pixels fan out in parallel into disjoint slots, so the result is
/// deterministic.
pub fn classify_cube(model: &dyn PixelClassifier, cube: &SpectralCube) -> Result<MaskResult> {
    let features = exclude_bands(cube)?;
    if features.cols() != model.feature_dim() {
        return Err(Error::invalid_argument(format!(
            "model expects {} features, cube provides {} valid bands",
            model.feature_dim(),
            features.cols()
        )));
    }
    let d = features.cols();
    let mut rows = features.data().to_vec();
    if let Some(stats) = model.norm() {
        apply_zscore(&mut rows, d, stats)?;
    }
    let results: Vec<(u8, f32)> = rows
        .par_chunks_exact(d)
        .map(|row| {
            let probs = model.predict(row)?;
            let class = crate::cnn::argmax(&probs) as u8;
            Ok((class, probs[class as usize]))
        })
        .collect::<Result<_>>()?;
    let classes: Vec<u8> = results.iter().map(|(c, _)| *c).collect();
    let confidence: Vec<f32> = results.iter().map(|(_, p)| *p).collect();
    MaskResult::from_classes(cube.height, cube.width, classes, confidence)
}

// ---------------------------------------------------------------------------
// P5 export
// ---------------------------------------------------------------------------

fn write_pgm(path: &Path, width: usize, height: usize, payload: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(payload);
    std::fs::write(path, bytes).map_err(|e| {
        Error::invalid_data(format!("writing {}: {e}", path.display()))
    })?;
    Ok(())
}

/// Write `<base>.classes.pgm` (raw class values) and
/// `<base>.confidence.pgm` (confidence scaled 0-255). Returns both paths.
pub fn export_mask(mask: &MaskResult, basepath: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let base = basepath.as_ref();
    let class_path = base.with_extension("classes.pgm");
    let conf_path = base.with_extension("confidence.pgm");
    write_pgm(&class_path, mask.width, mask.height, &mask.classes)?;
    let conf_bytes: Vec<u8> = mask
        .confidence
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(&conf_path, mask.width, mask.height, &conf_bytes)?;
    Ok((class_path, conf_path))
}

/// Parse a binary graymap produced by [`export_mask`].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let buf = std::fs::read(path)?;
    let header_err = |offset: usize, msg: &str| Error::format(offset as u64, msg.to_string());
    if !buf.starts_with(b"P5\n") {
        return Err(header_err(0, "not a binary graymap"));
    }
    let rest = &buf[3..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err(3, "missing dimension line"))?;
    let dims = std::str::from_utf8(&rest[..newline])
        .map_err(|_| header_err(3, "dimension line not utf-8"))?;
    let mut parts = dims.split_whitespace();
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err(3, "bad width"))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err(3, "bad height"))?;
    let after_dims = 3 + newline + 1;
    let rest = &buf[after_dims..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err(after_dims, "missing maxval line"))?;
    let payload_at = after_dims + newline + 1;
    let payload = &buf[payload_at..];
    if payload.len() != width * height {
        return Err(header_err(payload_at, "payload size does not match dimensions"));
    }
    Ok((width, height, payload.to_vec()))
}

/// Cloud fraction recomputed from an exported class map.
pub fn cloud_fraction_from_pgm(path: impl AsRef<Path>) -> Result<f64> {
    let (w, h, payload) = read_pgm(path)?;
    if w * h == 0 {
        return Err(Error::invalid_data("empty mask".to_string()));
    }
    let cloud = payload.iter().filter(|&&c| c == CLASS_CLOUD).count();
    Ok(cloud as f64 / (w * h) as f64)
}

// ---------------------------------------------------------------------------
// Downlink decision
// ---------------------------------------------------------------------------

/// Keep/discard outcome for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownlinkDecision {
    pub keep: bool,
    pub cloud_fraction: f64,
    pub threshold: f64,
}

/// Keep the image iff its cloud fraction is below the threshold.
pub fn decide_downlink(mask: &MaskResult, threshold: f64) -> Result<DownlinkDecision> {
    decide_from_fraction(mask.cloud_fraction, threshold)
}

pub fn decide_from_fraction(cloud_fraction: f64, threshold: f64) -> Result<DownlinkDecision> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid_argument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(DownlinkDecision {
        keep: cloud_fraction < threshold,
        cloud_fraction,
        threshold,
    })
}
