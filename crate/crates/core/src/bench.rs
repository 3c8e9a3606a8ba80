//! Wall-clock inference benchmark. Feature extraction and normalization
//! happen once outside the timed region; each timed pass classifies every
//! pixel of the cube. The warm-up pass is reported separately because
//! first-image latency behaves differently from the steady state.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::{apply_zscore, exclude_bands, SpectralCube};
use crate::error::{Error, Result};
use crate::registry::PixelClassifier;

/// Per-image wall times for one model on one cube.
#[derive(Debug, Clone)]
pub struct TimingReport {
    pub model_kind: String,
    pub pixels_per_image: usize,
    /// Warm-up pass, reported separately.
    pub first_image_secs: f64,
    /// The timed passes after warm-up.
    pub per_image_secs: Vec<f64>,
    pub rest_mean_secs: f64,
    pub rest_median_secs: f64,
    /// Pixels per second at the median pass time.
    pub pixel_throughput: f64,
}

impl TimingReport {
    pub fn to_kv(&self) -> String {
        format!(
            "model_kind={}\npixels_per_image={}\nfirst_image_secs={:.6}\nrest_mean_secs={:.6}\nrest_median_secs={:.6}\npixel_throughput={:.0}\n",
            self.model_kind,
            self.pixels_per_image,
            self.first_image_secs,
            self.rest_mean_secs,
            self.rest_median_secs,
            self.pixel_throughput
        )
    }
}

fn classify_pass(model: &dyn PixelClassifier, rows: &[f32], d: usize) -> Result<u64> {
    // The argmax sum keeps the optimizer from discarding the work.
    let sum = rows
        .par_chunks_exact(d)
        .map(|row| model.predict(row).map(|p| crate::cnn::argmax(&p) as u64))
        .try_reduce(|| 0u64, |a, b| Ok(a + b))?;
    Ok(sum)
}

/// Classify every pixel of the cube `1 + repetitions` times: one warm-up
/// pass timed separately, then `repetitions` timed passes.
pub fn run_benchmark(
    model: &dyn PixelClassifier,
    cube: &SpectralCube,
    repetitions: usize,
) -> Result<TimingReport> {
    if repetitions == 0 {
        return Err(Error::invalid_argument("repetitions must be at least 1".to_string()));
    }
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

    let time_pass = |rows: &[f32]| -> Result<f64> {
        let start = Instant::now();
        let _ = classify_pass(model, rows, d)?;
        Ok(start.elapsed().as_secs_f64().max(1e-9))
    };

    let first_image_secs = time_pass(&rows)?;
    let mut per_image_secs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        per_image_secs.push(time_pass(&rows)?);
    }

    let rest_mean_secs = per_image_secs.iter().sum::<f64>() / repetitions as f64;
    let mut sorted = per_image_secs.clone();
    sorted.sort_by(f64::total_cmp);
    let rest_median_secs = if repetitions % 2 == 1 {
        sorted[repetitions / 2]
    } else {
        0.5 * (sorted[repetitions / 2 - 1] + sorted[repetitions / 2])
    };

    Ok(TimingReport {
        model_kind: model.kind().to_string(),
        pixels_per_image: cube.pixel_count(),
        first_image_secs,
        per_image_secs,
        rest_mean_secs,
        rest_median_secs,
        pixel_throughput: cube.pixel_count() as f64 / rest_median_secs,
    })
}
