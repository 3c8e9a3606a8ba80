//! PCA feature reduction: a frozen projection front layer plus a small
//! trainable head. The projector is fit on training rows only; the head is
//! an ordinary [`SpectralCnn`] over the reduced dimension.

use crate::cnn::{build_arch, ParamCounts, SpectralCnn, TrainConfig, TrainHistory, DEFAULT_KERNEL};
use crate::data::{NormStats, PixelDataset};
use crate::error::{Error, Result};
use crate::numerics::{sym_eig_descending, Matrix};

/// Orthonormal projection onto the top principal directions of the
/// training features.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    /// Feature means subtracted before projecting.
    pub mean: Vec<f32>,
    /// D x d, columns are principal directions.
    pub basis: Matrix,
    /// Fraction of total variance captured by each direction, descending.
    pub explained: Vec<f64>,
    pub d: usize,
}

impl PcaProjector {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// z = basisᵀ (x - mean).
    pub fn project(&self, features: &[f32]) -> Result<Vec<f32>> {
        let big_d = self.input_dim();
        if features.len() != big_d {
            return Err(Error::invalid_argument(format!(
                "projector expects {} features, got {}",
                big_d,
                features.len()
            )));
        }
        let mut out = vec![0.0f32; self.d];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..big_d {
                acc += (features[i] - self.mean[i]) as f64 * self.basis.get(i, j) as f64;
            }
            *o = acc as f32;
        }
        Ok(out)
    }

    /// x ≈ mean + basis z; exact for d = D.
    pub fn back_project(&self, reduced: &[f32]) -> Result<Vec<f32>> {
        if reduced.len() != self.d {
            return Err(Error::invalid_argument("reduced vector length mismatch".to_string()));
        }
        let big_d = self.input_dim();
        let mut out = vec![0.0f32; big_d];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.mean[i] as f64;
            for j in 0..self.d {
                acc += self.basis.get(i, j) as f64 * reduced[j] as f64;
            }
            *o = acc as f32;
        }
        Ok(out)
    }

    pub fn project_rows(&self, rows: &[f32]) -> Result<Vec<f32>> {
        let big_d = self.input_dim();
        if rows.len() % big_d != 0 {
            return Err(Error::invalid_argument("row data not divisible by feature count".to_string()));
        }
        let mut out = Vec::with_capacity(rows.len() / big_d * self.d);
        for row in rows.chunks_exact(big_d) {
            out.extend_from_slice(&self.project(row)?);
        }
        Ok(out)
    }
}

/// Fit the top-d principal directions of the population covariance of
/// `train_features` (flat row-major, D columns). `explained[i] = λᵢ / Σλ`
/// over all D eigenvalues.
pub fn fit_pca(train_features: &[f32], big_d: usize, d: usize) -> Result<PcaProjector> {
    if big_d == 0 || train_features.len() % big_d != 0 {
        return Err(Error::invalid_argument("row data not divisible by feature count".to_string()));
    }
    let n = train_features.len() / big_d;
    if n < 2 {
        return Err(Error::invalid_argument(format!("need at least 2 rows to fit, got {n}")));
    }
    if d < 1 || d > big_d {
        return Err(Error::invalid_argument(format!(
            "reduced dimension {d} out of range for {big_d} features"
        )));
    }

    let mut mean = vec![0.0f64; big_d];
    for row in train_features.chunks_exact(big_d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Population covariance, accumulated in f64.
    let mut cov = vec![0.0f64; big_d * big_d];
    for row in train_features.chunks_exact(big_d) {
        for i in 0..big_d {
            let di = row[i] as f64 - mean[i];
            for j in i..big_d {
                cov[i * big_d + j] += di * (row[j] as f64 - mean[j]);
            }
        }
    }
    let scale = 1.0 / n as f64;
    let cov_mat = Matrix::from_fn(big_d, big_d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        (cov[a * big_d + b] * scale) as f32
    });

    let eig = sym_eig_descending(&cov_mat)?;
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let explained: Vec<f64> = if total > 0.0 {
        eig.eigenvalues.iter().take(d).map(|&l| l.max(0.0) / total).collect()
    } else {
        vec![0.0; d]
    };

    let basis = Matrix::from_fn(big_d, d, |i, j| eig.eigenvectors.get(i, j));
    Ok(PcaProjector {
        mean: mean.iter().map(|&m| m as f32).collect(),
        basis,
        explained,
        d,
    })
}

/// For each threshold t, the smallest component count k whose cumulative
/// explained variance reaches t. The projector's trailing cumulative sum is
/// treated as exactly 1 so t = 1.0 always resolves.
pub fn explained_variance_report(projector: &PcaProjector, thresholds: &[f64]) -> Result<Vec<(f64, usize)>> {
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid_argument(format!("threshold {t} outside (0, 1]")));
        }
    }
    let mut cumulative: Vec<f64> = Vec::with_capacity(projector.d);
    let mut acc = 0.0;
    for &e in &projector.explained {
        acc += e;
        cumulative.push(acc);
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let k = cumulative
            .iter()
            .position(|&c| c >= t - 1e-12)
            .map(|i| i + 1)
            .unwrap_or(projector.d);
        out.push((t, k));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reduced model
// ---------------------------------------------------------------------------

/// How the trainable head over the reduced dimension is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    /// Shrink-to-fit conv stack when the reduced dimension covers the
    /// kernel; otherwise a bias-free affine map. Reproduces the published
    /// trainable counts at d = 30/18/7/4.
    Default,
    /// Bare affine map, with or without bias.
    Affine { bias: bool },
}

/// A frozen projector feeding a small trainable head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    pub projector: PcaProjector,
    pub head: SpectralCnn,
    pub norm: Option<NormStats>,
}

impl ReducedModel {
    /// Prediction is exactly `head.forward(basisᵀ (x - mean))`.
    pub fn forward(&self, features: &[f32]) -> Result<Vec<f32>> {
        self.head.forward(&self.projector.project(features)?)
    }

    /// Trainable = head parameters only; total additionally counts the
    /// D x d projection entries. The D mean entries are reported on their
    /// own because conventions differ on whether centering is "the
    /// projection matrix".
    pub fn count_params(&self) -> ParamCounts {
        let head = self.head.count_params().total;
        let projection = self.projector.input_dim() * self.projector.d;
        ParamCounts {
            trainable: head,
            total: head + projection,
            bytes_at_4b: (head + projection + self.projector.input_dim()) * 4,
        }
    }

    pub fn mean_entries(&self) -> usize {
        self.projector.input_dim()
    }
}

/// Build the reduced model for a fitted projector. `HeadSpec::Default`
/// keeps conv layers while the reduced length covers the kernel and falls
/// back to a bias-free affine map below it; an explicit spec overrides.
pub fn build_reduced_model(projector: &PcaProjector, spec: HeadSpec) -> Result<ReducedModel> {
    let d = projector.d;
    if d < 1 {
        return Err(Error::invalid_argument("reduced dimension must be positive".to_string()));
    }
    let head = match spec {
        HeadSpec::Default => build_arch(d, 3, d >= DEFAULT_KERNEL)?,
        HeadSpec::Affine { bias } => {
            let mut arch = build_arch(d, 3, bias)?;
            arch.conv_stack.clear();
            arch.dense = crate::cnn::DenseLayer::zeros(d, 3, bias);
            arch
        }
    };
    Ok(ReducedModel {
        projector: projector.clone(),
        head,
        norm: None,
    })
}

/// Train the head on the projected dataset; the projector never changes.
/// Returns the history alongside the projected dataset's feature count for
/// sanity checks.
pub fn train_reduced(model: &mut ReducedModel, dataset: &PixelDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if dataset.feature_count != model.projector.input_dim() {
        return Err(Error::invalid_argument(format!(
            "projector expects {} features, dataset has {}",
            model.projector.input_dim(),
            dataset.feature_count
        )));
    }
    let projected = PixelDataset {
        features: model.projector.project_rows(&dataset.features)?,
        feature_count: model.projector.d,
        labels: dataset.labels.clone(),
        split: dataset.split.clone(),
    };
    crate::cnn::train(&mut model.head, &projected, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    #[test]
    fn single_axis_data_gives_that_axis() {
        // Rows vary along feature 1 only.
        let rows: Vec<f32> = (0..20).flat_map(|i| vec![0.0, i as f32]).collect();
        let p = fit_pca(&rows, 2, 1).unwrap();
        assert!((p.basis.get(0, 0).abs()) < 1e-5);
        assert!((p.basis.get(1, 0).abs() - 1.0).abs() < 1e-5);
        assert!((p.explained[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn complete_basis_reconstructs_rows() {
        let mut rng = seeded_rng(17);
        let d = 5;
        let rows: Vec<f32> = (0..40 * d).map(|_| rng.random_range(-2.0..2.0f32)).collect();
        let p = fit_pca(&rows, d, d).unwrap();
        for row in rows.chunks_exact(d) {
            let z = p.project(row).unwrap();
            let back = p.back_project(&z).unwrap();
            let mut err = 0.0f64;
            let mut scale = 0.0f64;
            for (a, b) in row.iter().zip(&back) {
                err += ((a - b) as f64).powi(2);
                scale += (*a as f64).powi(2);
            }
            assert!(err.sqrt() <= 1e-4 * scale.sqrt().max(1.0), "err {err}");
        }
    }

    #[test]
    fn d_out_of_range_rejected() {
        let rows = vec![0.0f32; 12];
        assert!(matches!(fit_pca(&rows, 3, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(fit_pca(&rows, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn explained_report_cumulative_arithmetic() {
        // Planted spectrum {0.7, 0.2, 0.1}: t=0.85 needs two components.
        let p = PcaProjector {
            mean: vec![0.0; 3],
            basis: Matrix::identity(3),
            explained: vec![0.7, 0.2, 0.1],
            d: 3,
        };
        let report = explained_variance_report(&p, &[0.5, 0.85, 0.999, 1.0]).unwrap();
        assert_eq!(report, vec![(0.5, 1), (0.85, 2), (0.999, 3), (1.0, 3)]);
        assert!(explained_variance_report(&p, &[0.0]).is_err());
        assert!(explained_variance_report(&p, &[1.5]).is_err());
    }

    #[test]
    fn single_direction_reaches_threshold_at_one() {
        let rows: Vec<f32> = (0..30).flat_map(|i| vec![i as f32, 2.0 * i as f32]).collect();
        let p = fit_pca(&rows, 2, 2).unwrap();
        let report = explained_variance_report(&p, &[0.999]).unwrap();
        assert_eq!(report[0].1, 1);
    }

    #[test]
    fn head_counts_follow_reduced_dimension() {
        let mk = |d: usize| PcaProjector {
            mean: vec![0.0; 112],
            basis: Matrix::zeros(112, d),
            explained: vec![0.0; d],
            d,
        };
        let trainable: Vec<usize> = [30, 18, 7, 4]
            .iter()
            .map(|&d| build_reduced_model(&mk(d), HeadSpec::Default).unwrap().count_params().trainable)
            .collect();
        assert_eq!(trainable, vec![597, 525, 63, 12]);
        // Strictly decreasing with d.
        assert!(trainable.windows(2).all(|w| w[0] > w[1]));

        // d = 112 disables reduction: head equals the baseline stack.
        let full = build_reduced_model(&mk(112), HeadSpec::Default).unwrap();
        assert_eq!(full.count_params().trainable, 4563);
    }

    #[test]
    fn totals_count_projection_but_not_mean() {
        let p = PcaProjector {
            mean: vec![0.0; 112],
            basis: Matrix::zeros(112, 4),
            explained: vec![0.0; 4],
            d: 4,
        };
        let m = build_reduced_model(&p, HeadSpec::Default).unwrap();
        let counts = m.count_params();
        assert_eq!(counts.trainable, 12);
        assert_eq!(counts.total, 12 + 112 * 4);
        assert!(counts.trainable < counts.total);
        assert_eq!(m.mean_entries(), 112);
    }

    #[test]
    fn prediction_is_head_of_projection() {
        let mut rng = seeded_rng(23);
        let rows: Vec<f32> = (0..50 * 10).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let p = fit_pca(&rows, 10, 4).unwrap();
        let mut m = build_reduced_model(&p, HeadSpec::Default).unwrap();
        m.head.init_weights(1);
        let x: Vec<f32> = (0..10).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let direct = m.forward(&x).unwrap();
        let via = m.head.forward(&m.projector.project(&x).unwrap()).unwrap();
        assert_eq!(direct, via);
    }
}
