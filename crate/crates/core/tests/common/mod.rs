//! Shared test oracles: independent reference computations the
//! implementation is checked against. Nothing here calls into the code
//! paths under test.

#![allow(dead_code)]

use specmask_core::data::{
    synth_scene, Layout, PixelDataset, SplitSpec, SplitTag, SynthConfig,
};
use specmask_core::numerics::Matrix;

// ---------------------------------------------------------------------------
// Cubic characteristic-polynomial eigenvalue oracle (3x3 symmetric)
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric 3x3 matrix by the trigonometric solution of
/// the characteristic cubic, descending.
pub fn eig3_oracle(c: &Matrix) -> [f64; 3] {
    assert_eq!((c.rows(), c.cols()), (3, 3));
    let a = |i: usize, j: usize| c.get(i, j) as f64;
    let p1 = a(0, 1).powi(2) + a(0, 2).powi(2) + a(1, 2).powi(2);
    let q = (a(0, 0) + a(1, 1) + a(2, 2)) / 3.0;
    if p1 == 0.0 {
        let mut d = [a(0, 0), a(1, 1), a(2, 2)];
        d.sort_by(|x, y| y.partial_cmp(x).unwrap());
        return d;
    }
    let p2 = (a(0, 0) - q).powi(2) + (a(1, 1) - q).powi(2) + (a(2, 2) - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    // det(B) for B = (C - qI) / p
    let b = |i: usize, j: usize| (a(i, j) - if i == j { q } else { 0.0 }) / p;
    let detb = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
        - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let r = (detb / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3]
}

// ---------------------------------------------------------------------------
// Power-iteration spectral oracle
// ---------------------------------------------------------------------------

/// Top-k eigenvalues of the Gram matrix m mᵀ by power iteration with
/// deflation, in f64. Independent route to optimal low-rank errors:
/// err²(rank k) = ‖m‖F² − λ₁ − … − λ_k.
pub fn top_gram_eigenvalues(m: &Matrix, k: usize, iterations: usize) -> Vec<f64> {
    let rows = m.rows();
    let cols = m.cols();
    let a: Vec<f64> = m.data().iter().map(|&x| x as f64).collect();
    // g = m mᵀ (rows x rows)
    let mut g = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut acc = 0.0;
            for t in 0..cols {
                acc += a[i * cols + t] * a[j * cols + t];
            }
            g[i * rows + j] = acc;
        }
    }
    let mut eigenvalues = Vec::with_capacity(k);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for comp in 0..k.min(rows) {
        let mut v: Vec<f64> = (0..rows)
            .map(|i| ((i + 1 + comp) as f64 * 0.7391).sin())
            .collect();
        for _ in 0..iterations {
            // Deflate previous directions.
            for prev in &basis {
                let dot: f64 = v.iter().zip(prev).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(prev) {
                    *x -= dot * y;
                }
            }
            let mut next = vec![0.0f64; rows];
            for i in 0..rows {
                let mut acc = 0.0;
                for j in 0..rows {
                    acc += g[i * rows + j] * v[j];
                }
                next[i] = acc;
            }
            let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for x in &mut next {
                *x /= norm;
            }
            v = next;
        }
        // Rayleigh quotient.
        let mut gv = vec![0.0f64; rows];
        for i in 0..rows {
            for j in 0..rows {
                gv[i] += g[i * rows + j] * v[j];
            }
        }
        let lambda: f64 = v.iter().zip(&gv).map(|(x, y)| x * y).sum();
        eigenvalues.push(lambda);
        basis.push(v);
    }
    eigenvalues
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data().iter().map(|&x| (x as f64) * (x as f64)).sum()
}

// ---------------------------------------------------------------------------
// Exhaustive split-enumeration oracle
// ---------------------------------------------------------------------------

pub struct OracleSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best (feature, midpoint threshold) by brute force: every candidate's
/// left sums are recomputed by direct summation over all rows. Gains
/// within relative 1e-9 count as tied (exact ties computed in different
/// summation orders land within a few ulps of each other), and ties keep
/// the lowest feature index then the lowest threshold, exactly like the
/// trainer's ordered reduction.
pub fn exhaustive_best_split(
    features: &[f32],
    d: usize,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    min_child_weight: f64,
    min_data_in_leaf: usize,
) -> Option<OracleSplit> {
    const EPS: f64 = 1e-12;
    const TIE: f64 = 1e-9;
    let term = |g: f64, h: f64| g * g / (h + EPS);
    let improves = |cand: f64, best: f64| cand > best + TIE * cand.abs().max(best.abs()).max(1.0);
    let g_total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_total: f64 = rows.iter().map(|&r| hess[r]).sum();
    let parent = term(g_total, h_total);

    let mut best: Option<OracleSplit> = None;
    for f in 0..d {
        let mut values: Vec<f64> = rows.iter().map(|&r| features[r * d + f] as f64).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for pair in values.windows(2) {
            let threshold = 0.5 * (pair[0] + pair[1]);
            let mut gl = 0.0;
            let mut hl = 0.0;
            let mut nl = 0usize;
            for &r in rows {
                if (features[r * d + f] as f64) < threshold {
                    gl += grad[r];
                    hl += hess[r];
                    nl += 1;
                }
            }
            let nr = rows.len() - nl;
            if nl < min_data_in_leaf || nr < min_data_in_leaf {
                continue;
            }
            let gr = g_total - gl;
            let hr = h_total - hl;
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            let gain = 0.5 * (term(gl, hl) + term(gr, hr) - parent);
            if gain > 1e-12 * parent.abs().max(1.0)
                && best.as_ref().map_or(true, |b| improves(gain, b.gain))
            {
                best = Some(OracleSplit {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// Walk a tree and assert every split equals the oracle's choice for the
/// rows that reach it. With `max_depth` given (level policy), leaves above
/// the bound must coincide with the oracle finding nothing; without it
/// (leaf policy), leaves may simply be where growth stopped.
pub fn assert_tree_matches_oracle(
    node: &specmask_core::gbt::TreeNode,
    features: &[f32],
    d: usize,
    rows: Vec<usize>,
    grad: &[f64],
    hess: &[f64],
    depth: usize,
    max_depth: Option<usize>,
) {
    use specmask_core::gbt::TreeNode;
    let oracle = if rows.len() >= 2 {
        exhaustive_best_split(features, d, &rows, grad, hess, 0.0, 1)
    } else {
        None
    };
    match node {
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            let o = oracle.expect("tree split where the oracle finds none");
            assert_eq!(*feature, o.feature, "feature choice diverges at depth {depth}");
            assert!(
                (*threshold - o.threshold).abs() < 1e-12,
                "threshold {} vs oracle {}",
                threshold,
                o.threshold
            );
            let (mut l_rows, mut r_rows) = (Vec::new(), Vec::new());
            for r in rows {
                if (features[r * d + *feature] as f64) < *threshold {
                    l_rows.push(r);
                } else {
                    r_rows.push(r);
                }
            }
            assert_tree_matches_oracle(left, features, d, l_rows, grad, hess, depth + 1, max_depth);
            assert_tree_matches_oracle(right, features, d, r_rows, grad, hess, depth + 1, max_depth);
        }
        TreeNode::Leaf { .. } => {
            if let Some(md) = max_depth {
                if depth < md {
                    assert!(
                        oracle.is_none(),
                        "leaf at depth {depth} though the oracle still finds gain"
                    );
                }
            }
        }
    }
}

/// Fraction of parameter coordinates whose analytic gradient matches the
/// central finite difference within 1e-2 relative (tiny coordinates pass
/// on a 1e-4 absolute bound, where finite differences are noise-bound).
pub fn gradient_check_fraction(
    model: &specmask_core::cnn::SpectralCnn,
    rows: &[f32],
    labels: &[u8],
    h: f32,
) -> f64 {
    use specmask_core::cnn;
    let analytic = cnn::batch_gradients(model, rows, labels).unwrap();
    let params = model.params_flat();
    let mut passes = 0usize;
    for i in 0..params.len() {
        let mut plus = model.clone();
        let mut p = params.clone();
        p[i] += h;
        plus.set_params_flat(&p).unwrap();
        let mut minus = model.clone();
        p[i] = params[i] - h;
        minus.set_params_flat(&p).unwrap();
        let fd = (cnn::batch_loss(&plus, rows, labels).unwrap()
            - cnn::batch_loss(&minus, rows, labels).unwrap())
            / (2.0 * h as f64);
        let a = analytic[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        if rel <= 1e-2 || (a - fd).abs() <= 1e-4 {
            passes += 1;
        }
    }
    passes as f64 / params.len() as f64
}

/// Keep only the top-d directions of a fitted projector (principal
/// directions are nested, so truncation is the smaller fit).
pub fn truncate_projector(
    p: &specmask_core::reduce::PcaProjector,
    d: usize,
) -> specmask_core::reduce::PcaProjector {
    assert!(d <= p.d);
    let big_d = p.input_dim();
    specmask_core::reduce::PcaProjector {
        mean: p.mean.clone(),
        basis: Matrix::from_fn(big_d, d, |i, j| p.basis.get(i, j)),
        explained: p.explained[..d].to_vec(),
        d,
    }
}

// ---------------------------------------------------------------------------
// Simple statistics and classification oracles
// ---------------------------------------------------------------------------

/// Independent two-pass mean and population std of one column.
pub fn two_pass_mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Nearest-centroid classifier: centroids from labeled reference rows,
/// prediction by minimal squared distance.
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(rows: &[f32], d: usize, labels: &[u8], classes: usize) -> Self {
        let mut sums = vec![vec![0.0f64; d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &label) in rows.chunks_exact(d).zip(labels) {
            counts[label as usize] += 1;
            for (s, &v) in sums[label as usize].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        for (c, sum) in sums.iter_mut().enumerate() {
            if counts[c] > 0 {
                for s in sum.iter_mut() {
                    *s /= counts[c] as f64;
                }
            }
        }
        NearestCentroid { centroids: sums }
    }

    pub fn predict(&self, row: &[f32]) -> u8 {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, centroid) in self.centroids.iter().enumerate() {
            let dist: f64 = row
                .iter()
                .zip(centroid)
                .map(|(&x, &m)| (x as f64 - m).powi(2))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        best as u8
    }

    pub fn accuracy(&self, rows: &[f32], d: usize, labels: &[u8]) -> f64 {
        let correct = rows
            .chunks_exact(d)
            .zip(labels)
            .filter(|(row, &l)| self.predict(row) == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

/// Separable synthetic scene set, normalized, with the given split.
/// Layouts alternate across scenes so every split sees all classes.
pub fn separable_dataset(
    height: usize,
    width: usize,
    bands: usize,
    sigma: f32,
    scene_split: (usize, usize, usize),
    seed: u64,
) -> (PixelDataset, specmask_core::data::NormStats) {
    let (tr, va, te) = scene_split;
    let count = tr + va + te;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut cfg = SynthConfig::new(height, width, bands);
        cfg.noise_sigma = sigma;
        cfg.layout = match i % 3 {
            0 => Layout::Thirds,
            1 => Layout::Checkerboard,
            _ => Layout::CloudFraction(0.4),
        };
        scenes.push(synth_scene(&cfg, seed.wrapping_add(i as u64)).unwrap());
    }
    let mut ds = PixelDataset::from_scenes(&scenes, &SplitSpec::consecutive(tr, va, te)).unwrap();
    let stats = ds.fit_normalization().unwrap();
    (ds, stats)
}

/// Rows and labels of one split, flattened.
pub fn split_rows(ds: &PixelDataset, tag: SplitTag) -> (Vec<f32>, Vec<u8>) {
    let idx = ds.indices_of(tag);
    let d = ds.feature_count;
    let mut rows = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in &idx {
        rows.extend_from_slice(ds.row(i));
        labels.push(ds.labels[i]);
    }
    (rows, labels)
}

/// Accuracy of any per-pixel prediction closure over a row set.
pub fn accuracy_of(rows: &[f32], d: usize, labels: &[u8], mut predict: impl FnMut(&[f32]) -> u8) -> f64 {
    let correct = rows
        .chunks_exact(d)
        .zip(labels)
        .filter(|(row, &l)| predict(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}
