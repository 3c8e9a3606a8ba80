//! Analytic per-pixel computational cost and hardware feasibility.
//!
//! FLOP convention, applied uniformly: each multiply-accumulate counts
//! two; each bias add, activation, pool comparison and softmax element
//! counts one. Tree traversal is accounted separately in floating-point
//! comparisons; boosting arithmetic is one leaf-value accumulation per
//! tree plus the softmax. The instrumented counters in this module
//! execute the real arithmetic op by op so the analytic formulas can be
//! checked for exact equality.

use std::path::Path;

use crate::cnn::{softmax, ConvStage, ParamCounts, SpectralCnn};
use crate::error::{Error, Result};
use crate::gbt::BoostedEnsemble;
use crate::reduce::ReducedModel;

/// Per-pixel comparison count: exact for uniform-depth trees, a range
/// over root-to-leaf paths otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparisons {
    Exact(u64),
    Range { min: u64, max: u64 },
}

impl Comparisons {
    pub fn min(&self) -> u64 {
        match *self {
            Comparisons::Exact(v) => v,
            Comparisons::Range { min, .. } => min,
        }
    }

    pub fn max(&self) -> u64 {
        match *self {
            Comparisons::Exact(v) => v,
            Comparisons::Range { max, .. } => max,
        }
    }

    pub fn contains(&self, v: u64) -> bool {
        v >= self.min() && v <= self.max()
    }
}

impl std::fmt::Display for Comparisons {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Comparisons::Exact(v) => write!(f, "{v}"),
            Comparisons::Range { min, max } => write!(f, "({min}-{max})"),
        }
    }
}

/// One stage of the per-pixel cost breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostStage {
    pub name: String,
    pub flops: u64,
    pub comparisons_min: u64,
    pub comparisons_max: u64,
}

/// Per-pixel cost plus storage accounting for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub model_kind: String,
    pub flops_per_pixel: u64,
    pub comparisons_per_pixel: Comparisons,
    pub params_trainable: usize,
    pub params_total: usize,
    /// Serialized parameter bytes (4 B for CNN-family weights, 8 B per
    /// stored tree value).
    pub bytes: usize,
    pub breakdown: Vec<CostStage>,
}

impl CostReport {
    pub fn kflops(&self) -> f64 {
        self.flops_per_pixel as f64 / 1000.0
    }

    /// Breakdown totals must equal the headline numbers.
    pub fn breakdown_consistent(&self) -> bool {
        let flops: u64 = self.breakdown.iter().map(|s| s.flops).sum();
        let cmin: u64 = self.breakdown.iter().map(|s| s.comparisons_min).sum();
        let cmax: u64 = self.breakdown.iter().map(|s| s.comparisons_max).sum();
        flops == self.flops_per_pixel
            && cmin == self.comparisons_per_pixel.min()
            && cmax == self.comparisons_per_pixel.max()
    }

    pub fn csv_header() -> &'static str {
        "model,flops_per_pixel,comparisons_min,comparisons_max,params_trainable,params_total,bytes"
    }

    pub fn to_csv_row(&self, model: &str) -> String {
        format!(
            "{model},{},{},{},{},{},{}",
            self.flops_per_pixel,
            self.comparisons_per_pixel.min(),
            self.comparisons_per_pixel.max(),
            self.params_trainable,
            self.params_total,
            self.bytes
        )
    }
}

// ---------------------------------------------------------------------------
// CNN costs
// ---------------------------------------------------------------------------

fn conv_stage_cost(stage: &ConvStage, in_len: usize) -> (CostStage, usize) {
    let out_len = in_len - stage.kernel() + 1;
    let out_ch = stage.out_channels();
    let cols = stage.in_channels() * stage.kernel();
    let mac_and_bias = match stage {
        // out_len positions, each: cols MACs and one bias add per channel.
        ConvStage::Full(_) => out_ch as u64 * out_len as u64 * (2 * cols as u64 + 1),
        // Two thin products per position: rank*cols then out*rank MACs.
        ConvStage::Factorized(f) => {
            out_len as u64 * (2 * (f.rank * cols) as u64 + 2 * (out_ch * f.rank) as u64)
                + (out_ch * out_len) as u64
        }
    };
    let relu = (out_ch * out_len) as u64;
    let pool = (out_ch * (out_len / 2)) as u64;
    let name = match stage {
        ConvStage::Full(_) => "conv",
        ConvStage::Factorized(_) => "conv-factorized",
    };
    (
        CostStage {
            name: name.to_string(),
            flops: mac_and_bias + relu + pool,
            comparisons_min: 0,
            comparisons_max: 0,
        },
        crate::cnn::pooled_len(out_len),
    )
}

fn dense_softmax_stages(model: &SpectralCnn) -> Vec<CostStage> {
    let dense = &model.dense;
    let dense_flops = 2 * (dense.out_features * dense.in_features) as u64
        + dense.bias.as_ref().map_or(0, |b| b.len() as u64);
    vec![
        CostStage {
            name: "dense".to_string(),
            flops: dense_flops,
            comparisons_min: 0,
            comparisons_max: 0,
        },
        CostStage {
            name: "softmax".to_string(),
            flops: model.class_count as u64,
            comparisons_min: 0,
            comparisons_max: 0,
        },
    ]
}

fn finish_report(kind: &str, breakdown: Vec<CostStage>, params: ParamCounts) -> CostReport {
    let flops = breakdown.iter().map(|s| s.flops).sum();
    CostReport {
        model_kind: kind.to_string(),
        flops_per_pixel: flops,
        comparisons_per_pixel: Comparisons::Exact(0),
        params_trainable: params.trainable,
        params_total: params.total,
        bytes: params.bytes_at_4b,
        breakdown,
    }
}

/// Analytic per-pixel cost of a (possibly factorized) spectral CNN.
pub fn cnn_cost(model: &SpectralCnn) -> CostReport {
    let mut breakdown = Vec::with_capacity(model.conv_stack.len() + 2);
    let mut len = model.input_length;
    for (i, stage) in model.conv_stack.iter().enumerate() {
        let (mut s, next_len) = conv_stage_cost(stage, len);
        s.name = format!("{}{}", s.name, i + 1);
        breakdown.push(s);
        len = next_len;
    }
    breakdown.extend(dense_softmax_stages(model));
    finish_report("cnn", breakdown, model.count_params())
}

/// Analytic per-pixel cost of a reduced model; the frozen projection
/// contributes D centering subtractions plus 2*D*d projection MACs.
pub fn reduced_cost(model: &ReducedModel) -> CostReport {
    let big_d = model.projector.input_dim() as u64;
    let d = model.projector.d as u64;
    let mut breakdown = vec![CostStage {
        name: "projection".to_string(),
        flops: big_d + 2 * big_d * d,
        comparisons_min: 0,
        comparisons_max: 0,
    }];
    let head = cnn_cost(&model.head);
    breakdown.extend(head.breakdown);
    finish_report("cnn-reduced", breakdown, model.count_params())
}

/// Analytic per-pixel cost of a boosted ensemble: comparisons from
/// root-to-leaf path lengths (exact when every leaf of every tree sits at
/// one depth), one leaf-value accumulation per tree, one softmax element
/// per class.
pub fn gbt_cost(ensemble: &BoostedEnsemble) -> CostReport {
    let mut cmin = 0u64;
    let mut cmax = 0u64;
    for tree in &ensemble.trees {
        let depths = tree.root.leaf_depths();
        cmin += depths.iter().copied().min().unwrap_or(0) as u64;
        cmax += depths.iter().copied().max().unwrap_or(0) as u64;
    }
    let comparisons = if cmin == cmax {
        Comparisons::Exact(cmin)
    } else {
        Comparisons::Range { min: cmin, max: cmax }
    };
    let stats = ensemble.tree_stats();
    let accum_flops = ensemble.trees.len() as u64;
    let softmax_flops = ensemble.class_count as u64;
    let stored_values = 2 * (stats.total_nodes - stats.total_leaves) + stats.total_leaves;
    CostReport {
        model_kind: format!("gbt-{}", ensemble.policy.name()),
        flops_per_pixel: accum_flops + softmax_flops,
        comparisons_per_pixel: comparisons,
        params_trainable: stored_values,
        params_total: stored_values,
        bytes: stats.bytes_estimate,
        breakdown: vec![
            CostStage {
                name: "traversal".to_string(),
                flops: 0,
                comparisons_min: cmin,
                comparisons_max: cmax,
            },
            CostStage {
                name: "leaf-accumulate".to_string(),
                flops: accum_flops,
                comparisons_min: 0,
                comparisons_max: 0,
            },
            CostStage {
                name: "softmax".to_string(),
                flops: softmax_flops,
                comparisons_min: 0,
                comparisons_max: 0,
            },
        ],
    }
}

// ---------------------------------------------------------------------------
// Instrumented forward passes
// ---------------------------------------------------------------------------

/// Scalar-operation tally from an instrumented pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub flops: u64,
    pub comparisons: u64,
}

/// Forward pass that performs the arithmetic element by element,
/// incrementing the tally at every scalar operation. Exists so the
/// analytic formulas in this module can be checked exactly.
pub fn counted_cnn_forward(model: &SpectralCnn, features: &[f32]) -> Result<(Vec<f32>, OpCounts)> {
    if features.len() != model.input_length {
        return Err(Error::invalid_argument("feature length mismatch".to_string()));
    }
    let mut counts = OpCounts::default();
    let mut signal = features.to_vec();
    let mut channels = 1usize;
    let mut len = model.input_length;

    for stage in &model.conv_stack {
        let k = stage.kernel();
        let out_len = len - k + 1;
        let out_ch = stage.out_channels();
        let cols = stage.in_channels() * k;

        // Window matrix, gathered without arithmetic.
        let mut window = vec![0.0f32; cols * out_len];
        for c in 0..stage.in_channels() {
            for j in 0..k {
                for t in 0..out_len {
                    window[(c * k + j) * out_len + t] = signal[c * len + t + j];
                }
            }
        }

        let mut y = vec![0.0f32; out_ch * out_len];
        match stage {
            ConvStage::Full(l) => {
                for o in 0..out_ch {
                    for t in 0..out_len {
                        let mut acc = 0.0f32;
                        for p in 0..cols {
                            acc += l.weights[o * cols + p] * window[p * out_len + t];
                            counts.flops += 2;
                        }
                        acc += l.bias[o];
                        counts.flops += 1;
                        y[o * out_len + t] = acc;
                    }
                }
            }
            ConvStage::Factorized(f) => {
                let r = f.rank;
                let mut z = vec![0.0f32; r * out_len];
                for q in 0..r {
                    for t in 0..out_len {
                        let mut acc = 0.0f32;
                        for p in 0..cols {
                            acc += f.factor_b[q * cols + p] * window[p * out_len + t];
                            counts.flops += 2;
                        }
                        z[q * out_len + t] = acc;
                    }
                }
                for o in 0..out_ch {
                    for t in 0..out_len {
                        let mut acc = 0.0f32;
                        for q in 0..r {
                            acc += f.factor_a[o * r + q] * z[q * out_len + t];
                            counts.flops += 2;
                        }
                        acc += f.bias[o];
                        counts.flops += 1;
                        y[o * out_len + t] = acc;
                    }
                }
            }
        }

        for v in &mut y {
            counts.flops += 1;
            if *v < 0.0 {
                *v = 0.0;
            }
        }

        let plen = crate::cnn::pooled_len(out_len);
        let mut pooled = vec![0.0f32; out_ch * plen];
        for c in 0..out_ch {
            if out_len == 1 {
                pooled[c * plen] = y[c * out_len];
                continue;
            }
            for t in 0..plen {
                let a = y[c * out_len + 2 * t];
                let b = y[c * out_len + 2 * t + 1];
                counts.flops += 1;
                pooled[c * plen + t] = if b > a { b } else { a };
            }
        }
        signal = pooled;
        channels = out_ch;
        len = plen;
    }
    let _ = channels;

    let dense = &model.dense;
    let mut logits = vec![0.0f32; dense.out_features];
    for o in 0..dense.out_features {
        let mut acc = 0.0f32;
        for i in 0..dense.in_features {
            acc += dense.weights[o * dense.in_features + i] * signal[i];
            counts.flops += 2;
        }
        if let Some(bias) = &dense.bias {
            acc += bias[o];
            counts.flops += 1;
        }
        logits[o] = acc;
    }
    counts.flops += model.class_count as u64;
    Ok((softmax(&logits), counts))
}

/// Instrumented reduced-model pass: centering and projection count
/// per scalar, then the head runs through [`counted_cnn_forward`].
pub fn counted_reduced_forward(model: &ReducedModel, features: &[f32]) -> Result<(Vec<f32>, OpCounts)> {
    let p = &model.projector;
    if features.len() != p.input_dim() {
        return Err(Error::invalid_argument("feature length mismatch".to_string()));
    }
    let mut counts = OpCounts::default();
    let big_d = p.input_dim();
    let mut centered = vec![0.0f32; big_d];
    for i in 0..big_d {
        centered[i] = features[i] - p.mean[i];
        counts.flops += 1;
    }
    let mut reduced = vec![0.0f32; p.d];
    for (j, out) in reduced.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (i, &c) in centered.iter().enumerate() {
            acc += c * p.basis.get(i, j);
            counts.flops += 2;
        }
        *out = acc;
    }
    let (probs, head_counts) = counted_cnn_forward(&model.head, &reduced)?;
    counts.flops += head_counts.flops;
    counts.comparisons += head_counts.comparisons;
    Ok((probs, counts))
}

// ---------------------------------------------------------------------------
// Feasibility
// ---------------------------------------------------------------------------

/// Memory envelope of a deployment target. The defaults encode the
/// on-board SoC used for feasibility mapping: 32 KB of L1 data cache,
/// which holds up to 8K parameters in 4-byte form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardwareBudget {
    pub name: String,
    pub cache_bytes: u64,
    pub max_params_4byte: u64,
}

impl Default for HardwareBudget {
    fn default() -> Self {
        HardwareBudget {
            name: "zynq-7030".to_string(),
            cache_bytes: 32 * 1024,
            max_params_4byte: 8 * 1024,
        }
    }
}

impl HardwareBudget {
    /// Parse a key=value profile file. Recognized keys: `name`,
    /// `cache_bytes`, `max_params_4byte`. Unspecified keys keep defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut budget = HardwareBudget::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid_data(format!("budget file line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => budget.name = value.to_string(),
                "cache_bytes" => {
                    budget.cache_bytes = value.parse().map_err(|_| {
                        Error::invalid_data(format!("budget file line {}: bad cache_bytes", lineno + 1))
                    })?
                }
                "max_params_4byte" => {
                    budget.max_params_4byte = value.parse().map_err(|_| {
                        Error::invalid_data(format!(
                            "budget file line {}: bad max_params_4byte",
                            lineno + 1
                        ))
                    })?
                }
                other => {
                    return Err(Error::invalid_data(format!(
                        "budget file line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if budget.cache_bytes == 0 || budget.max_params_4byte == 0 {
            return Err(Error::invalid_data("budget values must be positive".to_string()));
        }
        Ok(budget)
    }
}

/// Outcome of checking a cost report against a hardware budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibilityVerdict {
    pub budget_name: String,
    pub fits_cache: bool,
    pub fits_param_limit: bool,
    /// cache_bytes - bytes (negative when over).
    pub margin_bytes: i64,
    /// max_params - params_total (negative when over).
    pub margin_params: i64,
}

impl FeasibilityVerdict {
    pub fn feasible(&self) -> bool {
        self.fits_cache && self.fits_param_limit
    }
}

pub fn feasibility(report: &CostReport, budget: &HardwareBudget) -> FeasibilityVerdict {
    FeasibilityVerdict {
        budget_name: budget.name.clone(),
        fits_cache: report.bytes as u64 <= budget.cache_bytes,
        fits_param_limit: report.params_total as u64 <= budget.max_params_4byte,
        margin_bytes: budget.cache_bytes as i64 - report.bytes as i64,
        margin_params: budget.max_params_4byte as i64 - report.params_total as i64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{build_default_arch, Conv1dLayer, DenseLayer};
    use crate::gbt::{EnsembleTree, GrowthParams, GrowthPolicy, TreeNode};

    #[test]
    fn single_toy_conv_stage_costs_four_flops() {
        // conv(1->1, k=1) on a length-1 input: 1 MAC (2) + bias (1) +
        // activation (1); the pool sees a single element and is free.
        let model = SpectralCnn {
            input_length: 1,
            conv_stack: vec![ConvStage::Full(Conv1dLayer::zeros(1, 1, 1))],
            dense: DenseLayer::zeros(1, 3, false),
            class_count: 3,
            norm: None,
        };
        let report = cnn_cost(&model);
        assert_eq!(report.breakdown[0].flops, 4);
        assert!(report.breakdown_consistent());
    }

    #[test]
    fn baseline_cost_lands_near_published_value() {
        let model = build_default_arch(112, 3).unwrap();
        let report = cnn_cost(&model);
        let rel = (report.flops_per_pixel as f64 - 124_420.0).abs() / 124_420.0;
        assert!(rel < 0.05, "baseline {} kFLOP off by {rel}", report.kflops());
    }

    #[test]
    fn instrumented_forward_matches_analytic_exactly() {
        for input_len in [1usize, 7, 18, 30, 112] {
            let mut model = build_default_arch(input_len, 3).unwrap();
            model.init_weights(5);
            let report = cnn_cost(&model);
            let features: Vec<f32> = (0..input_len).map(|i| (i as f32 * 0.37).sin()).collect();
            let (probs, counts) = counted_cnn_forward(&model, &features).unwrap();
            assert_eq!(
                counts.flops, report.flops_per_pixel,
                "input_len {input_len}: instrumented {} vs analytic {}",
                counts.flops, report.flops_per_pixel
            );
            let direct = model.forward(&features).unwrap();
            assert_eq!(crate::cnn::argmax(&probs), crate::cnn::argmax(&direct));
        }
    }

    #[test]
    fn factorized_model_cost_drops_and_matches_instrumented() {
        let mut model = build_default_arch(112, 3).unwrap();
        model.init_weights(5);
        let full = cnn_cost(&model);
        let compressed = crate::compress::compress_model(&model, 1419).unwrap().model;
        let report = cnn_cost(&compressed);
        assert!(report.flops_per_pixel < full.flops_per_pixel);
        let features: Vec<f32> = (0..112).map(|i| (i as f32 * 0.11).cos()).collect();
        let (_, counts) = counted_cnn_forward(&compressed, &features).unwrap();
        assert_eq!(counts.flops, report.flops_per_pixel);
    }

    #[test]
    fn balanced_tree_comparisons_are_exact() {
        fn full(depth: usize) -> TreeNode {
            if depth == 0 {
                TreeNode::Leaf { value: 0.0 }
            } else {
                TreeNode::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: Box::new(full(depth - 1)),
                    right: Box::new(full(depth - 1)),
                }
            }
        }
        let mut e = BoostedEnsemble::empty(GrowthPolicy::Level, GrowthParams::default(), 1);
        for i in 0..66 {
            e.trees.push(EnsembleTree {
                round: i / 3,
                class_id: i % 3,
                root: full(5),
            });
        }
        let report = gbt_cost(&e);
        assert_eq!(report.comparisons_per_pixel, Comparisons::Exact(330));
        assert!(report.breakdown_consistent());
        // Instrumented traversal agrees on any input.
        let (_, comps) = e.predict_counted(&[0.3]).unwrap();
        assert_eq!(comps, 330);
    }

    #[test]
    fn empty_ensemble_has_zero_comparisons() {
        let e = BoostedEnsemble::empty(GrowthPolicy::Leaf, GrowthParams::default(), 2);
        let report = gbt_cost(&e);
        assert_eq!(report.comparisons_per_pixel, Comparisons::Exact(0));
        assert_eq!(report.flops_per_pixel, 3); // softmax only
    }

    #[test]
    fn unbalanced_tree_reports_leaf_depth_range() {
        // Leaf depths {2, 2, 5, ...}: chain one side down to depth 5.
        fn chain(depth: usize) -> TreeNode {
            if depth == 0 {
                TreeNode::Leaf { value: 1.0 }
            } else {
                TreeNode::Split {
                    feature: 0,
                    threshold: depth as f64,
                    left: Box::new(chain(depth - 1)),
                    right: Box::new(TreeNode::Leaf { value: 0.0 }),
                }
            }
        }
        let t = TreeNode::Split {
            feature: 0,
            threshold: 10.0,
            left: Box::new(TreeNode::Split {
                feature: 0,
                threshold: 5.0,
                left: Box::new(TreeNode::Leaf { value: 0.0 }),
                right: Box::new(TreeNode::Leaf { value: 0.0 }),
            }),
            right: Box::new(chain(4)),
        };
        let mut depths = t.leaf_depths();
        depths.sort_unstable();
        assert_eq!(*depths.first().unwrap(), 2);
        assert_eq!(*depths.last().unwrap(), 5);

        let mut e = BoostedEnsemble::empty(GrowthPolicy::Leaf, GrowthParams::default(), 1);
        e.trees.push(EnsembleTree { round: 0, class_id: 0, root: t });
        let report = gbt_cost(&e);
        assert_eq!(report.comparisons_per_pixel, Comparisons::Range { min: 2, max: 5 });
        // Every traversal lands inside the reported range.
        for x in [-100.0f32, 0.0, 1.5, 2.5, 3.5, 4.5, 7.0, 100.0] {
            let (_, comps) = e.predict_counted(&[x]).unwrap();
            assert!(report.comparisons_per_pixel.contains(comps), "x={x}: {comps}");
        }
    }

    #[test]
    fn feasibility_margins() {
        let model = build_default_arch(112, 3).unwrap();
        let report = cnn_cost(&model);
        let verdict = feasibility(&report, &HardwareBudget::default());
        assert!(verdict.feasible());
        assert_eq!(verdict.margin_bytes, 32768 - 18252);

        let mut fat = report.clone();
        fat.params_total = 8193;
        let verdict = feasibility(&fat, &HardwareBudget::default());
        assert!(!verdict.fits_param_limit);
        assert_eq!(verdict.margin_params, -1);
    }

    #[test]
    fn compressed_model_fits_with_headroom() {
        let mut model = build_default_arch(112, 3).unwrap();
        model.init_weights(2);
        let compressed = crate::compress::compress_model(&model, 1419).unwrap().model;
        let report = cnn_cost(&compressed);
        let budget = HardwareBudget::default();
        let verdict = feasibility(&report, &budget);
        assert!(verdict.feasible());
        // At least 4x headroom against the parameter limit.
        assert!(budget.max_params_4byte as usize >= 4 * report.params_total);
    }

    #[test]
    fn budget_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("budget.conf");
        std::fs::write(&path, "# target\nname = test-soc\ncache_bytes=1024\nmax_params_4byte = 256\n").unwrap();
        let b = HardwareBudget::from_file(&path).unwrap();
        assert_eq!(b.name, "test-soc");
        assert_eq!(b.cache_bytes, 1024);
        assert_eq!(b.max_params_4byte, 256);

        std::fs::write(&path, "bogus_key=1\n").unwrap();
        assert!(HardwareBudget::from_file(&path).is_err());
    }
}
