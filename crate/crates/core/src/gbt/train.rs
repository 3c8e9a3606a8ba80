//! Boosting loop and tree growth. Split finding is exact greedy over
//! sorted unique feature values with midpoint thresholds; the two growth
//! policies share the splitter and differ only in the frontier strategy
//! (FIFO for level-wise, best-gain heap for leaf-wise).

use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;

use crate::data::{PixelDataset, SplitTag, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

use super::{BoostedEnsemble, EnsembleTree, GrowthParams, GrowthPolicy, TreeNode, HESSIAN_EPS};

struct TrainData {
    features: Vec<f32>,
    labels: Vec<u8>,
    d: usize,
    /// Per feature: all row indices sorted ascending by value (row index
    /// breaks value ties).
    presorted: Vec<Vec<u32>>,
}

impl TrainData {
    #[inline]
    fn value(&self, row: u32, feature: usize) -> f32 {
        self.features[row as usize * self.d + feature]
    }
}

fn gather(dataset: &PixelDataset, tag: SplitTag) -> (Vec<f32>, Vec<u8>) {
    let idx = dataset.indices_of(tag);
    let d = dataset.feature_count;
    let mut rows = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in &idx {
        rows.extend_from_slice(dataset.row(i));
        labels.push(dataset.labels[i]);
    }
    (rows, labels)
}

/// Candidate split, already constraint-checked.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    /// Global feature index recorded in the tree.
    feature: usize,
    threshold: f64,
}

struct Node {
    arena_idx: usize,
    depth: usize,
    /// One sorted row list per active feature; all lists hold the same rows.
    rows: Vec<Vec<u32>>,
    grad_sum: f64,
    hess_sum: f64,
    best: Option<Candidate>,
    /// Creation order; deterministic tie-break in the leaf-wise heap.
    seq: u64,
}

impl Node {
    fn leaf_value(&self) -> f64 {
        -self.grad_sum / (self.hess_sum + HESSIAN_EPS)
    }

    fn count(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

// Heap entries ordered by gain, ties resolved to the earliest-created node.
struct HeapEntry(Node);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let ga = self.0.best.map_or(f64::NEG_INFINITY, |c| c.gain);
        let gb = other.0.best.map_or(f64::NEG_INFINITY, |c| c.gain);
        ga.total_cmp(&gb).then(other.0.seq.cmp(&self.0.seq))
    }
}

enum ArenaSlot {
    Pending,
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

fn arena_to_tree(arena: &[ArenaSlot], idx: usize) -> TreeNode {
    match &arena[idx] {
        ArenaSlot::Leaf(value) => TreeNode::Leaf { value: *value },
        ArenaSlot::Split {
            feature,
            threshold,
            left,
            right,
        } => TreeNode::Split {
            feature: *feature,
            threshold: *threshold,
            left: Box::new(arena_to_tree(arena, *left)),
            right: Box::new(arena_to_tree(arena, *right)),
        },
        ArenaSlot::Pending => unreachable!("unfinalized arena slot"),
    }
}

fn gain_term(g: f64, h: f64) -> f64 {
    g * g / (h + HESSIAN_EPS)
}

/// Relative slack under which two gains count as tied. Candidates whose
/// exact gains are equal can differ by a few ulps here because left-sums
/// accumulate in different orders; ties must fall to the ordered
/// tie-break (lowest feature, lowest threshold), not to that noise.
pub(crate) const GAIN_TIE_EPS: f64 = 1e-9;

pub(crate) fn gain_improves(candidate: f64, best: f64) -> bool {
    candidate > best + GAIN_TIE_EPS * candidate.abs().max(best.abs()).max(1.0)
}

/// A candidate split must clear this floor; a mathematically zero gain
/// evaluates to rounding noise of the parent term, never to more.
pub(crate) fn gain_is_real(gain: f64, parent: f64) -> bool {
    gain > 1e-12 * parent.abs().max(1.0)
}

/// Scan one feature's sorted rows for the best valid midpoint split.
/// Strict improvement keeps the lowest threshold on gain ties.
fn best_split_for_feature(
    data: &TrainData,
    feature: usize,
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    total_grad: f64,
    total_hess: f64,
    params: &GrowthParams,
) -> Option<(f64, f64)> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let parent = gain_term(total_grad, total_hess);
    let mut gl = 0.0f64;
    let mut hl = 0.0f64;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        let row = rows[i] as usize;
        gl += grad[row];
        hl += hess[row];
        let v = data.value(rows[i], feature);
        let v_next = data.value(rows[i + 1], feature);
        if v_next <= v {
            continue;
        }
        let count_left = i + 1;
        let count_right = n - count_left;
        if count_left < params.min_data_in_leaf || count_right < params.min_data_in_leaf {
            continue;
        }
        let gr = total_grad - gl;
        let hr = total_hess - hl;
        if hl < params.min_child_weight || hr < params.min_child_weight {
            continue;
        }
        let gain = 0.5 * (gain_term(gl, hl) + gain_term(gr, hr) - parent);
        if gain_is_real(gain, parent) && best.map_or(true, |(bg, _)| gain_improves(gain, bg)) {
            let threshold = 0.5 * (v as f64 + v_next as f64);
            best = Some((gain, threshold));
        }
    }
    best
}

/// Best split across the node's active features. Features fan out in
/// parallel; the reduction walks them in ascending order so equal gains
/// resolve to the lowest feature index.
fn find_best_split(
    data: &TrainData,
    node: &Node,
    active_features: &[usize],
    grad: &[f64],
    hess: &[f64],
    params: &GrowthParams,
) -> Option<Candidate> {
    let per_feature: Vec<Option<(f64, f64)>> = active_features
        .par_iter()
        .zip(node.rows.par_iter())
        .map(|(&feature, rows)| {
            best_split_for_feature(
                data,
                feature,
                rows,
                grad,
                hess,
                node.grad_sum,
                node.hess_sum,
                params,
            )
        })
        .collect();

    let mut best: Option<Candidate> = None;
    for (pos, entry) in per_feature.iter().enumerate() {
        if let Some((gain, threshold)) = entry {
            if best.map_or(true, |b| gain_improves(*gain, b.gain)) {
                best = Some(Candidate {
                    gain: *gain,
                    feature: active_features[pos],
                    threshold: *threshold,
                });
            }
        }
    }
    best
}

/// Partition every feature list by the chosen split, preserving sort order.
fn split_rows(data: &TrainData, node: &Node, cand: &Candidate) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut left = Vec::with_capacity(node.rows.len());
    let mut right = Vec::with_capacity(node.rows.len());
    for rows in &node.rows {
        let mut l = Vec::new();
        let mut r = Vec::new();
        for &row in rows {
            if (data.value(row, cand.feature) as f64) < cand.threshold {
                l.push(row);
            } else {
                r.push(row);
            }
        }
        left.push(l);
        right.push(r);
    }
    (left, right)
}

fn sums_over(rows: &[u32], grad: &[f64], hess: &[f64]) -> (f64, f64) {
    let mut g = 0.0;
    let mut h = 0.0;
    for &row in rows {
        g += grad[row as usize];
        h += hess[row as usize];
    }
    (g, h)
}

struct TreeGrower<'a> {
    data: &'a TrainData,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GrowthParams,
    active_features: Vec<usize>,
    arena: Vec<ArenaSlot>,
    next_seq: u64,
}

impl<'a> TreeGrower<'a> {
    fn new_node(&mut self, depth: usize, rows: Vec<Vec<u32>>) -> Node {
        let (grad_sum, hess_sum) = sums_over(&rows[0], self.grad, self.hess);
        let arena_idx = self.arena.len();
        self.arena.push(ArenaSlot::Pending);
        let seq = self.next_seq;
        self.next_seq += 1;
        Node {
            arena_idx,
            depth,
            rows,
            grad_sum,
            hess_sum,
            best: None,
            seq,
        }
    }

    fn finalize_leaf(&mut self, node: &Node) {
        self.arena[node.arena_idx] = ArenaSlot::Leaf(node.leaf_value());
    }

    fn apply_split(&mut self, node: Node, cand: Candidate) -> (Node, Node) {
        let (left_rows, right_rows) = split_rows(self.data, &node, &cand);
        let left = self.new_node(node.depth + 1, left_rows);
        let right = self.new_node(node.depth + 1, right_rows);
        self.arena[node.arena_idx] = ArenaSlot::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left: left.arena_idx,
            right: right.arena_idx,
        };
        (left, right)
    }

    fn best_for(&self, node: &Node) -> Option<Candidate> {
        // Degenerate nodes cannot split.
        if node.count() < 2 {
            return None;
        }
        find_best_split(self.data, node, &self.active_features, self.grad, self.hess, self.params)
    }

    /// Level-wise: breadth-first, every node at a level splits if it can,
    /// nothing deeper than max_depth.
    fn grow_level(&mut self, root_rows: Vec<Vec<u32>>) -> TreeNode {
        let root = self.new_node(0, root_rows);
        let mut frontier = VecDeque::new();
        frontier.push_back(root);
        while let Some(node) = frontier.pop_front() {
            if node.depth >= self.params.max_depth {
                self.finalize_leaf(&node);
                continue;
            }
            match self.best_for(&node) {
                Some(cand) => {
                    let (l, r) = self.apply_split(node, cand);
                    frontier.push_back(l);
                    frontier.push_back(r);
                }
                None => self.finalize_leaf(&node),
            }
        }
        arena_to_tree(&self.arena, 0)
    }

    /// Leaf-wise: always split the frontier leaf with the greatest gain
    /// until num_leaves is reached or no split reduces the loss.
    fn grow_leaf(&mut self, root_rows: Vec<Vec<u32>>) -> TreeNode {
        let mut root = self.new_node(0, root_rows);
        root.best = self.best_for(&root);
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry(root));
        let mut leaves = 1usize;
        while leaves < self.params.num_leaves {
            let Some(HeapEntry(node)) = heap.pop() else {
                break;
            };
            let Some(cand) = node.best else {
                // Highest-priority leaf has no valid split; neither does
                // anything below it in the heap with a real candidate left?
                // Entries without candidates sort last, so once one surfaces
                // the frontier is done.
                self.finalize_leaf(&node);
                // Drain remaining unsplittable entries.
                while let Some(HeapEntry(rest)) = heap.pop() {
                    self.finalize_leaf(&rest);
                }
                return arena_to_tree(&self.arena, 0);
            };
            let (mut l, mut r) = self.apply_split(node, cand);
            leaves += 1;
            l.best = self.best_for(&l);
            r.best = self.best_for(&r);
            heap.push(HeapEntry(l));
            heap.push(HeapEntry(r));
        }
        while let Some(HeapEntry(node)) = heap.pop() {
            self.finalize_leaf(&node);
        }
        arena_to_tree(&self.arena, 0)
    }
}

fn softmax_rows(scores: &[f64], classes: usize, out: &mut [f64]) {
    for (src, dst) in scores.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(src) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

fn mean_ce(scores: &[f64], labels: &[u8], classes: usize) -> f64 {
    let mut loss = 0.0;
    for (row, &label) in scores.chunks_exact(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let logp = row[label as usize] - max - sum.ln();
        loss -= logp;
    }
    loss / labels.len() as f64
}

/// Second-order softmax boosting over the dataset's train rows, with
/// optional early stopping on the validation rows. One tree per class per
/// round; deterministic per seed (the RNG is only consumed when
/// subsample or colsample is below 1).
pub fn train_boosted(
    dataset: &PixelDataset,
    params: &GrowthParams,
    policy: GrowthPolicy,
    seed: u64,
) -> Result<BoostedEnsemble> {
    params.validate()?;
    let (features, labels) = gather(dataset, SplitTag::Train);
    if labels.is_empty() {
        return Err(Error::invalid_argument("dataset has no train rows".to_string()));
    }
    let d = dataset.feature_count;
    let n = labels.len();
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite feature value in train rows".to_string()));
    }

    let mut presorted = Vec::with_capacity(d);
    for f in 0..d {
        let mut idx: Vec<u32> = (0..n as u32).collect();
        idx.sort_by(|&a, &b| {
            features[a as usize * d + f]
                .total_cmp(&features[b as usize * d + f])
                .then(a.cmp(&b))
        });
        presorted.push(idx);
    }
    let data = TrainData {
        features,
        labels,
        d,
        presorted,
    };

    let (val_rows, val_labels) = gather(dataset, SplitTag::Val);
    let has_val = !val_labels.is_empty();
    let classes = CLASS_COUNT;

    let mut ensemble = BoostedEnsemble::empty(policy, params.clone(), d);
    let mut rng = seeded_rng(seed);

    let mut scores = vec![ensemble.base_score; n * classes];
    let mut val_scores = vec![ensemble.base_score; val_labels.len() * classes];
    let mut probs = vec![0.0f64; n * classes];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];

    let mut best_loss = f64::INFINITY;
    let mut best_round = 0usize;

    for round in 0..params.num_boost_round {
        softmax_rows(&scores, classes, &mut probs);

        // Row sample is drawn once per round and shared by the class trees.
        let row_mask: Option<Vec<bool>> = if params.subsample < 1.0 {
            let k = ((params.subsample * n as f64).floor() as usize).max(1);
            let mut mask = vec![false; n];
            for i in rand::seq::index::sample(&mut rng, n, k) {
                mask[i] = true;
            }
            Some(mask)
        } else {
            None
        };

        for class in 0..classes {
            for i in 0..n {
                let p = probs[i * classes + class];
                let y = (data.labels[i] as usize == class) as u8 as f64;
                grad[i] = p - y;
                hess[i] = p * (1.0 - p);
            }

            let active_features: Vec<usize> = if params.colsample < 1.0 {
                let k = ((params.colsample * d as f64).floor() as usize).max(1);
                let mut sel: Vec<usize> = rand::seq::index::sample(&mut rng, d, k).into_vec();
                sel.sort_unstable();
                sel
            } else {
                (0..d).collect()
            };

            let root_rows: Vec<Vec<u32>> = active_features
                .iter()
                .map(|&f| match &row_mask {
                    Some(mask) => data.presorted[f]
                        .iter()
                        .copied()
                        .filter(|&r| mask[r as usize])
                        .collect(),
                    None => data.presorted[f].clone(),
                })
                .collect();

            let mut grower = TreeGrower {
                data: &data,
                grad: &grad,
                hess: &hess,
                params,
                active_features,
                arena: Vec::new(),
                next_seq: 0,
            };
            let root = match policy {
                GrowthPolicy::Level => grower.grow_level(root_rows),
                GrowthPolicy::Leaf => grower.grow_leaf(root_rows),
            };

            // Scores advance for every row, sampled or not.
            for i in 0..n {
                scores[i * classes + class] +=
                    params.learning_rate * root.predict(&data.features[i * d..(i + 1) * d]);
            }
            for (i, row) in val_rows.chunks_exact(d).enumerate() {
                val_scores[i * classes + class] += params.learning_rate * root.predict(row);
            }

            ensemble.trees.push(EnsembleTree {
                round,
                class_id: class,
                root,
            });
        }

        if has_val && params.early_stop_patience > 0 {
            let loss = mean_ce(&val_scores, &val_labels, classes);
            if loss < best_loss {
                best_loss = loss;
                best_round = round;
            } else if round - best_round >= params.early_stop_patience {
                break;
            }
        } else {
            best_round = round;
        }
    }

    // Keep only the rounds up to the validation optimum.
    if has_val && params.early_stop_patience > 0 {
        ensemble.trees.retain(|t| t.round <= best_round);
    }
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PixelDataset, SplitTag};

    /// Small labeled dataset helper: each row (features, label, tag).
    fn dataset(rows: &[(Vec<f32>, u8, SplitTag)]) -> PixelDataset {
        let d = rows[0].0.len();
        PixelDataset {
            features: rows.iter().flat_map(|(f, _, _)| f.clone()).collect(),
            feature_count: d,
            labels: rows.iter().map(|(_, l, _)| *l).collect(),
            split: rows.iter().map(|(_, _, t)| *t).collect(),
        }
    }

    /// Three well-separated clusters on a single feature.
    fn three_cluster_dataset(per_class: usize, tag_val: bool) -> PixelDataset {
        let mut rows = Vec::new();
        for i in 0..per_class {
            let jitter = i as f32 * 0.01;
            for (c, center) in [(0u8, 0.0f32), (1, 5.0), (2, 10.0)] {
                rows.push((vec![center + jitter, 1.0], c, SplitTag::Train));
                if tag_val {
                    rows.push((vec![center + jitter + 0.005, 1.0], c, SplitTag::Val));
                }
            }
        }
        dataset(&rows)
    }

    #[test]
    fn separable_data_reaches_full_train_accuracy() {
        let ds = three_cluster_dataset(10, true);
        let params = GrowthParams {
            max_depth: 2,
            num_boost_round: 10,
            learning_rate: 0.3,
            ..Default::default()
        };
        let e = train_boosted(&ds, &params, GrowthPolicy::Level, 0).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let probs = e.predict(ds.row(i)).unwrap();
            if crate::cnn::argmax(&probs) == ds.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn single_class_data_saturates_quickly() {
        let rows: Vec<(Vec<f32>, u8, SplitTag)> = (0..30)
            .map(|i| (vec![i as f32, -(i as f32)], 1u8, SplitTag::Train))
            .collect();
        let ds = dataset(&rows);
        let params = GrowthParams {
            num_boost_round: 1,
            learning_rate: 1.0,
            ..Default::default()
        };
        let e = train_boosted(&ds, &params, GrowthPolicy::Level, 0).unwrap();
        for i in 0..ds.len() {
            let probs = e.predict(ds.row(i)).unwrap();
            assert!(probs[1] >= 0.9, "row {i}: {probs:?}");
        }
    }

    #[test]
    fn empty_train_split_rejected() {
        let rows = vec![(vec![0.0f32], 0u8, SplitTag::Test)];
        let ds = dataset(&rows);
        assert!(matches!(
            train_boosted(&ds, &GrowthParams::default(), GrowthPolicy::Level, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn level_trees_respect_depth_bound() {
        let ds = three_cluster_dataset(20, false);
        for max_depth in [1, 2, 3] {
            let params = GrowthParams {
                max_depth,
                num_boost_round: 4,
                ..Default::default()
            };
            let e = train_boosted(&ds, &params, GrowthPolicy::Level, 0).unwrap();
            for t in &e.trees {
                assert!(t.root.max_depth() <= max_depth);
                assert!(t.root.leaf_count() <= 1 << max_depth);
            }
        }
    }

    #[test]
    fn leaf_trees_respect_leaf_bound() {
        let ds = three_cluster_dataset(20, false);
        for num_leaves in [2, 3, 5] {
            let params = GrowthParams {
                num_leaves,
                num_boost_round: 4,
                ..Default::default()
            };
            let e = train_boosted(&ds, &params, GrowthPolicy::Leaf, 0).unwrap();
            for t in &e.trees {
                assert!(t.root.leaf_count() <= num_leaves);
            }
        }
    }

    #[test]
    fn full_data_training_ignores_seed() {
        let ds = three_cluster_dataset(12, true);
        let params = GrowthParams {
            num_boost_round: 6,
            ..Default::default()
        };
        let a = train_boosted(&ds, &params, GrowthPolicy::Level, 1).unwrap();
        let b = train_boosted(&ds, &params, GrowthPolicy::Level, 999).unwrap();
        assert_eq!(a.trees, b.trees);
        let c = train_boosted(&ds, &params, GrowthPolicy::Leaf, 1).unwrap();
        let e = train_boosted(&ds, &params, GrowthPolicy::Leaf, 999).unwrap();
        assert_eq!(c.trees, e.trees);
    }

    #[test]
    fn subsampled_training_is_deterministic_per_seed() {
        let ds = three_cluster_dataset(12, true);
        let params = GrowthParams {
            subsample: 0.7,
            colsample: 0.5,
            num_boost_round: 5,
            ..Default::default()
        };
        let a = train_boosted(&ds, &params, GrowthPolicy::Level, 7).unwrap();
        let b = train_boosted(&ds, &params, GrowthPolicy::Level, 7).unwrap();
        assert_eq!(a.trees, b.trees);
    }

    #[test]
    fn train_loss_never_increases_with_rounds() {
        // With full-data training, ensembles are prefix-stable: evaluating
        // truncations of one long run walks the loss round by round.
        let ds = three_cluster_dataset(15, false);
        let params = GrowthParams {
            num_boost_round: 12,
            learning_rate: 0.3,
            early_stop_patience: 0,
            ..Default::default()
        };
        let full = train_boosted(&ds, &params, GrowthPolicy::Level, 0).unwrap();
        let (rows, labels) = gather(&ds, SplitTag::Train);
        let mut prev = f64::INFINITY;
        for k in 0..=12 {
            let mut e = full.clone();
            e.trees.retain(|t| t.round < k);
            let loss = e.mean_loss(&rows, &labels).unwrap();
            assert!(loss <= prev + 1e-12, "round {k}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn leaf_policy_reaches_greater_depth_with_fewer_leaves() {
        // A staircase target forces a deep chain under leaf-wise growth.
        let rows: Vec<(Vec<f32>, u8, SplitTag)> = (0..32)
            .map(|i| {
                let class = if i < 28 { (i % 2) as u8 } else { 2u8 };
                (vec![i as f32], class, SplitTag::Train)
            })
            .collect();
        let ds = dataset(&rows);
        let params = GrowthParams {
            num_leaves: 6,
            num_boost_round: 1,
            ..Default::default()
        };
        let e = train_boosted(&ds, &params, GrowthPolicy::Leaf, 0).unwrap();
        for t in &e.trees {
            assert!(t.root.leaf_count() <= 6);
        }
        let deepest = e.trees.iter().map(|t| t.root.max_depth()).max().unwrap();
        assert!(deepest >= 3, "expected an unbalanced chain, got depth {deepest}");
    }
}
