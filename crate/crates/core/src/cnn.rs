//! Per-pixel 1D spectral CNN: architecture construction, forward inference,
//! gradient training and parameter accounting. Convolutions slide along the
//! spectral axis only; there is no spatial context.
//!
//! Layer weights are stored as the `out x (in*kernel)` unfolding so the
//! forward pass is a matrix product against im2col columns and low-rank
//! factorization operates on the same matrix.

use crate::compress::FactorizedConv1dLayer;
use crate::data::{NormStats, PixelDataset, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng;

/// Kernel width of the default architecture.
pub const DEFAULT_KERNEL: usize = 6;
/// Output channel widths of the default conv stack.
pub const DEFAULT_CHANNELS: [usize; 4] = [6, 12, 18, 24];

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Valid (no padding) 1D convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x (in*kernel)` row-major unfolding; row o is the filter bank
    /// for output channel o, laid out `[in][kernel]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv1dLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1dLayer {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }

    /// Columns of the unfolded weight matrix.
    pub fn unfolded_cols(&self) -> usize {
        self.in_channels * self.kernel
    }
}

/// A conv stage is either a full layer or its low-rank factorization.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvStage {
    Full(Conv1dLayer),
    Factorized(FactorizedConv1dLayer),
}

impl ConvStage {
    pub fn in_channels(&self) -> usize {
        match self {
            ConvStage::Full(l) => l.in_channels,
            ConvStage::Factorized(l) => l.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvStage::Full(l) => l.out_channels,
            ConvStage::Factorized(l) => l.out_channels,
        }
    }

    pub fn kernel(&self) -> usize {
        match self {
            ConvStage::Full(l) => l.kernel,
            ConvStage::Factorized(l) => l.kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ConvStage::Full(l) => l.param_count(),
            ConvStage::Factorized(l) => l.param_count(),
        }
    }
}

/// Final affine map from the flattened conv output to class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`, row-major.
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl DenseLayer {
    pub fn zeros(in_features: usize, out_features: usize, with_bias: bool) -> Self {
        DenseLayer {
            in_features,
            out_features,
            weights: vec![0.0; out_features * in_features],
            bias: with_bias.then(|| vec![0.0; out_features]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_features * self.in_features + self.bias.as_ref().map_or(0, Vec::len)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Layered per-pixel spectral classifier: conv stages (each followed by a
/// rectifier and a width-2 max-pool) feeding a dense layer and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCnn {
    pub input_length: usize,
    pub conv_stack: Vec<ConvStage>,
    pub dense: DenseLayer,
    pub class_count: usize,
    /// Input standardization frozen at training time; applied by the
    /// cube-level pipeline, not by `forward` (which expects normalized
    /// features).
    pub norm: Option<NormStats>,
}

/// Pooled length: width-2 max-pool with floor semantics; a length-1 signal
/// passes through unchanged (there is no complete window to reduce).
pub fn pooled_len(len: usize) -> usize {
    (len / 2).max(1)
}

/// Build the default architecture for a given input length: conv layers of
/// kernel 6 with widths 6/12/18/24 are kept while the running spectral
/// length still covers the kernel, each followed by a width-2 max-pool,
/// then a dense map to the class scores. Inputs too short for the full
/// stack get a shrunk stack; inputs shorter than the kernel get a bare
/// affine map. Weights start at zero; see [`SpectralCnn::init_weights`].
pub fn build_default_arch(input_length: usize, classes: usize) -> Result<SpectralCnn> {
    build_arch(input_length, classes, true)
}

/// Same shrink-to-fit rule with control over the dense bias. The bias-free
/// form is used by reduced heads that must stay minimal.
pub fn build_arch(input_length: usize, classes: usize, dense_bias: bool) -> Result<SpectralCnn> {
    if input_length == 0 {
        return Err(Error::invalid_argument("input length must be positive".to_string()));
    }
    if classes < 2 {
        return Err(Error::invalid_argument("need at least 2 classes".to_string()));
    }
    let mut conv_stack = Vec::new();
    let mut len = input_length;
    let mut in_ch = 1;
    for &width in &DEFAULT_CHANNELS {
        if len < DEFAULT_KERNEL {
            break;
        }
        conv_stack.push(ConvStage::Full(Conv1dLayer::zeros(in_ch, width, DEFAULT_KERNEL)));
        len = pooled_len(len - DEFAULT_KERNEL + 1);
        in_ch = width;
    }
    let flatten = if conv_stack.is_empty() { input_length } else { in_ch * len };
    let dense = DenseLayer::zeros(flatten, classes, dense_bias);
    Ok(SpectralCnn {
        input_length,
        conv_stack,
        dense,
        class_count: classes,
        norm: None,
    })
}

/// Counts from [`SpectralCnn::count_params`] and the other model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
    /// Serialized size with every parameter in 4-byte form.
    pub bytes_at_4b: usize,
}

impl SpectralCnn {
    /// Spectral length entering each conv stage, after each conv, and after
    /// each pool, ending with the flattened dense input length. For the
    /// default 112-input stack: 112, 107, 53, 48, 24, 19, 9, 4, 2.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.input_length];
        let mut len = self.input_length;
        for stage in &self.conv_stack {
            len = len - stage.kernel() + 1;
            lens.push(len);
            len = pooled_len(len);
            lens.push(len);
        }
        lens
    }

    pub fn flatten_len(&self) -> usize {
        self.dense.in_features
    }

    /// (trainable, total, serialized bytes at 4 B/parameter). For a plain
    /// CNN every parameter is trainable.
    pub fn count_params(&self) -> ParamCounts {
        let total: usize = self.conv_stack.iter().map(ConvStage::param_count).sum::<usize>()
            + self.dense.param_count();
        ParamCounts {
            trainable: total,
            total,
            bytes_at_4b: total * 4,
        }
    }

    /// Per-stage parameter counts (conv stages in order, then dense).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, stage) in self.conv_stack.iter().enumerate() {
            let kind = match stage {
                ConvStage::Full(_) => "conv",
                ConvStage::Factorized(_) => "conv-factorized",
            };
            out.push((format!("{kind}{}", i + 1), stage.param_count()));
        }
        out.push(("dense".to_string(), self.dense.param_count()));
        out
    }

    /// Fan-in scaled uniform initialization, fully deterministic per seed.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        for stage in &mut self.conv_stack {
            match stage {
                ConvStage::Full(l) => {
                    let bound = (1.0 / (l.in_channels * l.kernel) as f32).sqrt();
                    for w in &mut l.weights {
                        *w = rng.random_range(-bound..bound);
                    }
                    for b in &mut l.bias {
                        *b = rng.random_range(-bound..bound);
                    }
                }
                ConvStage::Factorized(l) => {
                    let bound = (1.0 / l.unfolded_cols() as f32).sqrt();
                    for w in l.factor_a.iter_mut().chain(l.factor_b.iter_mut()) {
                        *w = rng.random_range(-bound..bound);
                    }
                    for b in &mut l.bias {
                        *b = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        let bound = (1.0 / self.dense.in_features as f32).sqrt();
        for w in &mut self.dense.weights {
            *w = rng.random_range(-bound..bound);
        }
        if let Some(bias) = &mut self.dense.bias {
            for b in bias {
                *b = rng.random_range(-bound..bound);
            }
        }
    }

    /// All parameters as one flat vector: conv stages in order (full:
    /// weights then bias; factorized: A, B, bias), then dense weights and
    /// bias. Gradients from [`batch_gradients`] use the same layout.
    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count_params().total);
        for stage in &self.conv_stack {
            match stage {
                ConvStage::Full(l) => {
                    out.extend_from_slice(&l.weights);
                    out.extend_from_slice(&l.bias);
                }
                ConvStage::Factorized(l) => {
                    out.extend_from_slice(&l.factor_a);
                    out.extend_from_slice(&l.factor_b);
                    out.extend_from_slice(&l.bias);
                }
            }
        }
        out.extend_from_slice(&self.dense.weights);
        if let Some(bias) = &self.dense.bias {
            out.extend_from_slice(bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.count_params().total {
            return Err(Error::invalid_argument(format!(
                "expected {} parameters, got {}",
                self.count_params().total,
                params.len()
            )));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &params[pos..pos + n];
            pos += n;
            s
        };
        for stage in &mut self.conv_stack {
            match stage {
                ConvStage::Full(l) => {
                    let nw = l.weights.len();
                    l.weights.copy_from_slice(take(nw));
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(take(nb));
                }
                ConvStage::Factorized(l) => {
                    let na = l.factor_a.len();
                    l.factor_a.copy_from_slice(take(na));
                    let nb = l.factor_b.len();
                    l.factor_b.copy_from_slice(take(nb));
                    let nbias = l.bias.len();
                    l.bias.copy_from_slice(take(nbias));
                }
            }
        }
        let nw = self.dense.weights.len();
        self.dense.weights.copy_from_slice(take(nw));
        if let Some(bias) = &mut self.dense.bias {
            let nb = bias.len();
            bias.copy_from_slice(take(nb));
        }
        Ok(())
    }

    /// Class probabilities for one pixel of already-normalized features.
    pub fn forward(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.input_length {
            return Err(Error::invalid_argument(format!(
                "expected {} features, got {}",
                self.input_length,
                features.len()
            )));
        }
        let mut signal = features.to_vec();
        let mut channels = 1;
        let mut len = self.input_length;
        for stage in &self.conv_stack {
            let out_len = len - stage.kernel() + 1;
            let cols = im2col(&signal, channels, len, stage.kernel());
            let mut y = apply_stage(stage, &cols, out_len);
            relu_in_place(&mut y);
            signal = max_pool(&y, stage.out_channels(), out_len).0;
            channels = stage.out_channels();
            len = pooled_len(out_len);
        }
        let logits = dense_forward(&self.dense, &signal)?;
        Ok(softmax(&logits))
    }

    /// Row-wise forward over a batch; identical to per-row `forward`.
    pub fn forward_batch(&self, rows: &[f32]) -> Result<Vec<Vec<f32>>> {
        if self.input_length == 0 || rows.len() % self.input_length != 0 {
            return Err(Error::invalid_argument("batch length not divisible by input length".to_string()));
        }
        rows.chunks_exact(self.input_length).map(|r| self.forward(r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

/// Unfold a channels x len signal into `(channels*kernel) x out_len`
/// columns: `cols[(c*kernel + j) * out_len + t] = x[c*len + t + j]`.
fn im2col(signal: &[f32], channels: usize, len: usize, kernel: usize) -> Vec<f32> {
    let out_len = len - kernel + 1;
    let mut cols = vec![0.0f32; channels * kernel * out_len];
    for c in 0..channels {
        for j in 0..kernel {
            let src = &signal[c * len + j..c * len + j + out_len];
            let dst = &mut cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            dst.copy_from_slice(src);
        }
    }
    cols
}

/// W * cols + bias for a conv stage; output is out_channels x out_len.
fn apply_stage(stage: &ConvStage, cols: &[f32], out_len: usize) -> Vec<f32> {
    match stage {
        ConvStage::Full(l) => {
            let mut y = vec![0.0f32; l.out_channels * out_len];
            matmul_acc(&l.weights, cols, &mut y, l.out_channels, l.unfolded_cols(), out_len);
            for o in 0..l.out_channels {
                for t in 0..out_len {
                    y[o * out_len + t] += l.bias[o];
                }
            }
            y
        }
        ConvStage::Factorized(l) => {
            let mut z = vec![0.0f32; l.rank * out_len];
            matmul_acc(&l.factor_b, cols, &mut z, l.rank, l.unfolded_cols(), out_len);
            let mut y = vec![0.0f32; l.out_channels * out_len];
            matmul_acc(&l.factor_a, &z, &mut y, l.out_channels, l.rank, out_len);
            for o in 0..l.out_channels {
                for t in 0..out_len {
                    y[o * out_len + t] += l.bias[o];
                }
            }
            y
        }
    }
}

/// out += a(m x k) * b(k x n), f32.
fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn relu_in_place(y: &mut [f32]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Width-2 max-pool per channel; returns the pooled signal and, for each
/// pooled element, the index it was taken from (ties go to the earlier
/// element). Length-1 channels pass through.
fn max_pool(y: &[f32], channels: usize, len: usize) -> (Vec<f32>, Vec<usize>) {
    let plen = pooled_len(len);
    let mut out = vec![0.0f32; channels * plen];
    let mut argmax = vec![0usize; channels * plen];
    for c in 0..channels {
        if len == 1 {
            out[c * plen] = y[c * len];
            argmax[c * plen] = c * len;
            continue;
        }
        for t in 0..plen {
            let i0 = c * len + 2 * t;
            let i1 = i0 + 1;
            if y[i1] > y[i0] {
                out[c * plen + t] = y[i1];
                argmax[c * plen + t] = i1;
            } else {
                out[c * plen + t] = y[i0];
                argmax[c * plen + t] = i0;
            }
        }
    }
    (out, argmax)
}

fn dense_forward(dense: &DenseLayer, input: &[f32]) -> Result<Vec<f32>> {
    if input.len() != dense.in_features {
        return Err(Error::invalid_argument(format!(
            "dense layer expected {} inputs, got {}",
            dense.in_features,
            input.len()
        )));
    }
    let mut logits = vec![0.0f32; dense.out_features];
    for (o, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (w, x) in dense.weights[o * dense.in_features..(o + 1) * dense.in_features]
            .iter()
            .zip(input)
        {
            acc += w * x;
        }
        if let Some(bias) = &dense.bias {
            acc += bias[o];
        }
        *logit = acc;
    }
    Ok(logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Mini-batch gradient-descent configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub step_size: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch: 32,
            step_size: 0.05,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub val_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

struct StageCache {
    cols: Vec<f32>,
    pre_activation: Vec<f32>,
    pool_argmax: Vec<usize>,
    out_len: usize,
}

struct ForwardCache {
    stages: Vec<StageCache>,
    dense_input: Vec<f32>,
    probs: Vec<f32>,
}

fn forward_cached(model: &SpectralCnn, features: &[f32]) -> ForwardCache {
    let mut signal = features.to_vec();
    let mut channels = 1;
    let mut len = model.input_length;
    let mut stages = Vec::with_capacity(model.conv_stack.len());
    for stage in &model.conv_stack {
        let out_len = len - stage.kernel() + 1;
        let cols = im2col(&signal, channels, len, stage.kernel());
        let pre = apply_stage(stage, &cols, out_len);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let (pooled, argmax) = max_pool(&act, stage.out_channels(), out_len);
        stages.push(StageCache {
            cols,
            pre_activation: pre,
            pool_argmax: argmax,
            out_len,
        });
        signal = pooled;
        channels = stage.out_channels();
        len = pooled_len(out_len);
    }
    let logits = dense_forward(&model.dense, &signal).expect("arch-consistent dense input");
    let probs = softmax(&logits);
    ForwardCache {
        stages,
        dense_input: signal,
        probs,
    }
}

/// Mean softmax cross-entropy of the model over `rows` (flat, row-major)
/// against `labels`.
pub fn batch_loss(model: &SpectralCnn, rows: &[f32], labels: &[u8]) -> Result<f64> {
    let d = model.input_length;
    if rows.len() != labels.len() * d {
        return Err(Error::invalid_argument("rows/labels length mismatch".to_string()));
    }
    let mut loss = 0.0f64;
    for (row, &label) in rows.chunks_exact(d).zip(labels) {
        let probs = model.forward(row)?;
        let p = probs[label as usize].max(1e-30);
        loss -= (p as f64).ln();
    }
    Ok(loss / labels.len().max(1) as f64)
}

/// Mean analytic gradient of the batch cross-entropy, flattened in
/// [`SpectralCnn::params_flat`] order.
pub fn batch_gradients(model: &SpectralCnn, rows: &[f32], labels: &[u8]) -> Result<Vec<f32>> {
    let d = model.input_length;
    if rows.len() != labels.len() * d || labels.is_empty() {
        return Err(Error::invalid_argument("rows/labels length mismatch".to_string()));
    }
    let mut grads = vec![0.0f32; model.count_params().total];
    for (row, &label) in rows.chunks_exact(d).zip(labels) {
        accumulate_gradients(model, row, label, &mut grads);
    }
    let scale = 1.0 / labels.len() as f32;
    for g in &mut grads {
        *g *= scale;
    }
    Ok(grads)
}

/// One sample's gradient contributions added into `grads` (params_flat
/// layout).
fn accumulate_gradients(model: &SpectralCnn, row: &[f32], label: u8, grads: &mut [f32]) {
    let cache = forward_cached(model, row);

    // Stage offsets into the flat gradient vector.
    let mut offsets = Vec::with_capacity(model.conv_stack.len() + 1);
    let mut pos = 0;
    for stage in &model.conv_stack {
        offsets.push(pos);
        pos += match stage {
            ConvStage::Full(l) => l.weights.len() + l.bias.len(),
            ConvStage::Factorized(l) => l.factor_a.len() + l.factor_b.len() + l.bias.len(),
        };
    }
    let dense_offset = pos;

    // dL/dlogits = p - onehot(label).
    let mut dlogits = cache.probs.clone();
    dlogits[label as usize] -= 1.0;

    // Dense layer.
    let dense = &model.dense;
    {
        let gw = &mut grads[dense_offset..dense_offset + dense.weights.len()];
        for o in 0..dense.out_features {
            let dz = dlogits[o];
            if dz != 0.0 {
                for (g, &x) in gw[o * dense.in_features..(o + 1) * dense.in_features]
                    .iter_mut()
                    .zip(&cache.dense_input)
                {
                    *g += dz * x;
                }
            }
        }
        if dense.bias.is_some() {
            let gb = &mut grads
                [dense_offset + dense.weights.len()..dense_offset + dense.weights.len() + dense.out_features];
            for (g, &dz) in gb.iter_mut().zip(&dlogits) {
                *g += dz;
            }
        }
    }

    // Gradient w.r.t. the dense input (the last pooled signal).
    let mut dsignal = vec![0.0f32; dense.in_features];
    for o in 0..dense.out_features {
        let dz = dlogits[o];
        if dz != 0.0 {
            for (ds, &w) in dsignal
                .iter_mut()
                .zip(&dense.weights[o * dense.in_features..(o + 1) * dense.in_features])
            {
                *ds += dz * w;
            }
        }
    }

    // Conv stages, last to first.
    for (idx, stage) in model.conv_stack.iter().enumerate().rev() {
        let sc = &cache.stages[idx];
        let out_ch = stage.out_channels();
        let out_len = sc.out_len;

        // Un-pool: route pooled gradients to the arg-max positions.
        let mut dy = vec![0.0f32; out_ch * out_len];
        for (slot, &src) in sc.pool_argmax.iter().enumerate() {
            dy[src] += dsignal[slot];
        }
        // Rectifier mask.
        for (g, &pre) in dy.iter_mut().zip(&sc.pre_activation) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }

        let cols_rows = stage.in_channels() * stage.kernel();
        let base = offsets[idx];
        let mut dcols = vec![0.0f32; cols_rows * out_len];
        match stage {
            ConvStage::Full(l) => {
                // dW += dY colsᵀ ; db += row sums ; dcols = Wᵀ dY.
                let gw = &mut grads[base..base + l.weights.len()];
                for o in 0..out_ch {
                    for p in 0..cols_rows {
                        let mut acc = 0.0f32;
                        for t in 0..out_len {
                            acc += dy[o * out_len + t] * sc.cols[p * out_len + t];
                        }
                        gw[o * cols_rows + p] += acc;
                    }
                }
                let gb = &mut grads[base + l.weights.len()..base + l.weights.len() + out_ch];
                for o in 0..out_ch {
                    let mut acc = 0.0f32;
                    for t in 0..out_len {
                        acc += dy[o * out_len + t];
                    }
                    gb[o] += acc;
                }
                for o in 0..out_ch {
                    for p in 0..cols_rows {
                        let w = l.weights[o * cols_rows + p];
                        if w != 0.0 {
                            for t in 0..out_len {
                                dcols[p * out_len + t] += w * dy[o * out_len + t];
                            }
                        }
                    }
                }
            }
            ConvStage::Factorized(l) => {
                // Recompute Z = B cols, then dA = dY Zᵀ, dZ = Aᵀ dY,
                // dB = dZ colsᵀ, dcols = Bᵀ dZ.
                let r = l.rank;
                let mut z = vec![0.0f32; r * out_len];
                matmul_acc(&l.factor_b, &sc.cols, &mut z, r, cols_rows, out_len);

                let ga = &mut grads[base..base + l.factor_a.len()];
                for o in 0..out_ch {
                    for q in 0..r {
                        let mut acc = 0.0f32;
                        for t in 0..out_len {
                            acc += dy[o * out_len + t] * z[q * out_len + t];
                        }
                        ga[o * r + q] += acc;
                    }
                }
                let mut dz = vec![0.0f32; r * out_len];
                for o in 0..out_ch {
                    for q in 0..r {
                        let a = l.factor_a[o * r + q];
                        if a != 0.0 {
                            for t in 0..out_len {
                                dz[q * out_len + t] += a * dy[o * out_len + t];
                            }
                        }
                    }
                }
                let gb_mat =
                    &mut grads[base + l.factor_a.len()..base + l.factor_a.len() + l.factor_b.len()];
                for q in 0..r {
                    for p in 0..cols_rows {
                        let mut acc = 0.0f32;
                        for t in 0..out_len {
                            acc += dz[q * out_len + t] * sc.cols[p * out_len + t];
                        }
                        gb_mat[q * cols_rows + p] += acc;
                    }
                }
                let gbias_base = base + l.factor_a.len() + l.factor_b.len();
                let gbias = &mut grads[gbias_base..gbias_base + out_ch];
                for o in 0..out_ch {
                    let mut acc = 0.0f32;
                    for t in 0..out_len {
                        acc += dy[o * out_len + t];
                    }
                    gbias[o] += acc;
                }
                for q in 0..r {
                    for p in 0..cols_rows {
                        let b = l.factor_b[q * cols_rows + p];
                        if b != 0.0 {
                            for t in 0..out_len {
                                dcols[p * out_len + t] += b * dz[q * out_len + t];
                            }
                        }
                    }
                }
            }
        }

        // col2im: scatter column gradients back onto the stage input.
        let in_ch = stage.in_channels();
        let in_len = out_len + stage.kernel() - 1;
        let mut dx = vec![0.0f32; in_ch * in_len];
        for c in 0..in_ch {
            for j in 0..stage.kernel() {
                let p = c * stage.kernel() + j;
                for t in 0..out_len {
                    dx[c * in_len + t + j] += dcols[p * out_len + t];
                }
            }
        }
        dsignal = dx;
    }
}

/// Accuracy of the model's arg-max prediction over the given rows.
pub fn accuracy_on(model: &SpectralCnn, rows: &[f32], labels: &[u8]) -> Result<f64> {
    let d = model.input_length;
    if rows.len() != labels.len() * d || labels.is_empty() {
        return Err(Error::invalid_argument("rows/labels length mismatch".to_string()));
    }
    let mut correct = 0usize;
    for (row, &label) in rows.chunks_exact(d).zip(labels) {
        let probs = model.forward(row)?;
        if argmax(&probs) == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn gather_split(dataset: &PixelDataset, tag: SplitTag) -> (Vec<f32>, Vec<u8>) {
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

/// Mini-batch gradient descent on softmax cross-entropy. Deterministic per
/// seed: batches are drawn from a seeded shuffle and all arithmetic is
/// sequential.
pub fn train(model: &mut SpectralCnn, dataset: &PixelDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::invalid_argument("epochs and batch size must be positive".to_string()));
    }
    if dataset.feature_count != model.input_length {
        return Err(Error::invalid_argument(format!(
            "model expects {} features, dataset has {}",
            model.input_length, dataset.feature_count
        )));
    }
    let (train_rows, train_labels) = gather_split(dataset, SplitTag::Train);
    if train_labels.is_empty() {
        return Err(Error::invalid_argument("dataset has no train rows".to_string()));
    }
    let (val_rows, val_labels) = gather_split(dataset, SplitTag::Val);
    if val_labels.is_empty() {
        return Err(Error::invalid_argument("dataset has no val rows".to_string()));
    }

    let d = model.input_length;
    let n = train_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(cfg.seed);
    let mut history = TrainHistory {
        val_accuracy: Vec::with_capacity(cfg.epochs),
        train_loss: Vec::with_capacity(cfg.epochs),
    };

    let mut batch_rows = Vec::with_capacity(cfg.batch * d);
    let mut batch_labels = Vec::with_capacity(cfg.batch);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            batch_rows.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_rows.extend_from_slice(&train_rows[i * d..(i + 1) * d]);
                batch_labels.push(train_labels[i]);
            }
            epoch_loss += batch_loss(model, &batch_rows, &batch_labels)? * chunk.len() as f64;
            if cfg.step_size != 0.0 {
                let grads = batch_gradients(model, &batch_rows, &batch_labels)?;
                let mut params = model.params_flat();
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= cfg.step_size * g;
                }
                model.set_params_flat(&params)?;
            }
        }
        history.train_loss.push(epoch_loss / n as f64);
        history.val_accuracy.push(accuracy_on(model, &val_rows, &val_labels)?);
    }
    Ok(history)
}
