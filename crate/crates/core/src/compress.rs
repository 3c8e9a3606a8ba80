//! Low-rank factorization of convolutional layers. A full layer's
//! `out x (in*kernel)` weight unfolding is replaced by two thin factors
//! from its truncated SVD, turning the layer's forward pass into two
//! back-to-back small matrix products.

use crate::cnn::{Conv1dLayer, ConvStage, SpectralCnn};
use crate::error::{Error, Result};
use crate::numerics::{truncated_svd, Matrix};

/// A conv layer whose weight unfolding is stored as `factor_a (out x r)`
/// times `factor_b (r x in*kernel)`, singular values absorbed into
/// `factor_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedConv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub rank: usize,
    /// out x rank, row-major.
    pub factor_a: Vec<f32>,
    /// rank x (in*kernel), row-major.
    pub factor_b: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FactorizedConv1dLayer {
    pub fn param_count(&self) -> usize {
        self.rank * (self.out_channels + self.in_channels * self.kernel) + self.out_channels
    }

    pub fn unfolded_cols(&self) -> usize {
        self.in_channels * self.kernel
    }
}

/// Parameter count of a layer factorized at rank `r`.
pub fn factorized_param_count(layer: &Conv1dLayer, r: usize) -> usize {
    r * (layer.out_channels + layer.unfolded_cols()) + layer.out_channels
}

/// Largest rank at which factorizing `layer` still reduces its parameter
/// count, or None when no rank does.
pub fn max_reducing_rank(layer: &Conv1dLayer) -> Option<usize> {
    let full = layer.param_count();
    let cap = layer.out_channels.min(layer.unfolded_cols());
    (1..=cap).rev().find(|&r| factorized_param_count(layer, r) < full)
}

/// Replace a layer with its rank-r truncated-SVD factors; the bias is
/// copied unchanged.
pub fn factorize_conv(layer: &Conv1dLayer, rank: usize) -> Result<FactorizedConv1dLayer> {
    let cols = layer.unfolded_cols();
    if rank < 1 || rank > layer.out_channels.min(cols) {
        return Err(Error::invalid_argument(format!(
            "rank {rank} out of range for a {}x{} weight unfolding",
            layer.out_channels, cols
        )));
    }
    let w = Matrix::from_vec(layer.out_channels, cols, layer.weights.clone())?;
    let svd = truncated_svd(&w, rank)?;

    let mut factor_a = vec![0.0f32; layer.out_channels * rank];
    for o in 0..layer.out_channels {
        for k in 0..rank {
            factor_a[o * rank + k] =
                (svd.left_factors.get(o, k) as f64 * svd.singular_values[k]) as f32;
        }
    }
    let mut factor_b = vec![0.0f32; rank * cols];
    for k in 0..rank {
        for j in 0..cols {
            factor_b[k * cols + j] = svd.right_factors.get(j, k);
        }
    }
    Ok(FactorizedConv1dLayer {
        in_channels: layer.in_channels,
        out_channels: layer.out_channels,
        kernel: layer.kernel,
        rank,
        factor_a,
        factor_b,
        bias: layer.bias.clone(),
    })
}

/// Outcome of [`compress_model`].
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub model: SpectralCnn,
    /// Rank chosen per conv stage; None when the stage was left unfactorized.
    pub ranks: Vec<Option<usize>>,
    pub total_params: usize,
    /// True when the budget was not reachable even at rank 1 everywhere;
    /// `total_params` then reports the achievable minimum actually produced.
    pub budget_infeasible: bool,
}

/// Greedy budget-driven compression: while over budget, shrink the conv
/// stage that currently holds the most parameters — factorizing it at the
/// largest still-reducing rank on first touch, then decrementing its rank.
/// Stages where factorization cannot reduce the count are skipped. The
/// caller is expected to follow with a short fine-tune pass.
///
/// Budgets at or above the current total return the model unchanged; a
/// budget below the rank-1 floor yields the floor and flags it.
pub fn compress_model(model: &SpectralCnn, budget: usize) -> Result<CompressionOutcome> {
    let mut out = model.clone();
    let mut ranks: Vec<Option<usize>> = model
        .conv_stack
        .iter()
        .map(|s| match s {
            ConvStage::Full(_) => None,
            ConvStage::Factorized(f) => Some(f.rank),
        })
        .collect();

    loop {
        let total = out.count_params().total;
        if total <= budget {
            return Ok(CompressionOutcome {
                model: out,
                ranks,
                total_params: total,
                budget_infeasible: false,
            });
        }

        // Largest shrinkable stage first.
        let mut candidate: Option<(usize, usize)> = None; // (stage index, params)
        for (i, stage) in out.conv_stack.iter().enumerate() {
            let shrinkable = match stage {
                ConvStage::Full(l) => max_reducing_rank(l).is_some(),
                ConvStage::Factorized(f) => f.rank > 1,
            };
            if shrinkable {
                let p = stage.param_count();
                if candidate.map_or(true, |(_, best)| p > best) {
                    candidate = Some((i, p));
                }
            }
        }
        let Some((idx, _)) = candidate else {
            // Every stage is at rank 1 (or unreducible): report the floor.
            return Ok(CompressionOutcome {
                total_params: out.count_params().total,
                model: out,
                ranks,
                budget_infeasible: true,
            });
        };

        match &out.conv_stack[idx] {
            ConvStage::Full(l) => {
                let r = max_reducing_rank(l).expect("candidate was shrinkable");
                let fact = factorize_conv(l, r)?;
                ranks[idx] = Some(r);
                out.conv_stack[idx] = ConvStage::Factorized(fact);
            }
            ConvStage::Factorized(f) => {
                // Re-factorize from the current factors' product so repeated
                // shrinking keeps approximating the latest weights.
                let l = defactorize(f);
                let fact = factorize_conv(&l, f.rank - 1)?;
                ranks[idx] = Some(fact.rank);
                out.conv_stack[idx] = ConvStage::Factorized(fact);
            }
        }
    }
}

/// Multiply the factors back into a full layer.
pub fn defactorize(f: &FactorizedConv1dLayer) -> Conv1dLayer {
    let cols = f.unfolded_cols();
    let mut weights = vec![0.0f32; f.out_channels * cols];
    for o in 0..f.out_channels {
        for j in 0..cols {
            let mut acc = 0.0f64;
            for k in 0..f.rank {
                acc += f.factor_a[o * f.rank + k] as f64 * f.factor_b[k * cols + j] as f64;
            }
            weights[o * cols + j] = acc as f32;
        }
    }
    Conv1dLayer {
        in_channels: f.in_channels,
        out_channels: f.out_channels,
        kernel: f.kernel,
        weights,
        bias: f.bias.clone(),
    }
}
