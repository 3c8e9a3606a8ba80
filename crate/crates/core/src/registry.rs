//! The classifier strategy registry. Every model family sits behind the
//! [`PixelClassifier`] trait and registers under a kind name; callers
//! select a variant at runtime by name or load whatever a model file
//! holds and work through the trait object.

use std::path::Path;

use crate::cnn::{ParamCounts, SpectralCnn};
use crate::cost::{cnn_cost, gbt_cost, reduced_cost, CostReport};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::format::{load_model, save_model, AnyModel};
use crate::gbt::{BoostedEnsemble, GrowthPolicy};
use crate::reduce::ReducedModel;

/// A per-pixel 3-class classifier over normalized valid-band features.
pub trait PixelClassifier: Send + Sync {
    /// Registry kind name of this variant.
    fn kind(&self) -> &'static str;
    /// Feature count expected at the input (before any internal
    /// projection).
    fn feature_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Softmax class probabilities for one pixel.
    fn predict(&self, features: &[f32]) -> Result<Vec<f32>>;
    /// Analytic per-pixel cost and storage accounting.
    fn cost(&self) -> CostReport;
    fn param_counts(&self) -> ParamCounts;
    /// Training-time input standardization, when the model carries it.
    fn norm(&self) -> Option<&NormStats>;
    fn save(&self, path: &Path) -> Result<()>;
}

impl PixelClassifier for SpectralCnn {
    fn kind(&self) -> &'static str {
        "cnn"
    }

    fn feature_dim(&self) -> usize {
        self.input_length
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        self.forward(features)
    }

    fn cost(&self) -> CostReport {
        cnn_cost(self)
    }

    fn param_counts(&self) -> ParamCounts {
        self.count_params()
    }

    fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    fn save(&self, path: &Path) -> Result<()> {
        save_model(&AnyModel::Cnn(self.clone()), path)
    }
}

impl PixelClassifier for ReducedModel {
    fn kind(&self) -> &'static str {
        "cnn-reduced"
    }

    fn feature_dim(&self) -> usize {
        self.projector.input_dim()
    }

    fn class_count(&self) -> usize {
        self.head.class_count
    }

    fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        self.forward(features)
    }

    fn cost(&self) -> CostReport {
        reduced_cost(self)
    }

    fn param_counts(&self) -> ParamCounts {
        self.count_params()
    }

    fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    fn save(&self, path: &Path) -> Result<()> {
        save_model(&AnyModel::Reduced(self.clone()), path)
    }
}

impl PixelClassifier for BoostedEnsemble {
    fn kind(&self) -> &'static str {
        match self.policy {
            GrowthPolicy::Level => "gbt-level",
            GrowthPolicy::Leaf => "gbt-leaf",
        }
    }

    fn feature_dim(&self) -> usize {
        self.feature_count
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        BoostedEnsemble::predict(self, features)
    }

    fn cost(&self) -> CostReport {
        gbt_cost(self)
    }

    fn param_counts(&self) -> ParamCounts {
        let stats = self.tree_stats();
        let values = 2 * (stats.total_nodes - stats.total_leaves) + stats.total_leaves;
        ParamCounts {
            trainable: values,
            total: values,
            bytes_at_4b: stats.bytes_estimate,
        }
    }

    fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    fn save(&self, path: &Path) -> Result<()> {
        save_model(&AnyModel::Boosted(self.clone()), path)
    }
}

/// One registered variant.
pub struct RegistryEntry {
    pub name: &'static str,
    pub description: &'static str,
    adopt: fn(AnyModel) -> std::result::Result<Box<dyn PixelClassifier>, AnyModel>,
}

/// Name-keyed registry of the classifier variants this build ships.
pub struct ModelRegistry {
    entries: Vec<RegistryEntry>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        ModelRegistry {
            entries: vec![
                RegistryEntry {
                    name: "cnn",
                    description: "1D spectral CNN (optionally with factorized conv layers)",
                    adopt: |m| match m {
                        AnyModel::Cnn(c) => Ok(Box::new(c)),
                        other => Err(other),
                    },
                },
                RegistryEntry {
                    name: "cnn-reduced",
                    description: "frozen PCA projection with a small trainable head",
                    adopt: |m| match m {
                        AnyModel::Reduced(r) => Ok(Box::new(r)),
                        other => Err(other),
                    },
                },
                RegistryEntry {
                    name: "gbt-level",
                    description: "boosted trees, level-wise (balanced) growth",
                    adopt: |m| match m {
                        AnyModel::Boosted(e) if e.policy == GrowthPolicy::Level => Ok(Box::new(e)),
                        other => Err(other),
                    },
                },
                RegistryEntry {
                    name: "gbt-leaf",
                    description: "boosted trees, leaf-wise (best-gain) growth",
                    adopt: |m| match m {
                        AnyModel::Boosted(e) if e.policy == GrowthPolicy::Leaf => Ok(Box::new(e)),
                        other => Err(other),
                    },
                },
            ],
        }
    }
}

impl ModelRegistry {
    pub fn kinds(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|e| (e.name, e.description)).collect()
    }

    /// Wrap a decoded model in its registered variant.
    pub fn adopt(&self, model: AnyModel) -> Result<Box<dyn PixelClassifier>> {
        let mut current = model;
        for entry in &self.entries {
            match (entry.adopt)(current) {
                Ok(classifier) => return Ok(classifier),
                Err(back) => current = back,
            }
        }
        Err(Error::invalid_argument(format!(
            "no registered classifier accepts a '{}' model",
            current.kind()
        )))
    }

    /// Load a model file and dispatch it to the matching variant.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<Box<dyn PixelClassifier>> {
        self.adopt(load_model(path)?)
    }

    /// Load and additionally require a specific registered kind.
    pub fn load_kind(&self, path: impl AsRef<Path>, kind: &str) -> Result<Box<dyn PixelClassifier>> {
        if !self.entries.iter().any(|e| e.name == kind) {
            return Err(Error::invalid_argument(format!(
                "unknown model kind '{kind}' (registered: {})",
                self.kinds().join(", ")
            )));
        }
        let model = self.load(path)?;
        if model.kind() != kind {
            return Err(Error::invalid_argument(format!(
                "expected a '{kind}' model, file holds '{}'",
                model.kind()
            )));
        }
        Ok(model)
    }
}
