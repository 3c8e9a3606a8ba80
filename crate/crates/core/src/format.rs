//! Binary model files. Two containers cover every model family:
//!
//! * `SCNN` (u16 version, then an architecture descriptor, then raw f32
//!   payloads per layer in declaration order) stores plain CNNs,
//!   factorized CNNs, reduced models and bare projectors. Reduced models
//!   carry the frozen projector as a front-layer block ahead of the head
//!   layers.
//! * `GBT1` (header with growth policy, learning rate, base score and
//!   class count, then pre-order node records) stores boosted ensembles.
//!
//! Both containers optionally embed the training-time normalization
//! statistics so a model file is self-contained for cube inference.

use std::path::Path;

use crate::cnn::{Conv1dLayer, ConvStage, DenseLayer, SpectralCnn};
use crate::compress::FactorizedConv1dLayer;
use crate::data::{NormStats, STD_FLOOR};
use crate::error::{Error, Result};
use crate::gbt::{BoostedEnsemble, EnsembleTree, GrowthParams, GrowthPolicy, TreeNode};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Matrix;
use crate::reduce::{PcaProjector, ReducedModel};

pub const SCNN_MAGIC: &[u8; 4] = b"SCNN";
pub const GBT_MAGIC: &[u8; 4] = b"GBT1";
const SCNN_VERSION: u16 = 1;
const GBT_VERSION: u16 = 1;

/// Sanity bound on deserialized dimensions; anything above this is a
/// corrupt file, not a real model.
const MAX_DIM: u32 = 1 << 24;

/// Any model a file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Cnn(SpectralCnn),
    Reduced(ReducedModel),
    Boosted(BoostedEnsemble),
    /// A fitted projector awaiting a head (written by PCA fitting).
    Projector(PcaProjector),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Cnn(_) => "cnn",
            AnyModel::Reduced(_) => "cnn-reduced",
            AnyModel::Boosted(e) => match e.policy {
                GrowthPolicy::Level => "gbt-level",
                GrowthPolicy::Leaf => "gbt-leaf",
            },
            AnyModel::Projector(_) => "projector",
        }
    }
}

// ---------------------------------------------------------------------------
// SCNN
// ---------------------------------------------------------------------------

fn write_norm(w: &mut ByteWriter, norm: &Option<NormStats>) {
    match norm {
        Some(stats) => {
            w.u8(1);
            w.u32(stats.means.len() as u32);
        }
        None => w.u8(0),
    }
}

fn write_norm_payload(w: &mut ByteWriter, norm: &Option<NormStats>) {
    if let Some(stats) = norm {
        w.f32_slice(&stats.means);
        w.f32_slice(&stats.stds);
    }
}

fn read_norm_payload(r: &mut ByteReader, dim: usize) -> Result<NormStats> {
    let means = r.f32_vec(dim, "normalization means")?;
    let stds = r.f32_vec(dim, "normalization stds")?;
    let floored = stds.iter().map(|&s| s <= STD_FLOOR).collect();
    Ok(NormStats { means, stds, floored })
}

fn conv_descriptor(w: &mut ByteWriter, stage: &ConvStage) {
    match stage {
        ConvStage::Full(l) => {
            w.u8(0);
            w.u32(l.in_channels as u32);
            w.u32(l.out_channels as u32);
            w.u32(l.kernel as u32);
        }
        ConvStage::Factorized(l) => {
            w.u8(1);
            w.u32(l.in_channels as u32);
            w.u32(l.out_channels as u32);
            w.u32(l.kernel as u32);
            w.u32(l.rank as u32);
        }
    }
}

fn conv_payload(w: &mut ByteWriter, stage: &ConvStage) {
    match stage {
        ConvStage::Full(l) => {
            w.f32_slice(&l.weights);
            w.f32_slice(&l.bias);
        }
        ConvStage::Factorized(l) => {
            w.f32_slice(&l.factor_a);
            w.f32_slice(&l.factor_b);
            w.f32_slice(&l.bias);
        }
    }
}

fn checked_dim(v: u32, what: &str, offset: u64) -> Result<usize> {
    if v == 0 || v > MAX_DIM {
        return Err(Error::format(offset, format!("{what} {v} out of range")));
    }
    Ok(v as usize)
}

struct ConvShape {
    factorized: bool,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rank: usize,
}

struct CnnShape {
    convs: Vec<ConvShape>,
    dense_in: usize,
    dense_out: usize,
    dense_bias: bool,
}

fn read_cnn_descriptor(r: &mut ByteReader) -> Result<CnnShape> {
    let conv_count = r.u32("conv count")?;
    if conv_count > 64 {
        return Err(Error::format(r.offset() - 4, format!("conv count {conv_count} out of range")));
    }
    let mut convs = Vec::with_capacity(conv_count as usize);
    for _ in 0..conv_count {
        let kind = r.u8("conv kind")?;
        if kind > 1 {
            return Err(Error::format(r.offset() - 1, format!("unknown conv kind {kind}")));
        }
        let at = r.offset();
        let in_channels = checked_dim(r.u32("in channels")?, "in channels", at)?;
        let out_channels = checked_dim(r.u32("out channels")?, "out channels", at + 4)?;
        let kernel = checked_dim(r.u32("kernel")?, "kernel", at + 8)?;
        let rank = if kind == 1 {
            checked_dim(r.u32("rank")?, "rank", r.offset() - 4)?
        } else {
            0
        };
        convs.push(ConvShape {
            factorized: kind == 1,
            in_channels,
            out_channels,
            kernel,
            rank,
        });
    }
    let at = r.offset();
    let dense_in = checked_dim(r.u32("dense in")?, "dense in", at)?;
    let dense_out = checked_dim(r.u32("dense out")?, "dense out", at + 4)?;
    let dense_bias = r.u8("dense bias flag")? == 1;
    Ok(CnnShape {
        convs,
        dense_in,
        dense_out,
        dense_bias,
    })
}

fn read_cnn_payload(r: &mut ByteReader, shape: &CnnShape, input_length: usize, class_count: usize, norm: Option<NormStats>) -> Result<SpectralCnn> {
    let mut conv_stack = Vec::with_capacity(shape.convs.len());
    for c in &shape.convs {
        let cols = c.in_channels * c.kernel;
        if c.factorized {
            let factor_a = r.f32_vec(c.out_channels * c.rank, "factor A")?;
            let factor_b = r.f32_vec(c.rank * cols, "factor B")?;
            let bias = r.f32_vec(c.out_channels, "conv bias")?;
            conv_stack.push(ConvStage::Factorized(FactorizedConv1dLayer {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                rank: c.rank,
                factor_a,
                factor_b,
                bias,
            }));
        } else {
            let weights = r.f32_vec(c.out_channels * cols, "conv weights")?;
            let bias = r.f32_vec(c.out_channels, "conv bias")?;
            conv_stack.push(ConvStage::Full(Conv1dLayer {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                weights,
                bias,
            }));
        }
    }
    let weights = r.f32_vec(shape.dense_out * shape.dense_in, "dense weights")?;
    let bias = if shape.dense_bias {
        Some(r.f32_vec(shape.dense_out, "dense bias")?)
    } else {
        None
    };
    Ok(SpectralCnn {
        input_length,
        conv_stack,
        dense: DenseLayer {
            in_features: shape.dense_in,
            out_features: shape.dense_out,
            weights,
            bias,
        },
        class_count,
        norm,
    })
}

fn encode_scnn(model: &AnyModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(SCNN_MAGIC);
    w.u16(SCNN_VERSION);
    match model {
        AnyModel::Cnn(cnn) => {
            w.u8(0);
            w.u32(cnn.input_length as u32);
            w.u32(cnn.class_count as u32);
            write_norm(&mut w, &cnn.norm);
            w.u32(cnn.conv_stack.len() as u32);
            for stage in &cnn.conv_stack {
                conv_descriptor(&mut w, stage);
            }
            w.u32(cnn.dense.in_features as u32);
            w.u32(cnn.dense.out_features as u32);
            w.u8(cnn.dense.bias.is_some() as u8);
            write_norm_payload(&mut w, &cnn.norm);
            for stage in &cnn.conv_stack {
                conv_payload(&mut w, stage);
            }
            w.f32_slice(&cnn.dense.weights);
            if let Some(bias) = &cnn.dense.bias {
                w.f32_slice(bias);
            }
        }
        AnyModel::Reduced(rm) => {
            w.u8(1);
            w.u32(rm.projector.input_dim() as u32);
            w.u32(rm.head.class_count as u32);
            write_norm(&mut w, &rm.norm);
            w.u32(rm.projector.d as u32);
            w.u8(1); // head present
            w.u32(rm.head.conv_stack.len() as u32);
            for stage in &rm.head.conv_stack {
                conv_descriptor(&mut w, stage);
            }
            w.u32(rm.head.dense.in_features as u32);
            w.u32(rm.head.dense.out_features as u32);
            w.u8(rm.head.dense.bias.is_some() as u8);
            write_norm_payload(&mut w, &rm.norm);
            w.f32_slice(&rm.projector.mean);
            w.f32_slice(rm.projector.basis.data());
            for e in &rm.projector.explained {
                w.f64(*e);
            }
            for stage in &rm.head.conv_stack {
                conv_payload(&mut w, stage);
            }
            w.f32_slice(&rm.head.dense.weights);
            if let Some(bias) = &rm.head.dense.bias {
                w.f32_slice(bias);
            }
        }
        AnyModel::Projector(p) => {
            w.u8(1);
            w.u32(p.input_dim() as u32);
            w.u32(crate::data::CLASS_COUNT as u32);
            w.u8(0); // no norm
            w.u32(p.d as u32);
            w.u8(0); // no head
            w.f32_slice(&p.mean);
            w.f32_slice(p.basis.data());
            for e in &p.explained {
                w.f64(*e);
            }
        }
        AnyModel::Boosted(_) => unreachable!("boosted models use the GBT container"),
    }
    w.into_vec()
}

fn decode_scnn(buf: &[u8]) -> Result<AnyModel> {
    let mut r = ByteReader::new(buf);
    r.magic(SCNN_MAGIC, "model file")?;
    let version = r.u16("format version")?;
    if version != SCNN_VERSION {
        return Err(Error::format(
            r.offset() - 2,
            format!("unsupported SCNN version {version}"),
        ));
    }
    let kind = r.u8("model kind")?;
    let at = r.offset();
    let input_length = checked_dim(r.u32("input length")?, "input length", at)?;
    let class_count = checked_dim(r.u32("class count")?, "class count", at + 4)?;
    let norm_dim = if r.u8("norm flag")? == 1 {
        let at = r.offset();
        let dim = checked_dim(r.u32("norm dim")?, "norm dim", at)?;
        if dim != input_length {
            return Err(Error::format(at, format!("norm dim {dim} != input length {input_length}")));
        }
        Some(dim)
    } else {
        None
    };

    match kind {
        0 => {
            let shape = read_cnn_descriptor(&mut r)?;
            let norm = match norm_dim {
                Some(dim) => Some(read_norm_payload(&mut r, dim)?),
                None => None,
            };
            let model = read_cnn_payload(&mut r, &shape, input_length, class_count, norm)?;
            r.expect_end("model file")?;
            Ok(AnyModel::Cnn(model))
        }
        1 => {
            let at = r.offset();
            let d = checked_dim(r.u32("reduced dim")?, "reduced dim", at)?;
            if d > input_length {
                return Err(Error::format(at, format!("reduced dim {d} exceeds input length")));
            }
            let head_present = r.u8("head flag")? == 1;
            let shape = if head_present {
                Some(read_cnn_descriptor(&mut r)?)
            } else {
                None
            };
            let norm = match norm_dim {
                Some(dim) => Some(read_norm_payload(&mut r, dim)?),
                None => None,
            };
            let mean = r.f32_vec(input_length, "projector mean")?;
            let basis_data = r.f32_vec(input_length * d, "projector basis")?;
            let mut explained = Vec::with_capacity(d);
            for _ in 0..d {
                explained.push(r.f64("explained variance")?);
            }
            let projector = PcaProjector {
                mean,
                basis: Matrix::from_vec(input_length, d, basis_data)?,
                explained,
                d,
            };
            match shape {
                Some(shape) => {
                    let head = read_cnn_payload(&mut r, &shape, d, class_count, None)?;
                    r.expect_end("model file")?;
                    Ok(AnyModel::Reduced(ReducedModel {
                        projector,
                        head,
                        norm,
                    }))
                }
                None => {
                    r.expect_end("model file")?;
                    Ok(AnyModel::Projector(projector))
                }
            }
        }
        other => Err(Error::format(7, format!("unknown model kind {other}"))),
    }
}

// ---------------------------------------------------------------------------
// GBT1
// ---------------------------------------------------------------------------

fn write_tree(w: &mut ByteWriter, node: &TreeNode) {
    match node {
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            w.u8(0);
            w.u32(*feature as u32);
            w.f64(*threshold);
            write_tree(w, left);
            write_tree(w, right);
        }
        TreeNode::Leaf { value } => {
            w.u8(1);
            w.f64(*value);
        }
    }
}

fn read_tree(r: &mut ByteReader, feature_count: usize, depth: usize) -> Result<TreeNode> {
    if depth > 4096 {
        return Err(Error::format(r.offset(), "tree deeper than 4096 levels".to_string()));
    }
    match r.u8("node kind")? {
        0 => {
            let at = r.offset();
            let feature = r.u32("split feature")? as usize;
            if feature >= feature_count {
                return Err(Error::format(at, format!("split feature {feature} out of range")));
            }
            let threshold = r.f64("split threshold")?;
            let left = read_tree(r, feature_count, depth + 1)?;
            let right = read_tree(r, feature_count, depth + 1)?;
            Ok(TreeNode::Split {
                feature,
                threshold,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        1 => Ok(TreeNode::Leaf {
            value: r.f64("leaf value")?,
        }),
        other => Err(Error::format(r.offset() - 1, format!("unknown node kind {other}"))),
    }
}

fn encode_gbt(e: &BoostedEnsemble) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(GBT_MAGIC);
    w.u16(GBT_VERSION);
    w.u8(match e.policy {
        GrowthPolicy::Level => 0,
        GrowthPolicy::Leaf => 1,
    });
    w.f64(e.learning_rate);
    w.f64(e.base_score);
    w.u32(e.class_count as u32);
    w.u32(e.feature_count as u32);
    // Growth parameters travel with the model.
    w.u32(e.params.max_depth as u32);
    w.f64(e.params.min_child_weight);
    w.f64(e.params.subsample);
    w.f64(e.params.colsample);
    w.f64(e.params.learning_rate);
    w.u32(e.params.num_boost_round as u32);
    w.u32(e.params.num_leaves as u32);
    w.u32(e.params.min_data_in_leaf as u32);
    w.u32(e.params.early_stop_patience as u32);
    match &e.norm {
        Some(stats) => {
            w.u8(1);
            w.f32_slice(&stats.means);
            w.f32_slice(&stats.stds);
        }
        None => w.u8(0),
    }
    w.u32(e.trees.len() as u32);
    for tree in &e.trees {
        w.u32(tree.round as u32);
        w.u8(tree.class_id as u8);
        write_tree(&mut w, &tree.root);
    }
    w.into_vec()
}

fn decode_gbt(buf: &[u8]) -> Result<BoostedEnsemble> {
    let mut r = ByteReader::new(buf);
    r.magic(GBT_MAGIC, "ensemble file")?;
    let version = r.u16("format version")?;
    if version != GBT_VERSION {
        return Err(Error::format(
            r.offset() - 2,
            format!("unsupported GBT version {version}"),
        ));
    }
    let policy = match r.u8("growth policy")? {
        0 => GrowthPolicy::Level,
        1 => GrowthPolicy::Leaf,
        other => {
            return Err(Error::format(
                r.offset() - 1,
                format!("unknown growth policy {other}"),
            ))
        }
    };
    let learning_rate = r.f64("learning rate")?;
    let base_score = r.f64("base score")?;
    let at = r.offset();
    let class_count = checked_dim(r.u32("class count")?, "class count", at)?;
    let feature_count = checked_dim(r.u32("feature count")?, "feature count", at + 4)?;
    let params = GrowthParams {
        max_depth: r.u32("max_depth")? as usize,
        min_child_weight: r.f64("min_child_weight")?,
        subsample: r.f64("subsample")?,
        colsample: r.f64("colsample")?,
        learning_rate: r.f64("params learning rate")?,
        num_boost_round: r.u32("num_boost_round")? as usize,
        num_leaves: r.u32("num_leaves")? as usize,
        min_data_in_leaf: r.u32("min_data_in_leaf")? as usize,
        early_stop_patience: r.u32("early_stop_patience")? as usize,
    };
    let norm = if r.u8("norm flag")? == 1 {
        let means = r.f32_vec(feature_count, "normalization means")?;
        let stds = r.f32_vec(feature_count, "normalization stds")?;
        let floored = stds.iter().map(|&s| s <= STD_FLOOR).collect();
        Some(NormStats { means, stds, floored })
    } else {
        None
    };
    let tree_count = r.u32("tree count")?;
    if tree_count > MAX_DIM {
        return Err(Error::format(r.offset() - 4, "tree count out of range".to_string()));
    }
    let mut trees = Vec::with_capacity(tree_count as usize);
    for _ in 0..tree_count {
        let round = r.u32("tree round")? as usize;
        let class_id = r.u8("tree class")? as usize;
        if class_id >= class_count {
            return Err(Error::format(r.offset() - 1, format!("tree class {class_id} out of range")));
        }
        let root = read_tree(&mut r, feature_count, 0)?;
        trees.push(EnsembleTree {
            round,
            class_id,
            root,
        });
    }
    r.expect_end("ensemble file")?;
    Ok(BoostedEnsemble {
        trees,
        policy,
        learning_rate,
        base_score,
        class_count,
        feature_count,
        params,
        norm,
    })
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

pub fn save_model(model: &AnyModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = match model {
        AnyModel::Boosted(e) => encode_gbt(e),
        other => encode_scnn(other),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load any model file, dispatching on the magic.
pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    let buf = std::fs::read(path)?;
    if buf.len() < 4 {
        return Err(Error::format(0, "file shorter than a magic number".to_string()));
    }
    match &buf[..4] {
        m if m == SCNN_MAGIC => decode_scnn(&buf),
        m if m == GBT_MAGIC => decode_gbt(&buf).map(AnyModel::Boosted),
        other => Err(Error::format(
            0,
            format!("unrecognized model magic {other:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::build_default_arch;
    use crate::numerics::seeded_rng;
    use crate::reduce::{build_reduced_model, fit_pca, HeadSpec};
    use rand::Rng;

    fn roundtrip(model: &AnyModel) -> AnyModel {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(model, &path).unwrap();
        load_model(&path).unwrap()
    }

    #[test]
    fn cnn_roundtrip_preserves_predictions() {
        let mut model = build_default_arch(112, 3).unwrap();
        model.init_weights(3);
        let back = match roundtrip(&AnyModel::Cnn(model.clone())) {
            AnyModel::Cnn(m) => m,
            other => panic!("wrong kind {other:?}"),
        };
        assert_eq!(model, back);
        let mut rng = seeded_rng(4);
        for _ in 0..100 {
            let row: Vec<f32> = (0..112).map(|_| rng.random_range(-2.0..2.0f32)).collect();
            assert_eq!(model.forward(&row).unwrap(), back.forward(&row).unwrap());
        }
    }

    #[test]
    fn factorized_layers_survive_roundtrip() {
        let mut model = build_default_arch(112, 3).unwrap();
        model.init_weights(9);
        let compressed = crate::compress::compress_model(&model, 1419).unwrap().model;
        let back = match roundtrip(&AnyModel::Cnn(compressed.clone())) {
            AnyModel::Cnn(m) => m,
            other => panic!("wrong kind {other:?}"),
        };
        assert_eq!(compressed, back);
    }

    #[test]
    fn reduced_model_roundtrip() {
        let mut rng = seeded_rng(5);
        let rows: Vec<f32> = (0..60 * 12).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let p = fit_pca(&rows, 12, 4).unwrap();
        let mut rm = build_reduced_model(&p, HeadSpec::Default).unwrap();
        rm.head.init_weights(2);
        let back = match roundtrip(&AnyModel::Reduced(rm.clone())) {
            AnyModel::Reduced(m) => m,
            other => panic!("wrong kind {other:?}"),
        };
        assert_eq!(rm, back);
    }

    #[test]
    fn projector_only_roundtrip() {
        let mut rng = seeded_rng(6);
        let rows: Vec<f32> = (0..40 * 8).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let p = fit_pca(&rows, 8, 3).unwrap();
        let back = match roundtrip(&AnyModel::Projector(p.clone())) {
            AnyModel::Projector(q) => q,
            other => panic!("wrong kind {other:?}"),
        };
        assert_eq!(p, back);
    }

    #[test]
    fn gbt_roundtrip() {
        use crate::gbt::{EnsembleTree, GrowthParams, GrowthPolicy, TreeNode};
        let mut e = BoostedEnsemble::empty(GrowthPolicy::Leaf, GrowthParams::leaf_tuned(), 5);
        e.trees.push(EnsembleTree {
            round: 0,
            class_id: 2,
            root: TreeNode::Split {
                feature: 3,
                threshold: 0.75,
                left: Box::new(TreeNode::Leaf { value: -0.5 }),
                right: Box::new(TreeNode::Split {
                    feature: 1,
                    threshold: -2.5,
                    left: Box::new(TreeNode::Leaf { value: 0.25 }),
                    right: Box::new(TreeNode::Leaf { value: 1.5 }),
                }),
            },
        });
        let back = match roundtrip(&AnyModel::Boosted(e.clone())) {
            AnyModel::Boosted(b) => b,
            other => panic!("wrong kind {other:?}"),
        };
        assert_eq!(e, back);
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_model() {
        let mut model = build_default_arch(30, 3).unwrap();
        model.init_weights(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&AnyModel::Cnn(model), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));

        let mut model = build_default_arch(7, 3).unwrap();
        model.init_weights(1);
        save_model(&AnyModel::Cnn(model), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version low byte
        std::fs::write(&path, bytes).unwrap();
        match load_model(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
