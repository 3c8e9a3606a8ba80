//! Scene manifests and split-index arguments shared by the training,
//! evaluation and search subcommands.
//!
//! A manifest is a text file with one scene per line:
//! `<cube.hsc> <labels.hsl>`, paths resolved relative to the manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use specmask_core::data::{read_cube, read_labels, LabelMap, PixelDataset, SpectralCube, SplitSpec};

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene manifest: one "<cube> <labels>" pair per line.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Training scene indices, e.g. "0-29" or "0,2,5".
    #[arg(long, default_value = "")]
    pub train: String,
    /// Validation scene indices.
    #[arg(long, default_value = "")]
    pub val: String,
    /// Test scene indices.
    #[arg(long, default_value = "")]
    pub test: String,
}

/// "0-4,7,9" -> [0,1,2,3,4,7,9]
pub fn parse_indices(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let lo: usize = a.trim().parse().with_context(|| format!("bad index '{a}'"))?;
                let hi: usize = b.trim().parse().with_context(|| format!("bad index '{b}'"))?;
                if hi < lo {
                    bail!("empty index range '{part}'");
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.parse().with_context(|| format!("bad index '{part}'"))?),
        }
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<(SpectralCube, LabelMap)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut scenes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(cube_path), Some(label_path)) = (parts.next(), parts.next()) else {
            bail!("{}:{}: expected '<cube> <labels>'", path.display(), lineno + 1);
        };
        let cube = read_cube(base.join(cube_path))
            .with_context(|| format!("{}:{}: cube {cube_path}", path.display(), lineno + 1))?;
        let labels = read_labels(base.join(label_path))
            .with_context(|| format!("{}:{}: labels {label_path}", path.display(), lineno + 1))?;
        scenes.push((cube, labels));
    }
    if scenes.is_empty() {
        bail!("manifest {} lists no scenes", path.display());
    }
    Ok(scenes)
}

impl SceneArgs {
    pub fn split_spec(&self, scene_count: usize) -> Result<SplitSpec> {
        let mut spec = SplitSpec {
            train: parse_indices(&self.train)?,
            val: parse_indices(&self.val)?,
            test: parse_indices(&self.test)?,
        };
        // With no explicit lists, every scene trains except the last two
        // (one validation, one test) when there are enough scenes.
        if spec.train.is_empty() && spec.val.is_empty() && spec.test.is_empty() {
            if scene_count >= 3 {
                spec.train = (0..scene_count - 2).collect();
                spec.val = vec![scene_count - 2];
                spec.test = vec![scene_count - 1];
            } else {
                spec.train = (0..scene_count).collect();
            }
        }
        Ok(spec)
    }

    /// Raw (unnormalized) dataset from the manifest and split lists.
    pub fn load_raw(&self) -> Result<PixelDataset> {
        let scenes = load_manifest(&self.scenes)?;
        let spec = self.split_spec(scenes.len())?;
        Ok(PixelDataset::from_scenes(&scenes, &spec)?)
    }
}
