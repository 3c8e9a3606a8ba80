//! Hyperspectral cube and label I/O, band exclusion, Z-score normalization,
//! dataset splitting, and a synthetic-scene generator that doubles as a
//! ground-truth oracle at desk scale.
//!
//! Cube files (`HSC1`, little-endian): magic, u32 height, u32 width,
//! u32 bands, bands x f32 wavelengths, bands x u8 validity flags, then
//! height*width*bands f32 radiance in pixel-major band-interleaved order.
//! Label files (`HSL1`): magic, u32 height, u32 width, height*width u8
//! labels.

use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::{seeded_rng, Matrix};

pub const CLASS_SEA: u8 = 0;
pub const CLASS_LAND: u8 = 1;
pub const CLASS_CLOUD: u8 = 2;
pub const CLASS_COUNT: usize = 3;

/// Bands flagged invalid by default when a cube has 120 bands. The
/// count is fixed by the sensor's known calibration anomalies; the exact
/// indices are configurable because they are a property of the dataset
/// distribution, not of this toolkit. The defaults take the spectrum
/// edges plus the oxygen A-band absorption region near 760 nm.
pub const DEFAULT_EXCLUDED_BANDS_120: [usize; 8] = [0, 1, 2, 3, 106, 107, 118, 119];

const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HSL1_MAGIC: &[u8; 4] = b"HSL1";

// ---------------------------------------------------------------------------
// Cube and labels
// ---------------------------------------------------------------------------

/// A height x width x bands radiance raster with wavelength metadata and a
/// per-band validity mask. Radiance is stored pixel-major, band-interleaved:
/// `radiance[(y*width + x)*bands + b]`.
#[derive(Debug, Clone)]
pub struct SpectralCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// W·m⁻²·sr⁻¹·nm⁻¹ per sample.
    pub radiance: Vec<f32>,
    /// nm, strictly increasing.
    pub wavelengths: Vec<f32>,
    pub band_valid: Vec<bool>,
}

impl SpectralCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        radiance: Vec<f32>,
        wavelengths: Vec<f32>,
        band_valid: Vec<bool>,
    ) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(bands))
            .ok_or_else(|| Error::invalid_data("cube dimensions overflow".to_string()))?;
        if radiance.len() != expected {
            return Err(Error::invalid_data(format!(
                "radiance length {} != {}x{}x{}",
                radiance.len(),
                height,
                width,
                bands
            )));
        }
        if wavelengths.len() != bands || band_valid.len() != bands {
            return Err(Error::invalid_data("band metadata length mismatch".to_string()));
        }
        if !wavelengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid_data("wavelengths not strictly increasing".to_string()));
        }
        if !band_valid.iter().any(|&v| v) {
            return Err(Error::invalid_data("no valid bands".to_string()));
        }
        Ok(SpectralCube {
            height,
            width,
            bands,
            radiance,
            wavelengths,
            band_valid,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Spectrum of one pixel (all bands).
    pub fn spectrum(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.bands;
        &self.radiance[base..base + self.bands]
    }

    pub fn valid_band_count(&self) -> usize {
        self.band_valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_band_indices(&self) -> Vec<usize> {
        (0..self.bands).filter(|&b| self.band_valid[b]).collect()
    }
}

/// Per-pixel class labels paired with a cube.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid_data(format!(
                "label length {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::invalid_data(format!("label value {bad} out of range")));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// HSC1 / HSL1 files
// ---------------------------------------------------------------------------

fn decode_cube(buf: &[u8]) -> Result<SpectralCube> {
    let mut r = ByteReader::new(buf);
    r.magic(HSC1_MAGIC, "cube file")?;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let bands = r.u32("bands")? as usize;
    let samples = (height as u128) * (width as u128) * (bands as u128);
    if samples > usize::MAX as u128 / 4 {
        return Err(Error::invalid_data(format!(
            "cube dimensions {height}x{width}x{bands} overflow addressable size"
        )));
    }
    let wavelengths = r.f32_vec(bands, "wavelengths")?;
    let flag_offset = r.offset();
    let flags = r.bytes(bands, "band validity flags")?;
    let mut band_valid = Vec::with_capacity(bands);
    for (i, &f) in flags.iter().enumerate() {
        match f {
            0 => band_valid.push(false),
            1 => band_valid.push(true),
            other => {
                return Err(Error::format(
                    flag_offset + i as u64,
                    format!("band validity flag must be 0 or 1, got {other}"),
                ))
            }
        }
    }
    let radiance = r.f32_vec(samples as usize, "radiance payload")?;
    r.expect_end("cube file")?;
    SpectralCube::new(height, width, bands, radiance, wavelengths, band_valid)
}

fn encode_cube(cube: &SpectralCube) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(HSC1_MAGIC);
    w.u32(cube.height as u32);
    w.u32(cube.width as u32);
    w.u32(cube.bands as u32);
    w.f32_slice(&cube.wavelengths);
    for &v in &cube.band_valid {
        w.u8(v as u8);
    }
    w.f32_slice(&cube.radiance);
    w.into_vec()
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    decode_cube(&std::fs::read(path)?)
}

pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_cube(cube))?;
    Ok(())
}

fn decode_labels(buf: &[u8]) -> Result<LabelMap> {
    let mut r = ByteReader::new(buf);
    r.magic(HSL1_MAGIC, "label file")?;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Error::invalid_data("label dimensions overflow".to_string()))?;
    let payload_offset = r.offset();
    let raw = r.bytes(n, "label payload")?;
    if let Some(i) = raw.iter().position(|&l| l as usize >= CLASS_COUNT) {
        return Err(Error::format(
            payload_offset + i as u64,
            format!("label value {} out of range", raw[i]),
        ));
    }
    let labels = raw.to_vec();
    r.expect_end("label file")?;
    LabelMap::new(height, width, labels)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_labels(&std::fs::read(path)?)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(HSL1_MAGIC);
    w.u32(labels.height as u32);
    w.u32(labels.width as u32);
    w.bytes(&labels.labels);
    std::fs::write(path, w.into_vec())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Band exclusion
// ---------------------------------------------------------------------------

/// Drop invalid bands, producing one feature row per pixel in row-major
/// pixel order. Column j holds the j-th valid band.
pub fn exclude_bands(cube: &SpectralCube) -> Result<Matrix> {
    let valid = cube.valid_band_indices();
    if valid.is_empty() {
        return Err(Error::invalid_data("all bands flagged invalid".to_string()));
    }
    let n = cube.pixel_count();
    let d = valid.len();
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        let base = p * cube.bands;
        for &b in &valid {
            data.push(cube.radiance[base + b]);
        }
    }
    Matrix::from_vec(n, d, data)
}

// ---------------------------------------------------------------------------
// Z-score normalization
// ---------------------------------------------------------------------------

/// Std floor applied to constant columns so feature indices stay stable
/// across scenes.
pub const STD_FLOOR: f32 = 1e-6;

/// Per-feature standardization statistics, fit on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub means: Vec<f32>,
    /// Population standard deviations, floored at [`STD_FLOOR`].
    pub stds: Vec<f32>,
    /// True where the floor kicked in (constant column warning flag).
    pub floored: Vec<bool>,
}

impl NormStats {
    pub fn feature_count(&self) -> usize {
        self.means.len()
    }

    pub fn any_floored(&self) -> bool {
        self.floored.iter().any(|&f| f)
    }
}

/// Fit Z-score statistics over flat row-major `rows` with `d` features.
/// Uses the population (divide by N) standard deviation.
pub fn fit_zscore(rows: &[f32], d: usize) -> Result<NormStats> {
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::invalid_argument(format!(
            "row data length {} not divisible by feature count {d}",
            rows.len()
        )));
    }
    let n = rows.len() / d;
    if n < 2 {
        return Err(Error::invalid_argument(format!(
            "need at least 2 training rows to fit normalization, got {n}"
        )));
    }
    let mut means = vec![0.0f64; d];
    for row in rows.chunks_exact(d) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0f64; d];
    for row in rows.chunks_exact(d) {
        for ((v, &x), m) in vars.iter_mut().zip(row).zip(&means) {
            let delta = x as f64 - *m;
            *v += delta * delta;
        }
    }
    let mut stds = Vec::with_capacity(d);
    let mut floored = Vec::with_capacity(d);
    for v in &vars {
        let s = (v / n as f64).sqrt() as f32;
        if s < STD_FLOOR {
            stds.push(STD_FLOOR);
            floored.push(true);
        } else {
            stds.push(s);
            floored.push(false);
        }
    }
    Ok(NormStats {
        means: means.iter().map(|&m| m as f32).collect(),
        stds,
        floored,
    })
}

/// Standardize rows in place with frozen statistics.
pub fn apply_zscore(rows: &mut [f32], d: usize, stats: &NormStats) -> Result<()> {
    if stats.feature_count() != d || rows.len() % d != 0 {
        return Err(Error::invalid_argument(
            "normalization statistics do not match feature count".to_string(),
        ));
    }
    for row in rows.chunks_exact_mut(d) {
        for ((x, m), s) in row.iter_mut().zip(&stats.means).zip(&stats.stds) {
            *x = (*x - m) / s;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Disjoint scene-index lists for the three splits.
#[derive(Debug, Clone, Default)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Consecutive scenes: first `train`, then `val`, then `test`.
    pub fn consecutive(train: usize, val: usize, test: usize) -> Self {
        SplitSpec {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }

    fn validate(&self, scene_count: usize) -> Result<()> {
        let mut seen = vec![false; scene_count];
        for (&idx, name) in self
            .train
            .iter()
            .map(|i| (i, "train"))
            .chain(self.val.iter().map(|i| (i, "val")))
            .chain(self.test.iter().map(|i| (i, "test")))
        {
            if idx >= scene_count {
                return Err(Error::invalid_argument(format!(
                    "{name} scene index {idx} out of range for {scene_count} scenes"
                )));
            }
            if seen[idx] {
                return Err(Error::invalid_argument(format!(
                    "scene index {idx} appears in more than one split"
                )));
            }
            seen[idx] = true;
        }
        Ok(())
    }
}

/// Flattened per-pixel feature rows with class labels and split tags.
#[derive(Debug, Clone)]
pub struct PixelDataset {
    /// Row-major, `len = rows * feature_count`.
    pub features: Vec<f32>,
    pub feature_count: usize,
    pub labels: Vec<u8>,
    pub split: Vec<SplitTag>,
}

impl PixelDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_count..(i + 1) * self.feature_count]
    }

    pub fn split_len(&self, tag: SplitTag) -> usize {
        self.split.iter().filter(|&&t| t == tag).count()
    }

    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// Raw (unnormalized) dataset from labeled scenes. Rows are emitted in
    /// split order (all train scenes, then val, then test), row-major
    /// within each scene.
    pub fn from_scenes(scenes: &[(SpectralCube, LabelMap)], spec: &SplitSpec) -> Result<Self> {
        spec.validate(scenes.len())?;
        let mut feature_count = None;
        let mut valid_ref: Option<Vec<usize>> = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut split = Vec::new();

        for (indices, tag) in [
            (&spec.train, SplitTag::Train),
            (&spec.val, SplitTag::Val),
            (&spec.test, SplitTag::Test),
        ] {
            for &idx in indices {
                let (cube, lab) = &scenes[idx];
                if lab.height != cube.height || lab.width != cube.width {
                    return Err(Error::invalid_data(format!(
                        "scene {idx}: label dimensions {}x{} do not match cube {}x{}",
                        lab.height, lab.width, cube.height, cube.width
                    )));
                }
                let valid = cube.valid_band_indices();
                match &valid_ref {
                    None => {
                        feature_count = Some(valid.len());
                        valid_ref = Some(valid);
                    }
                    Some(prev) if *prev != valid => {
                        return Err(Error::invalid_data(format!(
                            "scene {idx}: band validity mask differs from earlier scenes"
                        )));
                    }
                    _ => {}
                }
                let m = exclude_bands(cube)?;
                features.extend_from_slice(m.data());
                labels.extend_from_slice(&lab.labels);
                split.extend(std::iter::repeat(tag).take(lab.labels.len()));
            }
        }

        let feature_count = feature_count
            .ok_or_else(|| Error::invalid_argument("split spec selects no scenes".to_string()))?;
        Ok(PixelDataset {
            features,
            feature_count,
            labels,
            split,
        })
    }

    /// Fit Z-score statistics on the train rows only, then standardize
    /// every row with those frozen statistics.
    pub fn fit_normalization(&mut self) -> Result<NormStats> {
        let train: Vec<usize> = self.indices_of(SplitTag::Train);
        if train.len() < 2 {
            return Err(Error::invalid_argument(format!(
                "need at least 2 train rows, got {}",
                train.len()
            )));
        }
        let d = self.feature_count;
        let mut train_rows = Vec::with_capacity(train.len() * d);
        for &i in &train {
            train_rows.extend_from_slice(self.row(i));
        }
        let stats = fit_zscore(&train_rows, d)?;
        apply_zscore(&mut self.features, d, &stats)?;
        Ok(stats)
    }

    /// Standardize every row with statistics frozen elsewhere.
    pub fn apply_normalization(&mut self, stats: &NormStats) -> Result<()> {
        apply_zscore(&mut self.features, self.feature_count, stats)
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Spatial arrangement of the three classes in a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Horizontal thirds: sea rows on top, land in the middle, cloud below.
    Thirds,
    /// label = (x + y) mod 3.
    Checkerboard,
    /// The first round(f * pixels) pixels in row-major order are cloud;
    /// the remainder is split evenly between sea and land.
    CloudFraction(f64),
}

/// Configuration for [`synth_scene`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub noise_sigma: f32,
    pub layout: Layout,
    /// Per-class prototype spectra over the band grid; defaults to three
    /// Gaussian bumps peaking at 450/550/700 nm for sea/land/cloud.
    pub prototypes: Option<[Vec<f32>; CLASS_COUNT]>,
    /// Overrides the default band-validity mask.
    pub invalid_bands: Option<Vec<usize>>,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        SynthConfig {
            height,
            width,
            bands,
            noise_sigma: 0.01,
            layout: Layout::Thirds,
            prototypes: None,
            invalid_bands: None,
        }
    }
}

/// Evenly spaced band-center wavelengths over the sensor's 400-800 nm range.
pub fn default_wavelengths(bands: usize) -> Vec<f32> {
    if bands == 1 {
        return vec![400.0];
    }
    (0..bands)
        .map(|i| 400.0 + 400.0 * i as f32 / (bands - 1) as f32)
        .collect()
}

/// Default class prototypes: smooth Gaussian bumps over the wavelength grid,
/// peaking at 450 nm (sea), 550 nm (land) and 700 nm (cloud). Amplitudes
/// rise from sea to cloud so the brightest class is cloud, and a small
/// baseline keeps radiance positive everywhere.
pub fn default_prototypes(wavelengths: &[f32]) -> [Vec<f32>; CLASS_COUNT] {
    let bump = |peak: f32, amp: f32, width: f32| -> Vec<f32> {
        wavelengths
            .iter()
            .map(|&l| {
                let z = (l - peak) / width;
                5.0 + amp * (-0.5 * z * z).exp()
            })
            .collect()
    };
    [
        bump(450.0, 30.0, 60.0),
        bump(550.0, 40.0, 70.0),
        bump(700.0, 80.0, 90.0),
    ]
}

fn layout_labels(layout: Layout, height: usize, width: usize) -> Result<Vec<u8>> {
    let total = height * width;
    let labels = match layout {
        Layout::Thirds => {
            let mut labels = Vec::with_capacity(total);
            for y in 0..height {
                let class = if y < height / 3 {
                    CLASS_SEA
                } else if y < 2 * height / 3 {
                    CLASS_LAND
                } else {
                    CLASS_CLOUD
                };
                labels.extend(std::iter::repeat(class).take(width));
            }
            labels
        }
        Layout::Checkerboard => {
            let mut labels = Vec::with_capacity(total);
            for y in 0..height {
                for x in 0..width {
                    labels.push(((x + y) % CLASS_COUNT) as u8);
                }
            }
            labels
        }
        Layout::CloudFraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid_argument(format!(
                    "cloud fraction {f} outside [0, 1]"
                )));
            }
            let n_cloud = (f * total as f64).round() as usize;
            let rest = total - n_cloud;
            let n_sea = rest / 2;
            let mut labels = vec![CLASS_CLOUD; n_cloud];
            labels.extend(std::iter::repeat(CLASS_SEA).take(n_sea));
            labels.extend(std::iter::repeat(CLASS_LAND).take(rest - n_sea));
            labels
        }
    };
    Ok(labels)
}

/// Generate a labeled synthetic scene: per-pixel radiance is the class
/// prototype plus Gaussian noise of the configured sigma. Deterministic
/// per seed.
pub fn synth_scene(config: &SynthConfig, seed: u64) -> Result<(SpectralCube, LabelMap)> {
    if config.bands == 0 || config.height == 0 || config.width == 0 {
        return Err(Error::invalid_argument("scene dimensions must be positive".to_string()));
    }
    if config.noise_sigma < 0.0 {
        return Err(Error::invalid_argument("noise sigma must be nonnegative".to_string()));
    }
    let wavelengths = default_wavelengths(config.bands);
    let prototypes = match &config.prototypes {
        Some(p) => p.clone(),
        None => default_prototypes(&wavelengths),
    };
    for (c, proto) in prototypes.iter().enumerate() {
        if proto.len() != config.bands {
            return Err(Error::invalid_argument(format!(
                "prototype for class {c} has {} entries, expected {}",
                proto.len(),
                config.bands
            )));
        }
    }

    let mut band_valid = vec![true; config.bands];
    match &config.invalid_bands {
        Some(list) => {
            for &b in list {
                if b >= config.bands {
                    return Err(Error::invalid_argument(format!(
                        "invalid-band index {b} out of range"
                    )));
                }
                band_valid[b] = false;
            }
        }
        None if config.bands == 120 => {
            for &b in &DEFAULT_EXCLUDED_BANDS_120 {
                band_valid[b] = false;
            }
        }
        None => {}
    }

    let labels = layout_labels(config.layout, config.height, config.width)?;
    let mut radiance = Vec::with_capacity(labels.len() * config.bands);
    if config.noise_sigma == 0.0 {
        for &l in &labels {
            radiance.extend_from_slice(&prototypes[l as usize]);
        }
    } else {
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0f32, config.noise_sigma)
            .map_err(|e| Error::invalid_argument(format!("bad noise sigma: {e}")))?;
        for &l in &labels {
            for &p in &prototypes[l as usize] {
                radiance.push(p + noise.sample(&mut rng));
            }
        }
    }

    let cube = SpectralCube::new(
        config.height,
        config.width,
        config.bands,
        radiance,
        wavelengths,
        band_valid,
    )?;
    let map = LabelMap::new(config.height, config.width, labels)?;
    Ok((cube, map))
}

/// A batch of labeled synthetic scenes with distinct per-scene seeds.
pub fn synth_scenes(config: &SynthConfig, count: usize, seed: u64) -> Result<Vec<(SpectralCube, LabelMap)>> {
    (0..count)
        .map(|i| synth_scene(config, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cube() -> SpectralCube {
        // 2x2x3 cube of zeros.
        SpectralCube::new(
            2,
            2,
            3,
            vec![0.0; 12],
            vec![400.0, 500.0, 600.0],
            vec![true, true, true],
        )
        .unwrap()
    }

    #[test]
    fn cube_roundtrip_bit_identical() {
        let mut cube = tiny_cube();
        cube.radiance[5] = -0.0; // sign bit must survive
        cube.radiance[7] = f32::from_bits(0x7fc00001); // NaN payload too
        let bytes = encode_cube(&cube);
        let back = decode_cube(&bytes).unwrap();
        let orig_bits: Vec<u32> = cube.radiance.iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u32> = back.radiance.iter().map(|v| v.to_bits()).collect();
        assert_eq!(orig_bits, back_bits);
        assert_eq!(cube.wavelengths, back.wavelengths);
        assert_eq!(cube.band_valid, back.band_valid);
    }

    #[test]
    fn cube_truncated_payload_reports_offset() {
        let cube = tiny_cube();
        let mut bytes = encode_cube(&cube);
        // Header claims 3 bands but drop one band of one pixel (4 bytes).
        bytes.truncate(bytes.len() - 4);
        match decode_cube(&bytes) {
            Err(Error::Format { offset, .. }) => {
                // Radiance starts after magic(4) + dims(12) + wl(12) + flags(3).
                assert_eq!(offset, 4 + 12 + 12 + 3);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cube_bad_magic() {
        let mut bytes = encode_cube(&tiny_cube());
        bytes[0] = b'X';
        match decode_cube(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn full_frame_header_sizes_accepted() {
        // A 956-line, 684-pixel-slit, 120-band frame: the header parses and
        // the reader demands exactly 956*684*120 f32 samples of payload.
        let mut w = ByteWriter::new();
        w.magic(HSC1_MAGIC);
        w.u32(956);
        w.u32(684);
        w.u32(120);
        w.f32_slice(&default_wavelengths(120));
        for _ in 0..120 {
            w.u8(1);
        }
        let bytes = w.into_vec();
        match decode_cube(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, bytes.len() as u64);
                let need = 956u64 * 684 * 120 * 4;
                assert!(
                    message.contains(&format!("need {need} bytes")),
                    "message: {message}"
                );
            }
            other => panic!("expected truncation at payload, got {other:?}"),
        }
    }

    #[test]
    fn labels_reject_out_of_range_values() {
        let mut w = ByteWriter::new();
        w.magic(HSL1_MAGIC);
        w.u32(1);
        w.u32(2);
        w.bytes(&[1, 3]);
        match decode_labels(&w.into_vec()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4 + 8 + 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn exclude_bands_identity_when_all_valid() {
        let cube = tiny_cube();
        let m = exclude_bands(&cube).unwrap();
        assert_eq!(m.rows(), 4);
        assert_eq!(m.cols(), 3);
    }

    #[test]
    fn exclude_bands_picks_hand_chosen_indices() {
        // 10-band cube, bands {1, 4, 8} flagged invalid -> D = 7.
        let bands = 10;
        let mut cfg = SynthConfig::new(2, 3, bands);
        cfg.noise_sigma = 0.0;
        cfg.invalid_bands = Some(vec![1, 4, 8]);
        let (cube, _) = synth_scene(&cfg, 0).unwrap();
        let m = exclude_bands(&cube).unwrap();
        assert_eq!(m.cols(), 7);
        let keep = [0usize, 2, 3, 5, 6, 7, 9];
        for (j, &b) in keep.iter().enumerate() {
            assert_eq!(m.get(0, j), cube.spectrum(0, 0)[b]);
        }
    }

    #[test]
    fn default_120_band_mask_gives_112_features() {
        let mut cfg = SynthConfig::new(2, 2, 120);
        cfg.noise_sigma = 0.0;
        let (cube, _) = synth_scene(&cfg, 0).unwrap();
        assert_eq!(cube.valid_band_count(), 112);
        assert_eq!(exclude_bands(&cube).unwrap().cols(), 112);
    }

    #[test]
    fn zscore_two_point_column() {
        let stats = fit_zscore(&[0.0, 2.0], 1).unwrap();
        assert!((stats.means[0] - 1.0).abs() < 1e-7);
        assert!((stats.stds[0] - 1.0).abs() < 1e-7);
        let mut rows = vec![0.0, 2.0];
        apply_zscore(&mut rows, 1, &stats).unwrap();
        assert_eq!(rows, vec![-1.0, 1.0]);
    }

    #[test]
    fn zscore_constant_column_floors_and_flags() {
        let stats = fit_zscore(&[5.0, 5.0, 5.0], 1).unwrap();
        assert_eq!(stats.stds[0], STD_FLOOR);
        assert!(stats.floored[0]);
        assert!(stats.any_floored());
        let mut rows = vec![5.0, 5.0, 5.0];
        apply_zscore(&mut rows, 1, &stats).unwrap();
        assert_eq!(rows, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zscore_needs_two_rows() {
        assert!(matches!(fit_zscore(&[1.0], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_rejects_overlap() {
        let spec = SplitSpec {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        let cfg = SynthConfig::new(2, 2, 4);
        let scenes = synth_scenes(&cfg, 3, 9).unwrap();
        assert!(matches!(
            PixelDataset::from_scenes(&scenes, &spec),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn split_sizes_follow_scene_membership() {
        let cfg = SynthConfig::new(4, 4, 5);
        let scenes = synth_scenes(&cfg, 5, 3).unwrap();
        let ds = PixelDataset::from_scenes(&scenes, &SplitSpec::consecutive(3, 1, 1)).unwrap();
        assert_eq!(ds.split_len(SplitTag::Train), 48);
        assert_eq!(ds.split_len(SplitTag::Val), 16);
        assert_eq!(ds.split_len(SplitTag::Test), 16);
        assert_eq!(ds.len(), 80);
    }

    #[test]
    fn normalization_ignores_non_train_rows() {
        let cfg = SynthConfig::new(4, 4, 6);
        let scenes = synth_scenes(&cfg, 3, 21).unwrap();
        let spec = SplitSpec::consecutive(1, 1, 1);
        let mut a = PixelDataset::from_scenes(&scenes, &spec).unwrap();
        let stats_a = a.fit_normalization().unwrap();

        // Same train scene, different test scene: stats must be identical.
        let scenes_b = vec![
            scenes[0].clone(),
            scenes[1].clone(),
            synth_scene(&SynthConfig::new(4, 4, 6), 999).unwrap(),
        ];
        let mut b = PixelDataset::from_scenes(&scenes_b, &spec).unwrap();
        let stats_b = b.fit_normalization().unwrap();
        assert_eq!(stats_a, stats_b);
    }

    #[test]
    fn synth_sigma_zero_is_exactly_prototypes() {
        let mut cfg = SynthConfig::new(3, 3, 8);
        cfg.noise_sigma = 0.0;
        let (cube, labels) = synth_scene(&cfg, 5).unwrap();
        let protos = default_prototypes(&cube.wavelengths);
        for y in 0..3 {
            for x in 0..3 {
                let l = labels.labels[y * 3 + x] as usize;
                assert_eq!(cube.spectrum(y, x), &protos[l][..]);
            }
        }
    }

    #[test]
    fn synth_cloud_fraction_exact() {
        let mut cfg = SynthConfig::new(8, 8, 4);
        cfg.layout = Layout::CloudFraction(0.5);
        let (_, labels) = synth_scene(&cfg, 1).unwrap();
        let counts = labels.class_counts();
        assert_eq!(counts[CLASS_CLOUD as usize], 32);
    }

    #[test]
    fn synth_deterministic_per_seed() {
        let cfg = SynthConfig::new(4, 4, 6);
        let (a, _) = synth_scene(&cfg, 7).unwrap();
        let (b, _) = synth_scene(&cfg, 7).unwrap();
        let (c, _) = synth_scene(&cfg, 8).unwrap();
        assert_eq!(a.radiance, b.radiance);
        assert_ne!(a.radiance, c.radiance);
    }

    #[test]
    fn synth_rejects_bad_prototype_length() {
        let mut cfg = SynthConfig::new(2, 2, 5);
        cfg.prototypes = Some([vec![0.0; 4], vec![0.0; 5], vec![0.0; 5]]);
        assert!(matches!(synth_scene(&cfg, 0), Err(Error::InvalidArgument(_))));
    }
}
