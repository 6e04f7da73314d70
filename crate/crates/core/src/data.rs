//! Cube, label and split files, band normalization, patch extraction and a
//! synthetic scene generator.
//!
//! File layouts (little-endian throughout):
//!
//! * cube: `HSC1` + JSON `{"height","width","bands","dtype":"f32le","order":"band-sequential"}`
//!   + `\n` + `height·width·bands` f32 values, band-major then row-major.
//! * labels: `HSL1` + JSON `{"height","width"}` + `\n` + `height·width` u16 values, row-major.
//! * split: plain JSON `{"train": {"<class>": [pixel, ...]}, "test": {...}}` where a
//!   pixel index is `row·width + col`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Tensor4};

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const LABEL_MAGIC: &[u8; 4] = b"HSL1";

/// `height × width × bands` reflectance cube stored band-sequentially.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * bands {
            return Err(Error::shape(
                "SpectralCube::new",
                format!("{height}x{width}x{bands}"),
                format!("{} values", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite cube value at {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[band * self.pixels() + row * self.width + col]
    }

    /// Spectrum of the pixel with linear index `row·width + col`.
    pub fn spectrum(&self, pixel: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.bands).map(|b| self.values[b * n + pixel] as f64).collect()
    }

    /// One spectrum per row, in the order of `pixels`.
    pub fn features(&self, pixels: &[usize]) -> DenseMatrix {
        let n = self.pixels();
        DenseMatrix::from_fn(pixels.len(), self.bands, |r, b| {
            self.values[b * n + pixels[r]] as f64
        })
    }
}

/// Per-pixel class ids, 0 meaning unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "LabelGrid::new",
                format!("{height}x{width}"),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn max_class(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Train/test pixel indices grouped by class id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeMap<u16, Vec<usize>>,
    pub test: BTreeMap<u16, Vec<usize>>,
}

/// Per-class sample counts of a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

fn flatten(side: &BTreeMap<u16, Vec<usize>>) -> (Vec<usize>, Vec<u16>) {
    let mut pairs: Vec<(usize, u16)> = side
        .iter()
        .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
        .collect();
    pairs.sort_unstable();
    pairs.into_iter().unzip()
}

impl SplitSpec {
    pub fn counts(&self) -> BTreeMap<u16, SplitCounts> {
        let mut out: BTreeMap<u16, SplitCounts> = BTreeMap::new();
        for (&c, idx) in &self.train {
            out.entry(c).or_default().train += idx.len();
        }
        for (&c, idx) in &self.test {
            out.entry(c).or_default().test += idx.len();
        }
        out
    }

    /// Training pixels sorted ascending, with their class ids.
    pub fn train_pixels(&self) -> (Vec<usize>, Vec<u16>) {
        flatten(&self.train)
    }

    /// Test pixels sorted ascending, with their class ids.
    pub fn test_pixels(&self) -> (Vec<usize>, Vec<u16>) {
        flatten(&self.test)
    }

    /// Checks disjointness, bounds and that every index carries its class in
    /// `labels`.
    pub fn validate(&self, labels: &LabelGrid) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (side, map) in [("train", &self.train), ("test", &self.test)] {
            for (&class, idx) in map {
                if class == 0 {
                    return Err(Error::contract(format!("{side} split lists class 0 (unlabeled)")));
                }
                for &i in idx {
                    if i >= labels.labels.len() {
                        return Err(Error::contract(format!(
                            "{side} index {i} outside {} pixels",
                            labels.labels.len()
                        )));
                    }
                    if !seen.insert(i) {
                        return Err(Error::contract(format!("pixel index {i} appears more than once in the split")));
                    }
                    if labels.labels[i] != class {
                        return Err(Error::contract(format!(
                            "{side} index {i} listed under class {class} but labeled {}",
                            labels.labels[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    order: String,
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    height: usize,
    width: usize,
}

fn encode_with_header<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 128);
    out.extend_from_slice(magic);
    out.extend_from_slice(&serde_json::to_vec(header).expect("header serializes"));
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

/// Returns the parsed header and the payload offset.
fn decode_header<H: for<'de> Deserialize<'de>>(bytes: &[u8], magic: &[u8; 4]) -> Result<(H, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let nl = bytes[4..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len() as u64, "header has no terminating newline"))?;
    let header = serde_json::from_slice(&bytes[4..4 + nl])
        .map_err(|e| Error::format(4 + e.column().saturating_sub(1) as u64, format!("bad header: {e}")))?;
    Ok((header, 4 + nl + 1))
}

fn check_payload(bytes: &[u8], start: usize, expected: usize, what: &str) -> Result<()> {
    let have = bytes.len() - start;
    if have < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated {what} payload: {have} of {expected} bytes"),
        ));
    }
    if have > expected {
        return Err(Error::format(
            (start + expected) as u64,
            format!("{} trailing bytes after {what} payload", have - expected),
        ));
    }
    Ok(())
}

pub fn encode_cube(cube: &SpectralCube) -> Vec<u8> {
    let header = CubeHeader {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        dtype: "f32le".into(),
        order: "band-sequential".into(),
    };
    let payload: Vec<u8> = cube.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode_with_header(CUBE_MAGIC, &header, &payload)
}

pub fn decode_cube(bytes: &[u8]) -> Result<SpectralCube> {
    let (h, start): (CubeHeader, usize) = decode_header(bytes, CUBE_MAGIC)?;
    if h.dtype != "f32le" || h.order != "band-sequential" {
        return Err(Error::format(4, format!("unsupported dtype/order {}/{}", h.dtype, h.order)));
    }
    let count = h
        .height
        .checked_mul(h.width)
        .and_then(|v| v.checked_mul(h.bands))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(4, "cube dimensions overflow"))?;
    check_payload(bytes, start, count, "cube")?;
    let values: Vec<f32> = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format((start + 4 * i) as u64, "non-finite cube value"));
    }
    SpectralCube::new(h.height, h.width, h.bands, values)
}

pub fn encode_labels(labels: &LabelGrid) -> Vec<u8> {
    let header = LabelHeader {
        height: labels.height,
        width: labels.width,
    };
    let payload: Vec<u8> = labels.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode_with_header(LABEL_MAGIC, &header, &payload)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelGrid> {
    let (h, start): (LabelHeader, usize) = decode_header(bytes, LABEL_MAGIC)?;
    let count = h
        .height
        .checked_mul(h.width)
        .and_then(|v| v.checked_mul(2))
        .ok_or_else(|| Error::format(4, "label dimensions overflow"))?;
    check_payload(bytes, start, count, "label")?;
    let labels = bytes[start..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelGrid::new(h.height, h.width, labels)
}

pub fn decode_split(bytes: &[u8]) -> Result<SplitSpec> {
    serde_json::from_slice(bytes).map_err(|e| {
        let offset = bytes
            .split(|&b| b == b'\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(offset as u64, format!("bad split: {e}"))
    })
}

pub fn encode_split(split: &SplitSpec) -> Vec<u8> {
    serde_json::to_vec_pretty(split).expect("split serializes")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: &Path) -> Result<SpectralCube> {
    decode_cube(&read(path)?)
}

pub fn save_cube(path: &Path, cube: &SpectralCube) -> Result<()> {
    write(path, &encode_cube(cube))
}

pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    decode_labels(&read(path)?)
}

pub fn save_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    write(path, &encode_labels(labels))
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    decode_split(&read(path)?)
}

pub fn save_split(path: &Path, split: &SplitSpec) -> Result<()> {
    write(path, &encode_split(split))
}

/// Per-band min-max scaling into `[0, 1]`; constant bands become 0.
pub fn normalize_bands(cube: &SpectralCube) -> SpectralCube {
    let n = cube.pixels();
    let mut values = cube.values.clone();
    if n > 0 {
        for band in values.chunks_mut(n) {
            let (lo, hi) = band
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi as f64 - lo as f64;
            for v in band.iter_mut() {
                *v = if span > 0.0 {
                    ((*v as f64 - lo as f64) / span) as f32
                } else {
                    0.0
                };
            }
        }
    }
    SpectralCube {
        values,
        ..cube.clone()
    }
}

/// `size × size × bands` window centred on column `x`, row `y`, with
/// out-of-image coordinates clamped to the nearest edge pixel.
pub fn extract_patch(cube: &SpectralCube, x: usize, y: usize, size: usize) -> Result<Tensor4> {
    let mut out = Tensor4::zeros(1, size, size, cube.bands);
    write_patch(cube, x, y, size, &mut out, 0)?;
    Ok(out)
}

fn write_patch(cube: &SpectralCube, x: usize, y: usize, size: usize, out: &mut Tensor4, slot: usize) -> Result<()> {
    if x >= cube.width || y >= cube.height {
        return Err(Error::contract(format!(
            "patch centre ({x}, {y}) outside {}x{} image",
            cube.width, cube.height
        )));
    }
    if size % 2 == 0 {
        return Err(Error::contract(format!("patch size {size} must be odd")));
    }
    let half = (size / 2) as isize;
    for py in 0..size {
        let sy = (y as isize + py as isize - half).clamp(0, cube.height as isize - 1) as usize;
        for px in 0..size {
            let sx = (x as isize + px as isize - half).clamp(0, cube.width as isize - 1) as usize;
            for b in 0..cube.bands {
                out.set(slot, py, px, b, cube.get(sy, sx, b) as f64);
            }
        }
    }
    Ok(())
}

/// Patches for the given linear pixel indices, stacked along the batch axis.
pub fn extract_patches(cube: &SpectralCube, pixels: &[usize], size: usize) -> Result<Tensor4> {
    let mut out = Tensor4::zeros(pixels.len(), size, size, cube.bands);
    for (slot, &p) in pixels.iter().enumerate() {
        if p >= cube.pixels() {
            return Err(Error::contract(format!("pixel {p} outside image")));
        }
        write_patch(cube, p % cube.width, p / cube.width, size, &mut out, slot)?;
    }
    Ok(out)
}

/// Parameters of [`synth_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub size: usize,
    pub bands: usize,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            size: 32,
            bands: 16,
            noise_sigma: 0.05,
            train_per_class: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: SpectralCube,
    pub labels: LabelGrid,
    pub split: SplitSpec,
    /// Noise-free spectrum of each class, index `class − 1`.
    pub prototypes: Vec<Vec<f64>>,
}

/// Smooth spectrum for class `c` (0-based): a cosine whose frequency and
/// phase depend on the class.
fn prototype(c: usize, bands: usize) -> Vec<f64> {
    let denom = (bands.max(2) - 1) as f64;
    (0..bands)
        .map(|b| {
            let t = b as f64 / denom;
            0.5 + 0.35 * (std::f64::consts::PI * ((c + 1) as f64 * t) + 1.3 * c as f64).cos()
        })
        .collect()
}

/// Vertical class stripes separated by one unlabeled column, each pixel a
/// class prototype plus i.i.d. Gaussian noise. Unlabeled separator pixels
/// carry the mean of their two neighbouring prototypes.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let SynthSpec {
        classes,
        size,
        bands,
        noise_sigma,
        train_per_class,
        seed,
    } = *spec;
    if classes < 2 {
        return Err(Error::config(format!("synthetic scene needs at least 2 classes, got {classes}")));
    }
    if classes > u16::MAX as usize {
        return Err(Error::config("too many classes"));
    }
    if bands == 0 {
        return Err(Error::config("synthetic scene needs at least one band"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma {noise_sigma} must be finite and >= 0")));
    }
    let labeled_cols = size.saturating_sub(classes - 1);
    let stripe = labeled_cols / classes;
    if stripe == 0 || stripe * size <= train_per_class {
        return Err(Error::config(format!(
            "{size}x{size} scene too small for {classes} regions with {train_per_class} training pixels each"
        )));
    }
    let mut column_class = Vec::with_capacity(size);
    for c in 0..classes {
        let width = if c + 1 == classes { labeled_cols - stripe * c } else { stripe };
        column_class.extend(std::iter::repeat_n(Some(c), width));
        if c + 1 < classes {
            column_class.push(None);
        }
    }
    debug_assert_eq!(column_class.len(), size);

    let prototypes: Vec<Vec<f64>> = (0..classes).map(|c| prototype(c, bands)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let n = size * size;
    let mut values = vec![0f32; n * bands];
    let mut labels = vec![0u16; n];
    for row in 0..size {
        for col in 0..size {
            let p = row * size + col;
            let mean: Vec<f64> = match column_class[col] {
                Some(c) => {
                    labels[p] = (c + 1) as u16;
                    prototypes[c].clone()
                }
                None => {
                    let left = column_class[col - 1].expect("separators are isolated");
                    let right = column_class[col + 1].expect("separators are isolated");
                    prototypes[left]
                        .iter()
                        .zip(&prototypes[right])
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect()
                }
            };
            for (b, m) in mean.iter().enumerate() {
                let e = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values[b * n + p] = (m + e) as f32;
            }
        }
    }

    let mut split = SplitSpec::default();
    for c in 1..=classes as u16 {
        let mut idx: Vec<usize> = (0..n).filter(|&p| labels[p] == c).collect();
        idx.shuffle(&mut rng);
        let mut test = idx.split_off(train_per_class);
        idx.sort_unstable();
        test.sort_unstable();
        split.train.insert(c, idx);
        split.test.insert(c, test);
    }
    Ok(SynthScene {
        cube: SpectralCube::new(size, size, bands, values)?,
        labels: LabelGrid::new(size, size, labels)?,
        split,
        prototypes,
    })
}
