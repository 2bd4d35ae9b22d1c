//! Deterministic synthetic binary-class image generation.
//!
//! Class 0 is a filled disk, class 1 is a ring (annulus), both placed on a
//! flat background with per-pixel Gaussian noise. Segmentation masks mark the
//! object's pixels. The label semantics live entirely in the mask geometry,
//! so distribution-shift variants (more noise, brighter background, a
//! compressed intensity range) keep the classes' meaning intact.
//!
//! The `GMDS1` file format round-trips datasets byte-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const SYNTH_STREAM_TAG: u64 = 0x5359_4e54; // per-sample stream root
const FOLD_STREAM_TAG: u64 = 0x464f_4c44;

/// Parameters of one synthetic dataset variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub image_hw: (usize, usize),
    /// Fraction of class-1 (ring) samples; positives = floor(n * balance).
    pub class_balance: f64,
    /// Radius range shared by disks and ring outer edges, in pixels.
    pub radius: (f64, f64),
    /// Ring thickness range, in pixels.
    pub ring_thickness: (f64, f64),
    pub noise_std: f64,
    pub background_level: f64,
    /// Object intensity is drawn uniformly from this range per sample.
    pub intensity_range: (f64, f64),
    /// Label naming the distribution variant (e.g. "iid", "shift-noise").
    pub shift_tag: String,
    pub with_masks: bool,
}

impl DatasetSpec {
    /// Desk-scale default: 1,000 32x32 images, balanced classes, clearly
    /// separated object/background intensities.
    pub fn desk_default() -> Self {
        DatasetSpec {
            n_samples: 1000,
            image_hw: (32, 32),
            class_balance: 0.5,
            radius: (7.0, 10.0),
            ring_thickness: (2.0, 3.5),
            noise_std: 0.05,
            background_level: 0.15,
            intensity_range: (0.55, 0.85),
            shift_tag: "iid".into(),
            with_masks: true,
        }
    }

    /// Doubled pixel noise, same geometry.
    pub fn shift_noise(&self) -> Self {
        DatasetSpec { noise_std: self.noise_std * 2.0, shift_tag: "shift-noise".into(), ..self.clone() }
    }

    /// Brighter background, same geometry.
    pub fn shift_background(&self) -> Self {
        DatasetSpec {
            background_level: (self.background_level + 0.2).min(1.0),
            shift_tag: "shift-background".into(),
            ..self.clone()
        }
    }

    /// Compressed object-intensity range (lower contrast), same geometry.
    pub fn shift_intensity(&self) -> Self {
        let (lo, hi) = self.intensity_range;
        DatasetSpec {
            intensity_range: (lo, lo + 0.4 * (hi - lo)),
            shift_tag: "shift-intensity".into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| CoreError::InvalidSpec { what: "dataset spec", detail };
        if self.n_samples < 2 {
            return Err(fail(format!("need at least 2 samples, got {}", self.n_samples)));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(fail(format!("class balance {} outside [0, 1]", self.class_balance)));
        }
        let n_pos = (self.n_samples as f64 * self.class_balance).floor() as usize;
        if n_pos == 0 || n_pos == self.n_samples {
            return Err(fail(format!(
                "class balance {} leaves a class empty for n = {}",
                self.class_balance, self.n_samples
            )));
        }
        let (h, w) = self.image_hw;
        if h < 4 || w < 4 {
            return Err(fail(format!("image size {h}x{w} too small")));
        }
        let limit = (h.min(w) as f64) / 2.0;
        if !(self.radius.0 > 0.0 && self.radius.1 >= self.radius.0) {
            return Err(fail(format!("radius range {:?} invalid", self.radius)));
        }
        if self.radius.1 >= limit {
            return Err(fail(format!(
                "radius {} >= min(H, W)/2 = {} (degenerate geometry)",
                self.radius.1, limit
            )));
        }
        if !(self.ring_thickness.0 > 0.0 && self.ring_thickness.1 >= self.ring_thickness.0) {
            return Err(fail(format!("ring thickness range {:?} invalid", self.ring_thickness)));
        }
        if self.ring_thickness.1 >= self.radius.0 {
            return Err(fail("ring thickness must be smaller than the smallest radius".into()));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(fail(format!("background level {} outside [0, 1]", self.background_level)));
        }
        let (ilo, ihi) = self.intensity_range;
        if !(0.0 <= ilo && ilo <= ihi && ihi <= 1.0) {
            return Err(fail(format!("intensity range {:?} invalid", self.intensity_range)));
        }
        if self.noise_std < 0.0 {
            return Err(fail(format!("noise std {} negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Split scheme for train/test(/validation) partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// 80% train / 20% test.
    Holdout,
    /// Five equal folds; a rotation picks test = fold r, val = fold r+1,
    /// train = the remaining 60%.
    FiveFold,
}

/// Per-sample fold assignment under a [`SplitScheme`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub scheme: SplitScheme,
    /// Holdout: 0 = train, 1 = test. FiveFold: fold index 0..=4.
    pub fold_of: Vec<u8>,
}

/// Index sets of one concrete partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Option<Vec<usize>>,
    pub test: Vec<usize>,
}

impl SplitIds {
    /// Resolve a partition. `rotation` is ignored for holdout splits and
    /// taken modulo 5 for five-fold splits.
    pub fn partition(&self, rotation: usize) -> Partition {
        match self.scheme {
            SplitScheme::Holdout => {
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (i, &f) in self.fold_of.iter().enumerate() {
                    if f == 0 {
                        train.push(i);
                    } else {
                        test.push(i);
                    }
                }
                Partition { train, val: None, test }
            }
            SplitScheme::FiveFold => {
                let r = (rotation % 5) as u8;
                let v = ((rotation + 1) % 5) as u8;
                let mut train = Vec::new();
                let mut val = Vec::new();
                let mut test = Vec::new();
                for (i, &f) in self.fold_of.iter().enumerate() {
                    if f == r {
                        test.push(i);
                    } else if f == v {
                        val.push(i);
                    } else {
                        train.push(i);
                    }
                }
                Partition { train, val: Some(val), test }
            }
        }
    }
}

/// Images, labels, optional masks, and split assignments of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// N x H x W x 1 images with values in [0, 1].
    pub images: Tensor,
    /// Binary labels: 0 = filled disk, 1 = ring.
    pub labels: Vec<u8>,
    /// N x H x W object masks with values in {0, 1}, present iff requested.
    pub masks: Option<Tensor>,
    pub split: SplitIds,
    pub spec: DatasetSpec,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the images at `indices` into an N x H x W x 1 batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w) = self.spec.image_hw;
        let isz = h * w;
        let mut out = Tensor::zeros(&[indices.len(), h, w, 1]);
        for (bi, &i) in indices.iter().enumerate() {
            out.data_mut()[bi * isz..(bi + 1) * isz]
                .copy_from_slice(&self.images.data()[i * isz..(i + 1) * isz]);
        }
        out
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Copy the masks at `indices` into an N x H x W batch (None without masks).
    pub fn masks_at(&self, indices: &[usize]) -> Option<Tensor> {
        let masks = self.masks.as_ref()?;
        let (h, w) = self.spec.image_hw;
        let isz = h * w;
        let mut out = Tensor::zeros(&[indices.len(), h, w]);
        for (bi, &i) in indices.iter().enumerate() {
            out.data_mut()[bi * isz..(bi + 1) * isz]
                .copy_from_slice(&masks.data()[i * isz..(i + 1) * isz]);
        }
        Some(out)
    }
}

/// Generate a dataset. Deterministic in `(spec, seed)`: per-sample streams
/// are derived from the sample index, so the result does not depend on
/// evaluation order.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let (h, w) = spec.image_hw;
    let n = spec.n_samples;
    let n_pos = (n as f64 * spec.class_balance).floor() as usize;
    let root = SeededRng::new(seed, SYNTH_STREAM_TAG);

    let mut images = Tensor::zeros(&[n, h, w, 1]);
    let mut masks = spec.with_masks.then(|| Tensor::zeros(&[n, h, w]));
    let mut labels = vec![0u8; n];

    for i in 0..n {
        // Samples 0..n_pos are rings (label 1); the rest are disks.
        let label = u8::from(i < n_pos);
        labels[i] = label;
        let mut rng = root.derive(i as u64);

        let r_out = rng.uniform_in(spec.radius.0, spec.radius.1);
        let thickness = rng.uniform_in(spec.ring_thickness.0, spec.ring_thickness.1);
        let r_in = if label == 1 { (r_out - thickness).max(0.5) } else { 0.0 };
        let margin = r_out + 1.0;
        let cy = rng.uniform_in(margin, h as f64 - 1.0 - margin);
        let cx = rng.uniform_in(margin, w as f64 - 1.0 - margin);
        let intensity = rng.uniform_in(spec.intensity_range.0, spec.intensity_range.1);

        let img = &mut images.data_mut()[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let inside = if label == 1 { d <= r_out && d >= r_in } else { d <= r_out };
                let base = if inside { intensity } else { spec.background_level };
                let noisy = base + spec.noise_std * rng.normal();
                img[y * w + x] = noisy.clamp(0.0, 1.0) as f32;
                if inside {
                    if let Some(m) = &mut masks {
                        m.data_mut()[(i * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
    }

    let split = make_folds(n, SplitScheme::Holdout, root.derive(FOLD_STREAM_TAG).stream())?;
    Ok(LabeledDataset { images, labels, masks, split, spec: spec.clone(), seed })
}

/// Assign each of `n` samples to a fold under `scheme`, deterministically in
/// `seed`. Holdout puts round(0.2 n) samples in the test fold; five-fold
/// deals the seeded shuffle round-robin so fold sizes differ by at most one.
pub fn make_folds(n: usize, scheme: SplitScheme, seed: u64) -> Result<SplitIds> {
    let min_needed = match scheme {
        SplitScheme::Holdout => 2,
        SplitScheme::FiveFold => 5,
    };
    if n < min_needed {
        return Err(CoreError::InvalidSpec {
            what: "fold assignment",
            detail: format!("{scheme:?} needs at least {min_needed} samples, got {n}"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed, FOLD_STREAM_TAG).shuffle(&mut order);
    let mut fold_of = vec![0u8; n];
    match scheme {
        SplitScheme::Holdout => {
            let n_test = (((2 * n) + 5) / 10).clamp(1, n - 1);
            for &i in order.iter().take(n_test) {
                fold_of[i] = 1;
            }
        }
        SplitScheme::FiveFold => {
            for (pos, &i) in order.iter().enumerate() {
                fold_of[i] = (pos % 5) as u8;
            }
        }
    }
    Ok(SplitIds { scheme, fold_of })
}

// --- GMDS1 file format -----------------------------------------------------

const MAGIC: &[u8; 5] = b"GMDS1";
const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct GmdsMeta {
    spec: DatasetSpec,
    seed: u64,
    split: SplitIds,
}

/// Serialize to the GMDS1 binary format: magic, version u16 LE, counts/dims
/// as u32 LE, flags u8, a length-prefixed JSON metadata block, then images as
/// f32 LE, labels as u8, masks as u8.
pub fn write(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let (h, w) = ds.spec.image_hw;
    let n = ds.len();
    let meta = serde_json::to_vec(&GmdsMeta {
        spec: ds.spec.clone(),
        seed: ds.seed,
        split: ds.split.clone(),
    })?;
    let mut bytes = Vec::with_capacity(32 + meta.len() + 4 * n * h * w);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.push(u8::from(ds.masks.is_some()));
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    for &v in ds.images.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&ds.labels);
    if let Some(m) = &ds.masks {
        bytes.extend(m.data().iter().map(|&v| v as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse a GMDS1 file.
pub fn read(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..5] != MAGIC {
        return Err(CoreError::BadMagic { format: "GMDS1", expected: MAGIC.to_vec() });
    }
    let version = u16::from_le_bytes([bytes[5], bytes[6]]);
    if version != FORMAT_VERSION {
        return Err(CoreError::BadVersion {
            format: "GMDS1",
            found: version as u32,
            supported: FORMAT_VERSION as u32,
        });
    }
    let rd_u32 = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize;
    let n = rd_u32(7);
    let h = rd_u32(11);
    let w = rd_u32(15);
    let has_masks = bytes[19] != 0;
    let meta_len = rd_u32(20);
    let mut pos = 24;
    let need = |pos: usize, want: usize, total: usize| -> Result<()> {
        if pos + want > total {
            Err(CoreError::LengthMismatch { format: "GMDS1", expected: pos + want, got: total })
        } else {
            Ok(())
        }
    };
    need(pos, meta_len, bytes.len())?;
    let meta: GmdsMeta = serde_json::from_slice(&bytes[pos..pos + meta_len])?;
    pos += meta_len;

    let img_elems = n * h * w;
    need(pos, 4 * img_elems, bytes.len())?;
    let images: Vec<f32> = bytes[pos..pos + 4 * img_elems]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    pos += 4 * img_elems;

    need(pos, n, bytes.len())?;
    let labels = bytes[pos..pos + n].to_vec();
    pos += n;

    let masks = if has_masks {
        need(pos, img_elems, bytes.len())?;
        let m: Vec<f32> = bytes[pos..pos + img_elems].iter().map(|&b| b as f32).collect();
        pos += img_elems;
        Some(Tensor::new(&[n, h, w], m)?)
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(CoreError::LengthMismatch { format: "GMDS1", expected: pos, got: bytes.len() });
    }

    Ok(LabeledDataset {
        images: Tensor::new(&[n, h, w, 1], images)?,
        labels,
        masks,
        split: meta.split,
        spec: meta.spec,
        seed: meta.seed,
    })
}
