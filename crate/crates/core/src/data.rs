//! Datasets: in-memory image collections, IDX file I/O, and synthetic
//! generators small enough to run attacks against at desk scale.
//!
//! IDX is the MNIST container format: a big-endian header (`0x00000803`
//! for image files, `0x00000801` for label files) followed by raw bytes.
//! Multi-channel images are stored with the channel planes stacked along
//! the row axis — `rows = C·d` — since the 3-dimensional IDX layout has no
//! channel slot of its own; `load_idx` takes the channel count to undo the
//! stacking.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labelled image collection. Pixels live in `[0, 1]`; every image has
/// the same `[C, d, d]` shape; labels are class ids below `classes`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("Dataset", "need at least one class"));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let shape = match self.images.first() {
            Some(img) => img.shape().to_vec(),
            None => return Ok(()),
        };
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::invalid(
                "Dataset",
                "images must be square [channels, d, d] tensors",
            ));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::Contract(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Contract(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.classes)
        {
            return Err(Error::Contract(format!(
                "label {l} of instance {i} is out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, d, d]` shape shared by every image; `None` for an empty set.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    /// New dataset holding clones of the selected instances, in the order
    /// given.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, lab) = self
                .images
                .get(i)
                .zip(self.labels.get(i))
                .ok_or_else(|| {
                    Error::Contract(format!("index {i} out of range for {} instances", self.len()))
                })?;
            images.push(img.clone());
            labels.push(*lab);
        }
        Dataset::new(format!("{}[subset]", self.name), images, labels, self.classes)
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            msg: msg.into(),
            offset: self.pos as u64,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: expected {n} bytes, found {}",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads an IDX image/label file pair into a dataset.
///
/// `channels` says how many planes are stacked per image row-wise (1 for
/// MNIST-shaped files); `classes` sizes the label space.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    channels: usize,
    classes: usize,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if channels == 0 {
        return Err(Error::invalid("load_idx", "channels must be at least 1"));
    }

    let image_bytes = fs::read(images_path)?;
    let mut r = IdxReader {
        bytes: &image_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = r.u32_be("image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows % channels != 0 {
        return Err(r.err(format!("{rows} rows do not split into {channels} channel planes")));
    }
    let width = rows / channels;
    if width != cols {
        return Err(r.err(format!(
            "per-channel image is {width}x{cols}, expected square"
        )));
    }
    let pixels = r.take(count * rows * cols, "pixel payload")?;
    if r.pos != image_bytes.len() {
        return Err(r.err(format!(
            "{} trailing bytes after pixel payload",
            image_bytes.len() - r.pos
        )));
    }

    let label_bytes = fs::read(labels_path)?;
    let mut r = IdxReader {
        bytes: &label_bytes,
        pos: 0,
        path: labels_path,
    };
    let magic = r.u32_be("label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let label_count = r.u32_be("label count")? as usize;
    if label_count != count {
        return Err(r.err(format!("{label_count} labels for {count} images")));
    }
    let raw_labels = r.take(label_count, "label payload")?;

    let per_image = rows * cols;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let data = pixels[i * per_image..(i + 1) * per_image]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        images.push(Tensor::new(vec![channels, width, width], data)?);
    }
    let labels = raw_labels.iter().map(|&b| b as usize).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, images, labels, classes)
}

/// Writes a dataset as an IDX image/label file pair (inverse of
/// [`load_idx`]). Pixels are quantized to bytes by round-to-nearest.
pub fn save_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    ds.validate()?;
    let (channels, width) = match ds.image_shape() {
        Some(shape) => (shape[0], shape[1]),
        None => (1, 0),
    };
    let rows = channels * width;

    let mut image_bytes =
        Vec::with_capacity(16 + ds.len() * rows * width);
    image_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(width as u32).to_be_bytes());
    for img in &ds.images {
        image_bytes.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    fs::write(images_path, image_bytes)?;

    let mut label_bytes = Vec::with_capacity(8 + ds.len());
    label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    label_bytes.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Flavor of generated data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Unstructured pixel noise; labels carry no signal.
    Gaussian,
    /// Class-dependent stripe orientation and phase.
    Stripes,
    /// One bright blob per image at a class-dependent position.
    Blobs,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SynthKind::Gaussian),
            "stripes" => Ok(SynthKind::Stripes),
            "blobs" => Ok(SynthKind::Blobs),
            other => Err(Error::invalid(
                "synth kind",
                format!("unknown kind {other:?} (expected gaussian, stripes, or blobs)"),
            )),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Gaussian => "gaussian",
            SynthKind::Stripes => "stripes",
            SynthKind::Blobs => "blobs",
        })
    }
}

/// Deterministic synthetic dataset: `n` images of shape `[c, d, d]` over
/// `classes` labels. The stripes and blobs kinds tie image structure to the
/// label so that training on them can actually learn something.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    c: usize,
    d: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if c == 0 || d == 0 || classes == 0 {
        return Err(Error::invalid(
            "synth_dataset",
            "channels, width, and classes must all be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("fixed std");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..classes);
        let mut data = vec![0.0f64; c * d * d];
        match kind {
            SynthKind::Gaussian => {
                let wide = Normal::new(0.5, 0.15).expect("fixed std");
                for v in &mut data {
                    *v = wide.sample(&mut rng);
                }
            }
            SynthKind::Stripes => {
                // Stripe frequency is fixed; orientation alternates by class
                // and the label also shifts the phase.
                let vertical = label % 2 == 0;
                let phase = label as f64;
                for ch in 0..c {
                    for row in 0..d {
                        for col in 0..d {
                            let t = if vertical { col } else { row } as f64;
                            let wave = 0.5 + 0.5 * (t * 1.3 + phase).sin();
                            data[ch * d * d + row * d + col] =
                                wave + noise.sample(&mut rng);
                        }
                    }
                }
            }
            SynthKind::Blobs => {
                // Blob centers sit on a circle, one position per class.
                let angle = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
                let r = d as f64 / 4.0;
                let cx = d as f64 / 2.0 + r * angle.cos();
                let cy = d as f64 / 2.0 + r * angle.sin();
                let sigma = d as f64 / 6.0;
                for ch in 0..c {
                    for row in 0..d {
                        for col in 0..d {
                            let dy = row as f64 - cy;
                            let dx = col as f64 - cx;
                            let bump = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                            data[ch * d * d + row * d + col] =
                                bump + noise.sample(&mut rng);
                        }
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        images.push(Tensor::new(vec![c, d, d], data)?);
        labels.push(label);
    }
    Dataset::new(format!("synth-{kind}"), images, labels, classes)
}
