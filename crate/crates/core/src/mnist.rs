//! MNIST IDX ingestion and the dataset partitions used by the experiments.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IDX parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("digit {digit} has {available} images, {requested} requested")]
    InsufficientImages {
        digit: u8,
        available: usize,
        requested: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(offset: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        message: message.into(),
    }
}

/// A 28×28 grayscale digit, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
    label: u8,
}

impl Image {
    pub fn new(pixels: Vec<f64>, label: u8) -> Result<Self, DataError> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(DataError::InvalidImage(format!(
                "expected {IMAGE_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::InvalidImage(format!("intensity {p} outside [0, 1]")));
        }
        if label > 9 {
            return Err(DataError::InvalidImage(format!("label {label} is not a digit")));
        }
        Ok(Self { pixels, label })
    }

    pub fn from_bytes(bytes: &[u8], label: u8) -> Result<Self, DataError> {
        Self::new(bytes.iter().map(|&b| f64::from(b) / 255.0).collect(), label)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// Nearest 8-bit quantization of each intensity.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(offset, "stream ends inside the header"))
}

/// Parses an IDX image stream (magic 2051) and label stream (magic 2049).
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<Image>, DataError> {
    let magic = read_u32(image_bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(parse_err(0, format!("image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = read_u32(image_bytes, 4)? as usize;
    let rows = read_u32(image_bytes, 8)? as usize;
    let cols = read_u32(image_bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(parse_err(8, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let label_magic = read_u32(label_bytes, 0)?;
    if label_magic != LABEL_MAGIC {
        return Err(parse_err(
            0,
            format!("label magic {label_magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let label_count = read_u32(label_bytes, 4)? as usize;
    if label_count != count {
        return Err(parse_err(
            4,
            format!("{count} images but {label_count} labels"),
        ));
    }
    let pixel_start = 16;
    let needed = pixel_start + count * IMAGE_PIXELS;
    if image_bytes.len() < needed {
        return Err(parse_err(
            image_bytes.len(),
            format!("image stream truncated: {needed} bytes needed"),
        ));
    }
    if label_bytes.len() < 8 + count {
        return Err(parse_err(
            label_bytes.len(),
            format!("label stream truncated: {} bytes needed", 8 + count),
        ));
    }
    let labels = &label_bytes[8..8 + count];
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(parse_err(8 + pos, format!("label {} is not a digit", labels[pos])));
    }
    image_bytes[pixel_start..needed]
        .chunks_exact(IMAGE_PIXELS)
        .zip(labels)
        .map(|(px, &label)| Image::from_bytes(px, label))
        .collect()
}

/// Serializes images back to an (image, label) IDX pair.
pub fn to_idx(images: &[Image]) -> (Vec<u8>, Vec<u8>) {
    let n = images.len() as u32;
    let mut img = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + images.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for im in images {
        img.extend(im.to_bytes());
        lab.push(im.label);
    }
    (img, lab)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Image>, DataError> {
    parse_idx(&read_file(images_path)?, &read_file(labels_path)?)
}

pub fn write_idx(images: &[Image], images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let (img, lab) = to_idx(images);
    for (path, bytes) in [(images_path, img), (labels_path, lab)] {
        std::fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// SHA-256 over labels and 8-bit pixels, in order.
pub fn dataset_id(images: &[Image]) -> String {
    let mut h = Sha256::new();
    h.update((images.len() as u64).to_le_bytes());
    for im in images {
        h.update([im.label]);
        h.update(im.to_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    /// Digit removed from the training half, if any.
    pub held_out: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
    pub descriptor: SplitDescriptor,
}

impl DatasetSplit {
    pub fn test_digit(&self, digit: u8) -> Vec<Image> {
        select_digit(&self.test, digit)
    }
}

/// Removes `held_out` from the training images; the test half is kept whole.
pub fn partition(all_train: Vec<Image>, all_test: Vec<Image>, held_out: Option<u8>) -> DatasetSplit {
    let train = match held_out {
        Some(d) => all_train.into_iter().filter(|im| im.label != d).collect(),
        None => all_train,
    };
    DatasetSplit {
        train,
        test: all_test,
        descriptor: SplitDescriptor { held_out },
    }
}

pub fn select_digit(images: &[Image], digit: u8) -> Vec<Image> {
    images.iter().filter(|im| im.label == digit).cloned().collect()
}

/// `per_digit` images of every digit, drawn uniformly without replacement.
///
/// Output is grouped by digit (0 first); within a digit, images appear in draw order.
pub fn mini_mnist(all_train: &[Image], per_digit: usize, seed: u64) -> Result<Vec<Image>, DataError> {
    if per_digit == 0 {
        return Err(DataError::InvalidArgument("per_digit must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_digit * 10);
    for digit in 0..10u8 {
        let pool: Vec<usize> = (0..all_train.len())
            .filter(|&i| all_train[i].label == digit)
            .collect();
        if pool.len() < per_digit {
            return Err(DataError::InsufficientImages {
                digit,
                available: pool.len(),
                requested: per_digit,
            });
        }
        for pick in index::sample(&mut rng, pool.len(), per_digit) {
            out.push(all_train[pool[pick]].clone());
        }
    }
    Ok(out)
}

/// The first `n` images after a seeded shuffle; all of them when `n >= len`.
pub fn subset(images: &[Image], n: usize, seed: u64) -> Vec<Image> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n);
    order.into_iter().map(|i| images[i].clone()).collect()
}

/// Holdout split whose training half is optionally cut to `n` images by [`subset`].
pub fn holdout_subset(
    all_train: Vec<Image>,
    all_test: Vec<Image>,
    held_out: Option<u8>,
    n: Option<usize>,
    seed: u64,
) -> DatasetSplit {
    let mut split = partition(all_train, all_test, held_out);
    if let Some(n) = n {
        split.train = subset(&split.train, n, seed);
    }
    split
}
