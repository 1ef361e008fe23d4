//! IDX (MNIST-style) image and label files.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for `N×rows×cols` unsigned
//! byte images, `0x00000801` for `N` unsigned byte labels), one big-endian
//! `u32` per dimension, then the raw bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use d2r_core::{Dataset, Tensor};
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DEFAULT_PER_CLASS_LIMIT: usize = 100;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("images file holds {images} items but labels file holds {labels}")]
    DimensionMismatch { images: usize, labels: usize },
    #[error("{0}")]
    Dataset(#[from] d2r_core::Error),
}

pub type Result<T> = std::result::Result<T, IdxError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the magic and `dims` sizes, returning them with the header length.
fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, usize)> {
    let header_len = 4 * (1 + dims);
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    if word(0) != magic {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: word(0),
        });
    }
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(((1..=dims).map(|i| word(i) as usize).collect(), header_len))
}

fn payload<'a>(bytes: &'a [u8], path: &Path, start: usize, len: usize) -> Result<&'a [u8]> {
    let expected = start + len;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[start..expected])
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let (dims, start) = header(bytes, path, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = payload(bytes, path, start, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let (dims, start) = header(bytes, path, LABELS_MAGIC, 1)?;
    Ok(payload(bytes, path, start, dims[0])?.to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    parse_images(&read(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&read(path)?, path)
}

/// Loads the first `per_class_limit` samples of every class, in file order,
/// with pixels scaled into `[0, 1]` by `/255`. The class count is one more
/// than the largest label in the labels file.
pub fn load_idx_subset(images_path: &Path, labels_path: &Path, per_class_limit: usize) -> Result<Dataset> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(IdxError::DimensionMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let class_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let dim = images.rows * images.cols;
    let mut taken: BTreeMap<u8, usize> = BTreeMap::new();
    let mut data = Vec::new();
    let mut kept = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let n = taken.entry(label).or_insert(0);
        if *n >= per_class_limit {
            continue;
        }
        *n += 1;
        data.extend(images.pixels[i * dim..(i + 1) * dim].iter().map(|&p| f64::from(p) / 255.0));
        kept.push(label as usize);
    }
    let features = Tensor::new(vec![kept.len(), dim], data)?;
    Ok(Dataset::new(features, kept, class_count)?)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes `dataset` as an IDX pair, quantizing features to bytes. The
/// feature width must equal `rows * cols` and labels must fit in a byte.
pub fn write_dataset(dataset: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> io::Result<()> {
    if rows * cols != dataset.dim() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{rows}x{cols} images cannot hold {} features", dataset.dim()),
        ));
    }
    let labels: Vec<u8> = dataset
        .labels()
        .iter()
        .map(|&l| u8::try_from(l))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "labels must fit in a byte"))?;
    let pixels = dataset
        .features()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let images = IdxImages {
        count: dataset.len(),
        rows,
        cols,
        pixels,
    };
    fs::write(images_path, encode_images(&images))?;
    fs::write(labels_path, encode_labels(&labels))
}
