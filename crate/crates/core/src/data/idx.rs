//! Reader and writer for the big-endian IDX container used by MNIST.
//!
//! Header layout: two zero bytes, a type byte (`0x08` = unsigned byte), the
//! number of dimensions, then one big-endian `u32` per dimension. The payload
//! follows, row-major.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array3;

use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Number of label classes in MNIST.
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    /// `count × rows × cols` pixel intensities.
    Images(Array3<u8>),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0).map_err(|_| Error::Format("file shorter than the magic number".into()))?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "unsupported magic number {other:#010x} (expected {IMAGES_MAGIC:#010x} or {LABELS_MAGIC:#010x})"
            )))
        }
    };
    let dims = (0..ndims)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dimensions {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after a payload of {expected}",
            payload.len() - expected
        )));
    }
    Ok(match ndims {
        3 => IdxData::Images(
            Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload.to_vec())
                .expect("payload length checked"),
        ),
        _ => IdxData::Labels(payload.to_vec()),
    })
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn encode_images(images: &Array3<u8>) -> Vec<u8> {
    let (n, rows, cols) = images.dim();
    let mut out = header(IMAGES_MAGIC, &[n, rows, cols]);
    out.extend(images.iter());
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = header(LABELS_MAGIC, &[labels.len()]);
    out.extend_from_slice(labels);
    out
}

/// Read a raw or gzip-compressed IDX file. Compression is detected from the
/// gzip magic bytes, not the file name.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Images with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    images: Array3<u8>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(images: Array3<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        Ok(ImageSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.images.dim().1
    }

    pub fn cols(&self) -> usize {
        self.images.dim().2
    }

    pub fn pixels(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn images(&self) -> &Array3<u8> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Row-major pixels of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let px = self.pixels();
        &self.images.as_slice().expect("standard layout")[i * px..(i + 1) * px]
    }
}

const CANONICAL: [(&str, &str); 4] = [
    ("train-images", "idx3-ubyte"),
    ("train-labels", "idx1-ubyte"),
    ("t10k-images", "idx3-ubyte"),
    ("t10k-labels", "idx1-ubyte"),
];

/// Locate a canonical MNIST file in `dir`, accepting both `-` and `.`
/// before the IDX suffix and an optional `.gz` extension.
fn find_file(dir: &Path, stem: &str, suffix: &str) -> Option<PathBuf> {
    ["-", "."]
        .iter()
        .flat_map(|sep| {
            let base = format!("{stem}{sep}{suffix}");
            [format!("{base}.gz"), base]
        })
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

/// Names of canonical MNIST files missing from `dir`.
pub fn missing_mnist_files(dir: &Path) -> Vec<String> {
    CANONICAL
        .iter()
        .filter(|(stem, suffix)| find_file(dir, stem, suffix).is_none())
        .map(|(stem, suffix)| format!("{stem}-{suffix}[.gz]"))
        .collect()
}

/// Load `(train, test)` from the four canonical MNIST files.
pub fn load_mnist(dir: &Path) -> Result<(ImageSet, ImageSet)> {
    let missing = missing_mnist_files(dir);
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "MNIST files not found in {}: {}. Download the four IDX files \
             (train/t10k images and labels, raw or .gz) into that directory.",
            dir.display(),
            missing.join(", ")
        )));
    }
    let load = |stem: &str, suffix: &str| {
        let path = find_file(dir, stem, suffix).expect("presence checked");
        read_idx_file(&path)
    };
    let pair = |images: IdxData, labels: IdxData| match (images, labels) {
        (IdxData::Images(i), IdxData::Labels(l)) => ImageSet::new(i, l),
        _ => Err(Error::Format("image/label files swapped or mislabelled".into())),
    };
    let train = pair(load("train-images", "idx3-ubyte")?, load("train-labels", "idx1-ubyte")?)?;
    let test = pair(load("t10k-images", "idx3-ubyte")?, load("t10k-labels", "idx1-ubyte")?)?;
    Ok((train, test))
}
