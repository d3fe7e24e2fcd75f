//! Reader for the IDX binary format used by the MNIST distribution.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 `u8` images,
//! `0x00000801` for rank-1 `u8` labels), one big-endian `u32` per dimension,
//! then the raw bytes.

use std::path::{Path, PathBuf};

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::scalar::Real;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Canonical file names expected inside an MNIST directory.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone)]
pub struct MnistData<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            offset,
            reason: reason.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.bytes.len(), "file ends inside the header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if self.bytes.len() < end {
            return Err(self.fail(
                self.bytes.len(),
                format!("payload truncated: expected {len} bytes after header"),
            ));
        }
        if self.bytes.len() > end {
            return Err(self.fail(end, "trailing bytes after payload"));
        }
        Ok(&self.bytes[self.pos..end])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

fn check_magic(cur: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let magic = cur.u32_be()?;
    if magic != expected {
        return Err(cur.fail(0, format!("bad magic number {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Parses an image file into `(rows, cols, pixels)` with one byte per pixel.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    check_magic(&mut cur, IMAGE_MAGIC)?;
    let n = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let pixels = cur.payload(n * rows * cols)?;
    Ok((rows, cols, pixels.to_vec()))
}

/// Parses a label file into its raw label bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    check_magic(&mut cur, LABEL_MAGIC)?;
    let n = cur.u32_be()? as usize;
    Ok(cur.payload(n)?.to_vec())
}

/// Reads an image file; pixels are scaled to `[0, 1]`.
pub fn read_idx_images<T: Real>(path: &Path) -> Result<(usize, Vec<T>)> {
    let bytes = read_file(path)?;
    let (rows, cols, pixels) = parse_idx_images(&bytes, path)?;
    let scale = T::lit(255.0);
    Ok((rows * cols, pixels.into_iter().map(|p| T::from_count(p as usize) / scale).collect()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    Ok(parse_idx_labels(&bytes, path)?.into_iter().map(usize::from).collect())
}

fn load_pair<T: Real>(images: PathBuf, label_path: PathBuf) -> Result<Dataset<T>> {
    let (dim, pixels) = read_idx_images::<T>(&images)?;
    let labels = read_idx_labels(&label_path)?;
    if pixels.len() != dim * labels.len() {
        return Err(Error::Shape(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            pixels.len() / dim.max(1),
            label_path.display(),
            labels.len()
        )));
    }
    Dataset::new(dim, pixels, Targets::Classes { labels, num_classes: 10 })
}

/// Loads the four canonical MNIST IDX files from `dir`.
pub fn load_mnist<T: Real>(dir: &Path) -> Result<MnistData<T>> {
    let missing: Vec<&str> = MNIST_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(crate::error::config(format!(
            "MNIST directory {} is missing {}; expected the uncompressed IDX files {}",
            dir.display(),
            missing.join(", "),
            MNIST_FILES.join(", ")
        )));
    }
    Ok(MnistData {
        train: load_pair(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1]))?,
        test: load_pair(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3]))?,
    })
}
