//! In-memory labelled image sets and the IDX reader for MNIST.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::MapBatch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Single-map images with integer labels; image `n` occupies
/// `images[n * w * h..(n + 1) * w * h]` in row-major `(x, y)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    width: usize,
    height: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(width: usize, height: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != width * height * labels.len() {
            return Err(Error::dim(format!(
                "{} labels need {} pixels of {}x{} images, got {}",
                labels.len(),
                labels.len() * width * height,
                width,
                height,
                images.len()
            )));
        }
        Ok(Dataset {
            width,
            height,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, n: usize) -> &[f32] {
        let p = self.width * self.height;
        &self.images[n * p..(n + 1) * p]
    }

    /// Batch of the given examples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (MapBatch, Vec<u8>) {
        let p = self.width * self.height;
        let mut data = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            data.extend_from_slice(self.image(n));
            labels.push(self.labels[n]);
        }
        let batch = MapBatch::from_vec(1, indices.len(), self.width, self.height, data)
            .expect("batch shape");
        (batch, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let p = self.width * self.height;
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            images.extend_from_slice(self.image(n));
            labels.push(self.labels[n]);
        }
        Dataset {
            width: self.width,
            height: self.height,
            images,
            labels,
        }
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Random disjoint halves whose sizes differ by at most one.
    pub fn split_halves(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(Error::input(format!(
                "need at least 2 examples to split, got {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = idx.split_at(self.len() / 2);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a), self.subset(&b)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "{} truncated: need {} bytes, {} remain",
                    self.what,
                    n,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expect: u32) -> Result<()> {
        let m = self.u32_be()?;
        if m != expect {
            return Err(Error::format(
                0,
                format!("{}: bad magic 0x{:08x}, expected 0x{:08x}", self.what, m, expect),
            ));
        }
        Ok(())
    }
}

/// Parse IDX image bytes into `(rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "image file",
    };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let raw = r.take(count * rows * cols)?;
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "image file has trailing bytes"));
    }
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "label file",
    };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_be()? as usize;
    let start = r.pos;
    let raw = r.take(count)?.to_vec();
    if let Some(bad) = raw.iter().position(|&l| l > 9) {
        return Err(Error::format(
            (start + bad) as u64,
            format!("label {} outside 0-9", raw[bad]),
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "label file has trailing bytes"));
    }
    Ok(raw)
}

/// Load an IDX image/label file pair.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img = fs::read(images_path.as_ref())?;
    let lab = fs::read(labels_path.as_ref())?;
    let (count, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != count {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", count, labels.len()),
        ));
    }
    Dataset::new(rows, cols, pixels, labels)
}
