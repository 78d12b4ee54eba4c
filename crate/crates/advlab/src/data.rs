//! Dataset loading and batching.
//!
//! Corpora ship as IDX files (big-endian header, raw payload), possibly
//! gzip-compressed; the loader keys on the `.gz` extension. Pixels are
//! normalized to [0, 1] by dividing by 255 and images are resized from
//! 28×28 to 32×32 with corner-aligned bilinear interpolation before
//! they enter a [`Dataset`].

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Refuse image headers describing more pixels than this; anything real
/// in this project is under 50M.
const MAX_PIXELS: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("file ends mid-{what}")]
    Truncated { what: &'static str },
    #[error("header describes {count} x {rows} x {cols} pixels, refusing")]
    DimensionOverflow { count: u32, rows: u32, cols: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty (or too small to split)")]
    EmptyDataset,
    #[error("class {class} has only {available} examples, need {wanted}")]
    ClassExhausted { class: u8, wanted: usize, available: usize },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("resize needs at least a 2x2 source, got {rows}x{cols}")]
    SourceTooSmall { rows: usize, cols: usize },
    #[error("no file at {path} (also tried {path}.gz)", path = .path.display())]
    MissingFile { path: PathBuf },
    #[error("pixel count {len} does not match {count} x {side}x{side} images")]
    PixelCountMismatch { len: usize, count: usize, side: usize },
    #[error("standard corpora have train and test files; derive val with split_train_val")]
    NoValFiles,
    #[error("unknown corpus {got:?}, expected mnist or fashion")]
    UnknownCorpus { got: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corpus {
    Mnist,
    Fashion,
}

impl std::fmt::Display for Corpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Corpus::Mnist => "mnist",
            Corpus::Fashion => "fashion",
        })
    }
}

impl std::str::FromStr for Corpus {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "mnist" => Ok(Corpus::Mnist),
            "fashion" => Ok(Corpus::Fashion),
            other => Err(DataError::UnknownCorpus {
                got: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Raw decoded IDX image file, pixels still u8 at source resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub(crate) fn read_be_u32(r: &mut impl Read, what: &'static str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DataError::Truncated { what }
        } else {
            DataError::Io(e)
        }
    })?;
    Ok(u32::from_be_bytes(buf))
}

pub(crate) fn read_payload(
    r: &mut impl Read,
    len: usize,
    what: &'static str,
) -> Result<Vec<u8>, DataError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DataError::Truncated { what }
        } else {
            DataError::Io(e)
        }
    })?;
    Ok(buf)
}

pub fn read_idx_images_from(mut r: impl Read) -> Result<RawImages, DataError> {
    let magic = read_be_u32(&mut r, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let count = read_be_u32(&mut r, "image count")?;
    let rows = read_be_u32(&mut r, "image rows")?;
    let cols = read_be_u32(&mut r, "image cols")?;
    let total = (count as usize)
        .checked_mul(rows as usize)
        .and_then(|v| v.checked_mul(cols as usize))
        .filter(|&v| v <= MAX_PIXELS)
        .ok_or(DataError::DimensionOverflow { count, rows, cols })?;
    let pixels = read_payload(&mut r, total, "image payload")?;
    Ok(RawImages {
        count: count as usize,
        rows: rows as usize,
        cols: cols as usize,
        pixels,
    })
}

pub fn read_idx_labels_from(mut r: impl Read) -> Result<Vec<u8>, DataError> {
    let magic = read_be_u32(&mut r, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let count = read_be_u32(&mut r, "label count")? as usize;
    read_payload(&mut r, count, "label payload")
}

/// Serialize back to IDX bytes; reading then writing reproduces the
/// source payload exactly.
pub fn images_to_idx_bytes(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn labels_to_idx_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Open `path`, or `path.gz` with transparent decompression.
fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, DataError> {
    if path.extension().is_some_and(|e| e == "gz") {
        return Ok(Box::new(GzDecoder::new(File::open(path)?)));
    }
    if path.exists() {
        return Ok(Box::new(File::open(path)?));
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    if gz.exists() {
        return Ok(Box::new(GzDecoder::new(File::open(gz)?)));
    }
    Err(DataError::MissingFile {
        path: path.to_path_buf(),
    })
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<RawImages, DataError> {
    read_idx_images_from(open_maybe_gz(path.as_ref())?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, DataError> {
    read_idx_labels_from(open_maybe_gz(path.as_ref())?)
}

/// Map a byte image to [0, 1].
pub fn normalize(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Corner-aligned bilinear resample: output corners land exactly on
/// input corners, interior points interpolate between the four
/// surrounding pixels.
pub fn bilinear_resize(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f32>, DataError> {
    if in_h < 2 || in_w < 2 {
        return Err(DataError::SourceTooSmall {
            rows: in_h,
            cols: in_w,
        });
    }
    assert_eq!(src.len(), in_h * in_w, "source length matches dims");
    let coord = |i: usize, out: usize, inn: usize| -> f64 {
        if out == 1 {
            0.0
        } else {
            i as f64 * (inn - 1) as f64 / (out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let sy = coord(i, out_h, in_h);
        let y0 = (sy.floor() as usize).min(in_h - 2);
        let dy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = coord(j, out_w, in_w);
            let x0 = (sx.floor() as usize).min(in_w - 2);
            let dx = sx - x0 as f64;
            let p00 = src[y0 * in_w + x0] as f64;
            let p01 = src[y0 * in_w + x0 + 1] as f64;
            let p10 = src[(y0 + 1) * in_w + x0] as f64;
            let p11 = src[(y0 + 1) * in_w + x0 + 1] as f64;
            let top = p00 + (p01 - p00) * dx;
            let bot = p10 + (p11 - p10) * dx;
            out.push((top + (bot - top) * dy) as f32);
        }
    }
    Ok(out)
}

/// Normalized images ready for the models: shape [N, 1, 32, 32] in
/// [0, 1], with aligned labels and provenance tags.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub source: Corpus,
}

impl Dataset {
    pub fn from_parts(
        images: Tensor<f32>,
        labels: Vec<u8>,
        split: Split,
        source: Corpus,
    ) -> Result<Dataset, DataError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(DataError::PixelCountMismatch {
                len: images.numel(),
                count: labels.len(),
                side: 32,
            });
        }
        if shape[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(Dataset {
            images,
            labels,
            split,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copy of one image's pixels.
    pub fn image(&self, i: usize) -> Vec<f32> {
        let px = self.side() * self.side();
        self.images.data()[i * px..(i + 1) * px].to_vec()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let side = self.side();
        let px = side * side;
        let data = self.images.data();
        let mut pixels = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(&data[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        drop(data);
        let images = Tensor::from_vec(pixels, &[indices.len(), 1, side, side])
            .expect("gathered pixel count matches");
        Dataset::from_parts(images, labels, self.split, self.source)
    }

    /// Per-class example counts, indexed by label value.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

fn file_pair(corpus: Corpus, split: Split) -> Result<(&'static str, &'static str), DataError> {
    let _ = corpus;
    match split {
        Split::Train => Ok(("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        Split::Test => Ok(("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
        Split::Val => Err(DataError::NoValFiles),
    }
}

/// Load a standard corpus split from `data_dir/<corpus>/`, normalize,
/// and resize to 32×32.
pub fn load_standard(
    data_dir: impl AsRef<Path>,
    corpus: Corpus,
    split: Split,
) -> Result<Dataset, DataError> {
    let (img_name, lbl_name) = file_pair(corpus, split)?;
    let dir = data_dir.as_ref().join(corpus.to_string());
    let raw = read_idx_images(dir.join(img_name))?;
    let labels = read_idx_labels(dir.join(lbl_name))?;
    if raw.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: raw.count,
            labels: labels.len(),
        });
    }
    if raw.count == 0 {
        return Err(DataError::EmptyDataset);
    }
    let side = 32;
    let in_px = raw.rows * raw.cols;
    let out_px = side * side;
    let mut pixels = Vec::with_capacity(raw.count * out_px);
    for i in 0..raw.count {
        let img = normalize(&raw.pixels[i * in_px..(i + 1) * in_px]);
        pixels.extend(bilinear_resize(&img, raw.rows, raw.cols, side, side)?);
    }
    let images =
        Tensor::from_vec(pixels, &[raw.count, 1, side, side]).expect("resized count matches");
    Dataset::from_parts(images, labels, split, corpus)
}

/// Split off a validation set of floor(n/6) examples after a seeded
/// shuffle: 60,000 becomes 50,000 + 10,000, and 10,000 becomes
/// 8,334 + 1,666.
pub fn split_train_val(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = ds.len();
    let val_n = n / 6;
    if val_n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let (train_idx, val_idx) = order.split_at(n - val_n);
    let mut train = ds.gather(train_idx)?;
    train.split = Split::Train;
    let mut val = ds.gather(val_idx)?;
    val.split = Split::Val;
    Ok((train, val))
}

/// A class-balanced prefix: `total` examples spread as evenly as the
/// class count allows (lower class ids absorb the remainder), taking
/// each class's earliest examples and keeping source order.
pub fn subset_stratified(
    ds: &Dataset,
    total: usize,
    classes: usize,
) -> Result<Dataset, DataError> {
    let base = total / classes;
    let extra = total % classes;
    let wanted: Vec<usize> = (0..classes)
        .map(|c| base + usize::from(c < extra))
        .collect();
    let mut taken = vec![0usize; classes];
    let mut indices = Vec::with_capacity(total);
    for (i, &label) in ds.labels.iter().enumerate() {
        let c = label as usize;
        if c < classes && taken[c] < wanted[c] {
            taken[c] += 1;
            indices.push(i);
        }
    }
    for c in 0..classes {
        if taken[c] < wanted[c] {
            return Err(DataError::ClassExhausted {
                class: c as u8,
                wanted: wanted[c],
                available: taken[c],
            });
        }
    }
    ds.gather(&indices)
}

/// One training batch: images stacked [B, 1, side, side], labels and
/// source-row indices aligned.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let part = self.ds.gather(&indices).expect("indices are in range");
        Some(Batch {
            images: part.images,
            labels: part.labels,
            indices,
        })
    }
}

/// Seeded permutation of 0..n, shared by every shuffling consumer.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SHUFFLE));
    order
}

/// Iterate the dataset once in a seeded shuffled order. The final
/// partial batch is yielded, so every example appears exactly once.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIterator<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    Ok(BatchIterator {
        ds,
        order: shuffled_order(ds.len(), seed),
        pos: 0,
        batch_size,
    })
}
