//! Local dataset ingestion (IDX, CIFAR-10 binary), augmentation and batching.
//!
//! Nothing here downloads. Expected directory layout is documented in the
//! README (`<data>/mnist/*-ubyte`, `<data>/fashion-mnist/*-ubyte`,
//! `<data>/cifar-10-batches-bin/*.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, ParseError, Result};
use crate::tensor::{RngStream, Scalar, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images in `[0,1]` shaped `[n,c,h,w]` with one class id per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::dim("Dataset::new", images.shape(), &[0, 0, 0, 0]));
        }
        if images.rows() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} outside declared {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Gathers a batch, converting pixels to `T`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let imgs = self.images.select_rows(idx).cast::<T>();
        (imgs, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Seeded shuffled mini-batches for one epoch; the final partial batch is kept.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Batches<'_> {
        let order = RngStream::new(shuffle_seed).permutation(self.len());
        Batches {
            data: self,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }

    /// Batches in storage order (evaluation).
    pub fn batches_in_order(&self, batch_size: usize) -> Batches<'_> {
        Batches {
            data: self,
            order: (0..self.len()).collect(),
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Vec<(f32, f32)> {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut s, mut ss, mut n) = (0f64, 0f64, 0f64);
            for i in 0..self.len() {
                for &v in &self.images.row(i)[ch * plane..(ch + 1) * plane] {
                    s += v as f64;
                    ss += (v as f64) * (v as f64);
                    n += 1.0;
                }
            }
            let mean = if n > 0.0 { s / n } else { 0.0 };
            let var = if n > 0.0 { ss / n - mean * mean } else { 1.0 };
            out.push((mean as f32, var.max(1e-12).sqrt() as f32));
        }
        out
    }

    /// Optional per-channel standardization; the default pipeline only divides by 255.
    pub fn standardize(&mut self, stats: &[(f32, f32)]) {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        for i in 0..self.len() {
            let row = self.images.row_mut(i);
            for ch in 0..c.min(stats.len()) {
                let (m, s) = stats[ch];
                for v in &mut row[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(idx)
    }
}

impl Batches<'_> {
    pub fn dataset(&self) -> &Dataset {
        self.data
    }
}

fn parse_err(path: &Path, kind: ParseError) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        kind,
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            parse_err(
                path,
                ParseError::Truncated {
                    needed: at + 4,
                    have: bytes.len(),
                },
            )
        })
}

/// Parses an IDX image file (`0x00000803`, u8 pixels) and its label file
/// (`0x00000801`). Pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = fs::read(ip)?;
    let lb = fs::read(lp)?;

    let magic = read_u32_be(&ib, 0, ip)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(parse_err(
            ip,
            ParseError::BadMagic {
                found: magic,
                expected: IDX_IMAGE_MAGIC,
            },
        ));
    }
    let n = read_u32_be(&ib, 4, ip)? as usize;
    let rows = read_u32_be(&ib, 8, ip)? as usize;
    let cols = read_u32_be(&ib, 12, ip)? as usize;
    let needed = 16 + n * rows * cols;
    if ib.len() < needed {
        return Err(parse_err(
            ip,
            ParseError::Truncated {
                needed,
                have: ib.len(),
            },
        ));
    }

    let magic = read_u32_be(&lb, 0, lp)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(parse_err(
            lp,
            ParseError::BadMagic {
                found: magic,
                expected: IDX_LABEL_MAGIC,
            },
        ));
    }
    let nl = read_u32_be(&lb, 4, lp)? as usize;
    if lb.len() < 8 + nl {
        return Err(parse_err(
            lp,
            ParseError::Truncated {
                needed: 8 + nl,
                have: lb.len(),
            },
        ));
    }
    if nl != n {
        return Err(parse_err(
            lp,
            ParseError::CountMismatch {
                images: n,
                labels: nl,
            },
        ));
    }

    let pixels: Vec<f32> = ib[16..needed].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(Tensor::new(&[n, 1, rows, cols], pixels)?, labels, classes)
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes single-channel images and labels as IDX files.
pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Argument(format!("IDX holds 1 channel, got {c}")));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&v| to_byte(v)));
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, ib)?;
    fs::write(labels_path, lb)?;
    Ok(())
}

/// Parses one or more CIFAR-10 binary batches (3073-byte records:
/// label byte then 3072 channel-planar pixels).
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_files {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(parse_err(
                p,
                ParseError::RecordSize {
                    size: bytes.len(),
                    record: CIFAR_RECORD,
                },
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(parse_err(
                    p,
                    ParseError::Malformed(format!("label {} >= 10", rec[0])),
                ));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, labels, 10)
}

pub fn write_cifar10(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::Argument("CIFAR records are 3x32x32".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.images.row(i).iter().map(|&v| to_byte(v)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Train/test pair from a data directory.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Split {
    /// Keeps the first `train` / `test` samples of each side.
    pub fn truncate(self, train: Option<usize>, test: Option<usize>) -> Self {
        Self {
            train: train.map_or(self.train.clone(), |n| self.train.take(n)),
            test: test.map_or(self.test.clone(), |n| self.test.take(n)),
        }
    }
}

/// Known on-disk datasets under a data directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl Source {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" | "fashion_mnist" => Ok(Self::FashionMnist),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn load(self, data_dir: &Path) -> Result<Split> {
        let idx = |sub: &str| -> Result<Split> {
            let d: PathBuf = data_dir.join(sub);
            Ok(Split {
                train: load_idx(
                    d.join("train-images-idx3-ubyte"),
                    d.join("train-labels-idx1-ubyte"),
                )?,
                test: load_idx(
                    d.join("t10k-images-idx3-ubyte"),
                    d.join("t10k-labels-idx1-ubyte"),
                )?,
            })
        };
        match self {
            Self::Mnist => idx("mnist"),
            Self::FashionMnist => idx("fashion-mnist"),
            Self::Cifar10 => {
                let d = data_dir.join("cifar-10-batches-bin");
                let train: Vec<PathBuf> = (1..=5)
                    .map(|i| d.join(format!("data_batch_{i}.bin")))
                    .collect();
                Ok(Split {
                    train: load_cifar10(&train)?,
                    test: load_cifar10(&[d.join("test_batch.bin")])?,
                })
            }
        }
    }
}

/// Random-crop / horizontal-flip augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl AugmentConfig {
    /// 4 pixels for 32×32 inputs, 2 for 28×28.
    pub fn default_for(side: usize, hflip: bool, seed: u64) -> Self {
        Self {
            crop_pad: if side >= 32 { 4 } else { 2 },
            hflip,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0 && !self.hflip
    }
}

/// Mirrors each image whose mask entry is set.
pub fn hflip<T: Scalar>(batch: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = batch.clone();
    for (i, &flip) in mask.iter().enumerate() {
        if !flip {
            continue;
        }
        let row = out.row_mut(i);
        for line in row.chunks_exact_mut(w).take(c * h) {
            line.reverse();
        }
    }
    out
}

/// Zero-pads by `cfg.crop_pad`, crops back to the original size at a random
/// offset, then flips with probability 1/2 when enabled. Shape and sample
/// order are preserved.
pub fn augment<T: Scalar>(
    batch: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Tensor<T> {
    if cfg.is_identity() {
        return batch.clone();
    }
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = cfg.crop_pad;
    let mut out = Tensor::zeros(s);
    for i in 0..n {
        let dy = if p > 0 { rng.below(2 * p + 1) } else { p };
        let dx = if p > 0 { rng.below(2 * p + 1) } else { p };
        let src = batch.row(i);
        let dst = out.row_mut(i);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx as isize - p as isize;
                    if sx >= 0 && sx < w as isize {
                        dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    if cfg.hflip {
        let mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        out = hflip(&out, &mask);
    }
    out
}
