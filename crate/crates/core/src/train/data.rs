//! Image datasets: CIFAR-10 binary batches, IDX files and a synthetic
//! CIFAR-format task.
//!
//! Pixels stay as bytes in `[n, c, h, w]` order and are normalized per
//! channel when a batch is assembled.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Environment variable naming the root for relative dataset paths.
pub const DATA_ENV: &str = "BITCTX_DATA";

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const IDX_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

/// Per-channel mean and standard deviation in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Random crop after zero padding plus horizontal flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

impl Dataset {
    pub fn new(shape: (usize, usize, usize), classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let (channels, height, width) = shape;
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixel bytes for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.channels * self.height * self.width;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Self {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn normalization(&self) -> Normalization {
        let hw = self.height * self.width;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.pixels.chunks_exact(self.channels * hw) {
            for (ch, plane) in img.chunks_exact(hw).enumerate() {
                for &p in plane {
                    mean[ch] += p as f64;
                    sq[ch] += (p as f64) * (p as f64);
                }
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1.0)
            })
            .collect();
        Normalization { mean, std }
    }

    /// Normalized `[idx.len(), c, h, w]` batch with its labels. With `aug`,
    /// each image is padded, randomly cropped and possibly flipped.
    pub fn batch(
        &self,
        idx: &[usize],
        norm: &Normalization,
        aug: Option<(Augment, &mut ChaCha8Rng)>,
    ) -> (RealTensor, Vec<usize>) {
        let (c, h, w) = self.shape();
        let mut data = vec![0.0; idx.len() * c * h * w];
        let mut aug = aug;
        for (b, &i) in idx.iter().enumerate() {
            let img = self.image(i);
            let (dy, dx, flip) = match aug.as_mut() {
                Some((a, rng)) => {
                    let p = a.pad as isize;
                    let dy = rng.gen_range(-p..=p);
                    let dx = rng.gen_range(-p..=p);
                    (dy, dx, a.flip && rng.gen_bool(0.5))
                }
                None => (0, 0, false),
            };
            let out = &mut data[b * c * h * w..(b + 1) * c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let p = img[(ch * h + sy as usize) * w + sx as usize] as f64;
                        out[(ch * h + y) * w + x] = (p - norm.mean[ch]) / norm.std[ch];
                    }
                }
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (RealTensor::new([idx.len(), c, h, w], data).expect("batch shape"), labels)
    }

    /// Adapts images to `channels` and a square `resolution` by repeating a
    /// single channel and zero padding around the center.
    pub fn fit(&self, channels: usize, resolution: usize) -> Result<Self> {
        let (c, h, w) = self.shape();
        if (c, h, w) == (channels, resolution, resolution) {
            return Ok(self.clone());
        }
        if (c != channels && c != 1) || h > resolution || w > resolution {
            return Err(Error::Dataset(format!(
                "cannot fit {c}x{h}x{w} images to {channels}x{resolution}x{resolution}"
            )));
        }
        let (oy, ox) = ((resolution - h) / 2, (resolution - w) / 2);
        let per = channels * resolution * resolution;
        let mut pixels = vec![0u8; self.len() * per];
        for i in 0..self.len() {
            let img = self.image(i);
            let out = &mut pixels[i * per..(i + 1) * per];
            for ch in 0..channels {
                let src = if c == 1 { 0 } else { ch };
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * resolution + y + oy) * resolution + x + ox] = img[(src * h + y) * w + x];
                    }
                }
            }
        }
        Dataset::new((channels, resolution, resolution), self.classes, pixels, self.labels.clone())
    }
}

/// Train and test splits of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

// CIFAR-10 binary batches

pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte CIFAR records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for r in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(r[0] as usize);
        pixels.extend_from_slice(&r[1..]);
    }
    Dataset::new((3, CIFAR_SIDE, CIFAR_SIDE), 10, pixels, labels)
}

pub fn cifar_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.shape() != (3, CIFAR_SIDE, CIFAR_SIDE) || ds.classes > 256 {
        return Err(Error::Dataset(format!("{:?} images are not CIFAR-shaped", ds.shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

// IDX

fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("not an IDX file (bad magic)".into()));
    }
    if bytes[2] != IDX_U8 {
        return Err(Error::Dataset(format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[header..];
    if body.len() != dims.iter().product::<usize>() {
        return Err(Error::Dataset(format!("IDX dims {dims:?} do not match {} data bytes", body.len())));
    }
    Ok((dims, body))
}

/// Images `[n, h, w]` (one channel) or `[n, c, h, w]` plus labels `[n]`.
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images)?;
    let (ldims, lab) = parse_idx(labels)?;
    let shape = match idims[..] {
        [_, h, w] => (1, h, w),
        [_, c, h, w] => (c, h, w),
        _ => return Err(Error::Dataset(format!("IDX images must be 3-D or 4-D, got {idims:?}"))),
    };
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(Error::Dataset(format!("IDX labels {ldims:?} do not match images {idims:?}")));
    }
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(shape, classes, pixels.to_vec(), labels)
}

pub fn idx_bytes(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (c, h, w) = ds.shape();
    let dims: Vec<usize> = if c == 1 { vec![ds.len(), h, w] } else { vec![ds.len(), c, h, w] };
    let header = |dims: &[usize]| {
        let mut b = vec![0, 0, IDX_U8, dims.len() as u8];
        for &d in dims {
            b.extend_from_slice(&(d as u32).to_be_bytes());
        }
        b
    };
    let mut images = header(&dims);
    images.extend_from_slice(&ds.pixels);
    let mut labels = header(&[ds.len()]);
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    (images, labels)
}

// directory detection

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut first = it.next().ok_or_else(|| Error::Dataset("no data files".into()))?;
    for d in it {
        if d.shape() != first.shape() {
            return Err(Error::Dataset("data files disagree on image shape".into()));
        }
        first.classes = first.classes.max(d.classes);
        first.pixels.extend(d.pixels);
        first.labels.extend(d.labels);
    }
    Ok(first)
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        v.push((e.file_name().to_string_lossy().into_owned(), e.path()));
    }
    v.sort();
    Ok(v)
}

/// Loads a dataset directory, detecting CIFAR-10 binary batches
/// (`data_batch_*.bin`, `test_batch.bin`, possibly inside
/// `cifar-10-batches-bin/`) or IDX pairs (`train-images*`, `train-labels*`,
/// `t10k-images*`/`test-images*`, `t10k-labels*`/`test-labels*`).
pub fn load_dir(dir: &Path) -> Result<Split> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let entries = sorted_entries(&dir)?;
    let name = dir.display().to_string();
    let find = |pred: &dyn Fn(&str) -> bool| entries.iter().filter(|(n, _)| pred(n)).map(|(_, p)| p.clone()).collect::<Vec<_>>();

    let train_batches = find(&|n| n.starts_with("data_batch") && n.ends_with(".bin"));
    let test_batches = find(&|n| n == "test_batch.bin");
    if !train_batches.is_empty() && !test_batches.is_empty() {
        let load = |ps: Vec<PathBuf>| -> Result<Dataset> {
            concat(ps.iter().map(|p| parse_cifar(&read(p)?)).collect::<Result<_>>()?)
        };
        return Ok(Split {
            name,
            train: load(train_batches)?,
            test: load(test_batches)?,
        });
    }

    let pick = |prefixes: &[&str], kind: &str| {
        find(&|n| prefixes.iter().any(|p| n.starts_with(p)) && n.contains(kind)).into_iter().next()
    };
    let ti = pick(&["train"], "images");
    let tl = pick(&["train"], "labels");
    let vi = pick(&["t10k", "test"], "images");
    let vl = pick(&["t10k", "test"], "labels");
    if let (Some(ti), Some(tl), Some(vi), Some(vl)) = (ti, tl, vi, vl) {
        return Ok(Split {
            name,
            train: parse_idx_pair(&read(&ti)?, &read(&tl)?)?,
            test: parse_idx_pair(&read(&vi)?, &read(&vl)?)?,
        });
    }
    Err(Error::Dataset(format!(
        "no CIFAR-10 batches or IDX pairs found in {}",
        dir.display()
    )))
}

/// Writes a split as CIFAR-10 binary batches (`data_batch_1.bin`,
/// `test_batch.bin`).
pub fn write_cifar_dir(split: &Split, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, ds) in [("data_batch_1.bin", &split.train), ("test_batch.bin", &split.test)] {
        let p = dir.join(file);
        std::fs::write(&p, cifar_bytes(ds)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Resolves a dataset id: `synthetic:<train>[:<seed>]` generates the
/// synthetic task in memory; anything else is a directory, taken relative to
/// `$BITCTX_DATA` when that is set and the path is relative.
pub fn open(id: &str) -> Result<Split> {
    if let Some(rest) = id.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let bad = || Error::Dataset(format!("malformed synthetic dataset id `{id}`"));
        let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let seed: u64 = match parts.next() {
            Some(s) => s.parse().map_err(|_| bad())?,
            None => SYNTHETIC_SEED,
        };
        if parts.next().is_some() || n == 0 {
            return Err(bad());
        }
        return Ok(synthetic(n, (n / 5).max(10), seed));
    }
    let mut path = PathBuf::from(id);
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_ENV) {
            path = PathBuf::from(root).join(path);
        }
    }
    if !path.exists() {
        return Err(Error::Dataset(format!("dataset `{}` not found", path.display())));
    }
    load_dir(&path)
}

// synthetic task

/// Data seed used when a synthetic id does not name one. Fixed so that
/// training seeds vary only the model and the batch order.
pub const SYNTHETIC_SEED: u64 = 0x5EED_DA7A;

const GLYPH: usize = 7;

fn glyph(shape: usize, y: usize, x: usize) -> bool {
    let (cy, cx) = (y as isize - 3, x as isize - 3);
    match shape {
        0 => true,
        1 => y == 0 || x == 0 || y == GLYPH - 1 || x == GLYPH - 1,
        2 => cy.abs() <= 0 || cx.abs() <= 0,
        3 => cy.abs() == cx.abs(),
        _ => cy.abs() + cx.abs() <= 3,
    }
}

/// Ten classes: five glyph shapes times two arrangements. Every image holds
/// two copies of one glyph 10 to 22 pixels apart, side by side (even
/// labels) or stacked (odd labels), over a noisy background. Telling the
/// arrangements apart needs features spanning both glyphs.
pub fn synthetic_dataset(n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let side = CIFAR_SIDE;
    let per = 3 * side * side;
    let mut pixels = vec![0u8; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let (shape, vertical) = (label / 2, label % 2 == 1);
        let img = &mut pixels[i * per..(i + 1) * per];
        let base: [u8; 3] = [rng.gen_range(30..110), rng.gen_range(30..110), rng.gen_range(30..110)];
        for ch in 0..3 {
            for p in &mut img[ch * side * side..(ch + 1) * side * side] {
                *p = base[ch].saturating_add(rng.gen_range(0..40));
            }
        }
        let color: [u8; 3] = [rng.gen_range(140..=255), rng.gen_range(140..=255), rng.gen_range(140..=255)];
        let gap = rng.gen_range(10..=22);
        let jitter = rng.gen_range(-2isize..=2);
        let span = side - GLYPH;
        // top-left corners of the two glyphs
        let (along, across) = (rng.gen_range(0..=span - gap), rng.gen_range(2..=span - 2));
        let (a, b) = if vertical {
            ((along, across), (along + gap, (across as isize + jitter) as usize))
        } else {
            ((across, along), ((across as isize + jitter) as usize, along + gap))
        };
        for (oy, ox) in [a, b] {
            for y in 0..GLYPH {
                for x in 0..GLYPH {
                    if glyph(shape, y, x) {
                        for ch in 0..3 {
                            img[(ch * side + oy + y) * side + ox + x] = color[ch];
                        }
                    }
                }
            }
        }
        labels.push(label);
    }
    // interleaved classes, then shuffled so prefixes stay balanced
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut shuffled = Vec::with_capacity(pixels.len());
    for &i in &order {
        shuffled.extend_from_slice(&pixels[i * per..(i + 1) * per]);
    }
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new((3, side, side), 10, shuffled, labels).expect("synthetic shape")
}

pub fn synthetic(train: usize, test: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Split {
        name: format!("synthetic:{train}:{seed}"),
        train: synthetic_dataset(train, &mut rng),
        test: synthetic_dataset(test, &mut rng),
    }
}
