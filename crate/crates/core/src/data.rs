//! Datasets: IDX ingestion, synthetic corpora, and the batching helpers
//! the training loops lean on.
//!
//! The desk-scale image corpus is a generated set of noisy 16x16 digit
//! glyphs written to disk in IDX format and read back through the same
//! parser any external IDX file would use. Loading scales pixels to [0,1];
//! standardization statistics always come from the training split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::LabelBatch;
use crate::rng::{standard_normal, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One labeled split: row-major features with a fixed per-sample shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    /// Shape of a single sample, `[C, H, W]` for images or `[D]` for
    /// feature vectors.
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl DataSplit {
    pub fn new(
        sample_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || per == 0 {
            return Err(Error::Shape("sample shape must be nonempty".into()));
        }
        if features.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} labels with {per} features each wants {} values, got {}",
                labels.len(),
                labels.len() * per,
                features.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Param("num_classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Param(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(DataSplit { sample_shape, features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.feature_len();
        &self.features[i * per..(i + 1) * per]
    }

    /// First `count` samples, in order.
    pub fn take(&self, count: usize) -> Result<DataSplit> {
        if count > self.len() {
            return Err(Error::Param(format!(
                "cannot take {count} samples from a split of {}",
                self.len()
            )));
        }
        DataSplit::new(
            self.sample_shape.clone(),
            self.features[..count * self.feature_len()].to_vec(),
            self.labels[..count].to_vec(),
            self.num_classes,
        )
    }

    /// Gathers the given samples into one batch tensor, shaped
    /// `[B, ...sample_shape]`, plus the matching labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelBatch)> {
        if indices.is_empty() {
            return Err(Error::Param("a batch needs at least one sample".into()));
        }
        let per = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Param(format!("sample {i} outside split of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, LabelBatch::new(labels, self.num_classes)?))
    }
}

/// Train and test splits plus the standardization constants applied to
/// both, kept for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DataSplit,
    pub test: DataSplit,
    /// Per-channel (mean, std) computed from the training split.
    pub channel_stats: Vec<(f64, f64)>,
}

// ─── IDX format ───

struct CountedReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountedReader<R> {
    fn new(inner: R) -> Self {
        CountedReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            message: format!("file ends inside {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        if self.inner.read(&mut b).unwrap_or(0) != 0 {
            return Err(Error::Format {
                offset: self.offset,
                message: "trailing bytes after the payload".into(),
            });
        }
        Ok(())
    }
}

/// Raw IDX image stack: `count` grayscale images of `rows` x `cols` bytes.
#[derive(Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn read_idx_images(r: &mut impl Read) -> Result<IdxImages> {
    let mut r = CountedReader::new(r);
    let magic = r.read_u32_be("the magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic is {magic:#010x}, wanted {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.read_u32_be("the image count")? as usize;
    let rows = r.read_u32_be("the row count")? as usize;
    let cols = r.read_u32_be("the column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("degenerate image extent {rows}x{cols}"),
        });
    }
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels, "the pixel payload")?;
    r.expect_eof()?;
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut r = CountedReader::new(r);
    let magic = r.read_u32_be("the magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic is {magic:#010x}, wanted {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.read_u32_be("the label count")? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels, "the label payload")?;
    r.expect_eof()?;
    Ok(labels)
}

pub fn write_idx_images(w: &mut impl Write, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::Param(format!(
            "{} pixels do not tile {rows}x{cols} images",
            pixels.len()
        )));
    }
    let count = pixels.len() / (rows * cols);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(count as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Loads one images/labels IDX pair into a split with pixels scaled to
/// [0,1] and a single channel. Standardization is a separate step so its
/// statistics can come from the training split alone.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<DataSplit> {
    let mut ir = BufReader::new(File::open(&images_path)?);
    let images = read_idx_images(&mut ir)?;
    let mut lr = BufReader::new(File::open(&labels_path)?);
    let labels = read_idx_labels(&mut lr)?;
    let per = images.rows * images.cols;
    let image_count = images.pixels.len() / per;
    if image_count != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{image_count} images but {} labels", labels.len()),
        });
    }
    let features: Vec<f64> = images.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(|b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    DataSplit::new(vec![1, images.rows, images.cols], features, labels, num_classes)
}

/// Standardizes both splits per channel with mean/std from `train`.
/// Returns the constants used. Standard deviations below 1e-12 are
/// clamped so constant channels stay finite.
pub fn standardize_channels(
    train: &mut DataSplit,
    test: &mut DataSplit,
) -> Result<Vec<(f64, f64)>> {
    if train.sample_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "channel standardization wants [C,H,W] samples, got {:?}",
            train.sample_shape
        )));
    }
    if test.sample_shape != train.sample_shape {
        return Err(Error::Shape("train and test sample shapes disagree".into()));
    }
    let channels = train.sample_shape[0];
    let hw = train.sample_shape[1] * train.sample_shape[2];
    let per = channels * hw;
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in 0..train.len() {
            let base = s * per + c * hw;
            for v in &train.features[base..base + hw] {
                sum += v;
            }
            count += hw;
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for s in 0..train.len() {
            let base = s * per + c * hw;
            for v in &train.features[base..base + hw] {
                sq += (v - mean) * (v - mean);
            }
        }
        let std = (sq / count as f64).sqrt().max(1e-12);
        stats.push((mean, std));
    }
    for split in [train, test] {
        for s in 0..split.len() {
            for (c, &(mean, std)) in stats.iter().enumerate() {
                let base = s * per + c * hw;
                for v in &mut split.features[base..base + hw] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }
    Ok(stats)
}

// ─── synthetic blobs ───

/// Gaussian clusters around deterministic centers; rows are class-major.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<DataSplit> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::Param("blob extents must be positive".into()));
    }
    if !(spread >= 0.0) {
        return Err(Error::Param(format!("spread must be nonnegative, got {spread}")));
    }
    let mut centers_rng = stream(seed, "blobs/centers");
    let centers: Vec<f64> =
        (0..num_classes * dim).map(|_| standard_normal(&mut centers_rng) * 3.0).collect();
    let mut points_rng = stream(seed, "blobs/points");
    let mut features = Vec::with_capacity(num_classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        for _ in 0..samples_per_class {
            for d in 0..dim {
                features.push(centers[class * dim + d] + standard_normal(&mut points_rng) * spread);
            }
            labels.push(class);
        }
    }
    DataSplit::new(vec![dim], features, labels, num_classes)
}

/// Splits class-major data by taking the first `train_per_class` of each
/// class into train and the rest into test.
pub fn split_per_class(
    split: &DataSplit,
    train_per_class: usize,
) -> Result<(DataSplit, DataSplit)> {
    let per = split.feature_len();
    let mut counts = vec![0usize; split.num_classes];
    let mut train_f = Vec::new();
    let mut train_l = Vec::new();
    let mut test_f = Vec::new();
    let mut test_l = Vec::new();
    for i in 0..split.len() {
        let label = split.labels[i];
        let (f, l) = if counts[label] < train_per_class {
            (&mut train_f, &mut train_l)
        } else {
            (&mut test_f, &mut test_l)
        };
        counts[label] += 1;
        f.extend_from_slice(&split.features[i * per..(i + 1) * per]);
        l.push(label);
    }
    if train_l.is_empty() || test_l.is_empty() {
        return Err(Error::Param(format!(
            "train_per_class {train_per_class} leaves an empty split"
        )));
    }
    Ok((
        DataSplit::new(split.sample_shape.clone(), train_f, train_l, split.num_classes)?,
        DataSplit::new(split.sample_shape.clone(), test_f, test_l, split.num_classes)?,
    ))
}

// ─── synthetic digit corpus ───

/// 5x7 digit glyphs, one row per byte, bit 4 the leftmost column.
const DIGIT_FONT: [[u8; 7]; 10] = [
    [14, 17, 19, 21, 25, 17, 14],
    [4, 12, 4, 4, 4, 4, 14],
    [14, 17, 1, 2, 4, 8, 31],
    [31, 2, 4, 2, 1, 17, 14],
    [2, 6, 10, 18, 31, 2, 2],
    [31, 16, 30, 1, 1, 17, 14],
    [6, 8, 16, 30, 17, 17, 14],
    [31, 1, 2, 4, 8, 8, 8],
    [14, 17, 17, 14, 17, 17, 14],
    [14, 17, 17, 15, 1, 2, 12],
];

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

/// Geometry and noise levels of the generated digit corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitCorpusSpec {
    pub data_seed: u64,
    pub side: usize,
    pub train_total: usize,
    pub test_total: usize,
    /// Subset actually loaded, taken from the front by index.
    pub train_take: usize,
    pub test_take: usize,
    pub noise_sigma: f64,
    pub max_jitter: i64,
}

impl Default for DigitCorpusSpec {
    fn default() -> Self {
        DigitCorpusSpec {
            data_seed: 42,
            side: 16,
            train_total: 8000,
            test_total: 2000,
            train_take: 5000,
            test_take: 1000,
            noise_sigma: 0.2,
            max_jitter: 2,
        }
    }
}

impl DigitCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.side < GLYPH_ROWS {
            return Err(Error::Param(format!(
                "side {} cannot hold a {GLYPH_ROWS}-row glyph",
                self.side
            )));
        }
        if self.train_take > self.train_total || self.test_take > self.test_total {
            return Err(Error::Param("subset sizes exceed the generated corpus".into()));
        }
        if self.train_take == 0 || self.test_take == 0 {
            return Err(Error::Param("subset sizes must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Param(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// File names carry every parameter that shapes the generated bytes,
    /// so a changed spec never silently reuses a stale corpus.
    pub fn file_names(&self) -> [String; 4] {
        let tag = format!(
            "digits-s{}-{}x{}-j{}-n{}-{}+{}",
            self.data_seed,
            self.side,
            self.side,
            self.max_jitter,
            self.noise_sigma,
            self.train_total,
            self.test_total,
        );
        [
            format!("{tag}-train-images.idx"),
            format!("{tag}-train-labels.idx"),
            format!("{tag}-test-images.idx"),
            format!("{tag}-test-labels.idx"),
        ]
    }
}

struct DigitPainter {
    layout: rand_chacha::ChaCha8Rng,
    noise: rand_chacha::ChaCha8Rng,
}

impl DigitPainter {
    fn new(seed: u64) -> Self {
        DigitPainter { layout: stream(seed, "digits/layout"), noise: stream(seed, "digits/noise") }
    }

    fn paint(&mut self, digit: usize, spec: &DigitCorpusSpec) -> Vec<u8> {
        let side = spec.side;
        let j = spec.max_jitter;
        let dx = self.layout.gen_range(-j..=j);
        let dy = self.layout.gen_range(-j..=j);
        let intensity = 0.6 + 0.4 * self.layout.gen::<f64>();
        let x0 = (side - GLYPH_COLS) as i64 / 2 + dx;
        let y0 = (side - GLYPH_ROWS) as i64 / 2 + dy;
        let mut canvas = vec![0.0f64; side * side];
        for (row, bits) in DIGIT_FONT[digit].iter().enumerate() {
            for col in 0..GLYPH_COLS {
                if bits & (1 << (GLYPH_COLS - 1 - col)) != 0 {
                    let y = y0 + row as i64;
                    let x = x0 + col as i64;
                    if (0..side as i64).contains(&y) && (0..side as i64).contains(&x) {
                        canvas[y as usize * side + x as usize] = intensity;
                    }
                }
            }
        }
        canvas
            .into_iter()
            .map(|v| {
                let noisy = v + standard_normal(&mut self.noise) * spec.noise_sigma;
                (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect()
    }
}

/// Writes the four IDX corpus files into `dir` if any is missing.
/// Labels cycle 0..9, so every front subset is class-balanced.
pub fn ensure_digit_corpus(dir: impl AsRef<Path>, spec: &DigitCorpusSpec) -> Result<[PathBuf; 4]> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths = spec.file_names().map(|n| dir.join(n));
    if paths.iter().all(|p| p.exists()) {
        return Ok(paths);
    }
    let mut painter = DigitPainter::new(spec.data_seed);
    let mut write_pair = |count: usize, image_path: &Path, label_path: &Path| -> Result<()> {
        let mut pixels = Vec::with_capacity(count * spec.side * spec.side);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let digit = i % 10;
            pixels.extend_from_slice(&painter.paint(digit, spec));
            labels.push(digit as u8);
        }
        let mut iw = BufWriter::new(File::create(image_path)?);
        write_idx_images(&mut iw, spec.side, spec.side, &pixels)?;
        iw.flush()?;
        let mut lw = BufWriter::new(File::create(label_path)?);
        write_idx_labels(&mut lw, &labels)?;
        lw.flush()?;
        Ok(())
    };
    write_pair(spec.train_total, &paths[0], &paths[1])?;
    write_pair(spec.test_total, &paths[2], &paths[3])?;
    Ok(paths)
}

/// Generates (if needed) and loads the digit corpus: IDX parse, front
/// subset, [0,1] scaling, per-channel standardization from train.
pub fn load_digit_dataset(dir: impl AsRef<Path>, spec: &DigitCorpusSpec) -> Result<Dataset> {
    let paths = ensure_digit_corpus(&dir, spec)?;
    let mut train = load_idx_dataset(&paths[0], &paths[1])?.take(spec.train_take)?;
    let mut test = load_idx_dataset(&paths[2], &paths[3])?.take(spec.test_take)?;
    let channel_stats = standardize_channels(&mut train, &mut test)?;
    Ok(Dataset { train, test, channel_stats })
}

// ─── shuffling and augmentation ───

/// A fresh permutation of `0..n` for the given stage and epoch; the same
/// arguments always shuffle the same way.
pub fn shuffled_indices(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &format!("shuffle/{stage}/e{epoch}"));
    indices.shuffle(&mut rng);
    indices
}

pub const AUGMENT_PAD: usize = 4;

/// Random-crop (after a 4-pixel zero pad) plus horizontal flip, applied in
/// place to a `[B, C, H, W]` batch. Draws depend only on (seed, epoch,
/// sample index), so a sample augments identically however it is batched.
pub fn augment_batch(
    batch: &mut Tensor,
    seed: u64,
    epoch: usize,
    sample_indices: &[usize],
) -> Result<()> {
    let shape = batch.shape.clone();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("augmentation wants a [B,C,H,W] batch, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if b != sample_indices.len() {
        return Err(Error::Param(format!(
            "{b} images but {} sample indices",
            sample_indices.len()
        )));
    }
    let per = c * h * w;
    for (slot, &index) in sample_indices.iter().enumerate() {
        let mut rng = stream(seed, &format!("augment/e{epoch}/i{index}"));
        let oy = rng.gen_range(0..=2 * AUGMENT_PAD);
        let ox = rng.gen_range(0..=2 * AUGMENT_PAD);
        let flip = rng.gen::<bool>();
        let src = batch.data[slot * per..(slot + 1) * per].to_vec();
        let out = &mut batch.data[slot * per..(slot + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // position in the padded image the crop reads from
                    let py = y + oy;
                    let px = x + ox;
                    let v = if py >= AUGMENT_PAD
                        && py < AUGMENT_PAD + h
                        && px >= AUGMENT_PAD
                        && px < AUGMENT_PAD + w
                    {
                        src[ch * h * w + (py - AUGMENT_PAD) * w + (px - AUGMENT_PAD)]
                    } else {
                        0.0
                    };
                    let dest_x = if flip { w - 1 - x } else { x };
                    out[ch * h * w + y * w + dest_x] = v;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_idx_pair_is_recovered_exactly() {
        // two 2x2 images, pixels 0,64,128,255 and 10,20,30,40
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 64, 128, 255, 10, 20, 30, 40]);
        let parsed = read_idx_images(&mut images.as_slice()).unwrap();
        assert_eq!((parsed.rows, parsed.cols), (2, 2));
        assert_eq!(parsed.pixels, vec![0, 64, 128, 255, 10, 20, 30, 40]);
    }

    #[test]
    fn image_file_with_label_magic_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&0u32.to_be_bytes());
        let err = read_idx_images(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn empty_file_fails_at_offset_zero() {
        let err = read_idx_images(&mut [].as_slice()).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("wanted a format error, got {other}"),
        }
    }

    #[test]
    fn truncated_pixels_report_payload_offset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2]); // two of four pixels
        let err = read_idx_images(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 16);
                assert!(message.contains("pixel payload"), "{message}");
            }
            other => panic!("wanted a format error, got {other}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = Vec::new();
        write_idx_labels(&mut bytes, &[1, 2, 3]).unwrap();
        bytes.push(9);
        let err = read_idx_labels(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        let mut iw = File::create(&ip).unwrap();
        write_idx_images(&mut iw, 2, 2, &[0; 8]).unwrap();
        let mut lw = File::create(&lp).unwrap();
        write_idx_labels(&mut lw, &[0, 1, 1]).unwrap();
        let err = load_idx_dataset(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn loaded_pixels_are_scaled_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        let mut iw = File::create(&ip).unwrap();
        write_idx_images(&mut iw, 1, 2, &[0, 255, 51, 102]).unwrap();
        let mut lw = File::create(&lp).unwrap();
        write_idx_labels(&mut lw, &[3, 1]).unwrap();
        let split = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(split.sample_shape, vec![1, 1, 2]);
        assert_eq!(split.features[0], 0.0);
        assert_eq!(split.features[1], 1.0);
        assert_eq!(split.features[2], 51.0 / 255.0);
        assert_eq!(split.num_classes, 4);
    }

    #[test]
    fn blobs_same_seed_identical() {
        let a = make_blobs(3, 4, 10, 0.5, 9).unwrap();
        let b = make_blobs(3, 4, 10, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = make_blobs(3, 4, 10, 0.5, 10).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn blobs_row_count() {
        let d = make_blobs(3, 2, 100, 1.0, 1).unwrap();
        assert_eq!(d.len(), 300);
        assert_eq!(d.features.len(), 600);
    }

    #[test]
    fn zero_spread_blobs_are_nearest_centroid_separable() {
        let d = make_blobs(4, 3, 20, 0.0, 5).unwrap();
        let (train, test) = split_per_class(&d, 15).unwrap();
        // class centroids from train
        let per = train.feature_len();
        let mut centroids = vec![vec![0.0; per]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..train.len() {
            let l = train.labels[i];
            counts[l] += 1;
            for (j, v) in train.sample(i).iter().enumerate() {
                centroids[l][j] += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let s = test.sample(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = s.iter().zip(&centroids[a]).map(|(x, c)| (x - c) * (x - c)).sum();
                    let db: f64 = s.iter().zip(&centroids[b]).map(|(x, c)| (x - c) * (x - c)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if best == test.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, test.len());
    }

    fn tiny_spec() -> DigitCorpusSpec {
        DigitCorpusSpec {
            train_total: 60,
            test_total: 30,
            train_take: 50,
            test_take: 20,
            ..DigitCorpusSpec::default()
        }
    }

    #[test]
    fn digit_corpus_loads_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_digit_dataset(dir.path(), &tiny_spec()).unwrap();
        assert_eq!(ds.train.len(), 50);
        assert_eq!(ds.test.len(), 20);
        assert_eq!(ds.train.sample_shape, vec![1, 16, 16]);
        assert_eq!(ds.train.num_classes, 10);
        // labels cycle, so the front subset is balanced
        for class in 0..10 {
            assert_eq!(ds.train.labels.iter().filter(|&&l| l == class).count(), 5);
        }
    }

    #[test]
    fn digit_corpus_is_reproducible_across_directories() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = load_digit_dataset(d1.path(), &tiny_spec()).unwrap();
        let b = load_digit_dataset(d2.path(), &tiny_spec()).unwrap();
        assert_eq!(a, b);
        let other = DigitCorpusSpec { data_seed: 43, ..tiny_spec() };
        let c = load_digit_dataset(d1.path(), &other).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn digit_corpus_standardization_centers_train() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_digit_dataset(dir.path(), &tiny_spec()).unwrap();
        let n = ds.train.features.len() as f64;
        let mean: f64 = ds.train.features.iter().sum::<f64>() / n;
        let var: f64 = ds.train.features.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
    }

    #[test]
    fn glyphs_survive_the_noise() {
        // with the default sigma the mean glyph pixel should clearly beat
        // the mean background pixel
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let paths = ensure_digit_corpus(dir.path(), &spec).unwrap();
        let raw = load_idx_dataset(&paths[0], &paths[1]).unwrap();
        let bright: f64 =
            raw.features.iter().filter(|v| **v > 0.5).count() as f64 / raw.features.len() as f64;
        // glyph pixels cover roughly 10-15% of each canvas
        assert!(bright > 0.05 && bright < 0.4, "bright fraction {bright}");
    }

    #[test]
    fn batch_gathers_samples_and_labels() {
        let d = make_blobs(2, 3, 4, 0.1, 3).unwrap();
        let (t, labels) = d.batch(&[0, 5, 2]).unwrap();
        assert_eq!(t.shape, vec![3, 3]);
        assert_eq!(t.data[0..3], d.features[0..3]);
        assert_eq!(t.data[3..6], d.features[15..18]);
        assert_eq!(labels.labels(), &[d.labels[0], d.labels[5], d.labels[2]]);
        assert!(d.batch(&[99]).is_err());
        assert!(d.batch(&[]).is_err());
    }

    #[test]
    fn shuffle_is_deterministic_per_stage_and_epoch() {
        let a = shuffled_indices(100, 7, "baseline", 0);
        let b = shuffled_indices(100, 7, "baseline", 0);
        assert_eq!(a, b);
        let c = shuffled_indices(100, 7, "baseline", 1);
        assert_ne!(a, c);
        let d = shuffled_indices(100, 7, "cycle-1", 0);
        assert_ne!(a, d);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_is_deterministic_per_sample() {
        let d = {
            let dir = tempfile::tempdir().unwrap();
            load_digit_dataset(dir.path(), &tiny_spec()).unwrap()
        };
        let (mut alone, _) = d.train.batch(&[5]).unwrap();
        augment_batch(&mut alone, 7, 3, &[5]).unwrap();
        let (mut grouped, _) = d.train.batch(&[1, 5, 9]).unwrap();
        augment_batch(&mut grouped, 7, 3, &[1, 5, 9]).unwrap();
        let per = d.train.feature_len();
        assert_eq!(alone.data, grouped.data[per..2 * per]);

        // another epoch moves the crop for at least some samples
        let (mut other_epoch, _) = d.train.batch(&[5]).unwrap();
        augment_batch(&mut other_epoch, 7, 4, &[5]).unwrap();
        let (mut same_again, _) = d.train.batch(&[5]).unwrap();
        augment_batch(&mut same_again, 7, 3, &[5]).unwrap();
        assert_eq!(alone.data, same_again.data);
        assert_ne!(alone.data, other_epoch.data);
    }

    #[test]
    fn augmentation_identity_crop_recovers_source() {
        // offsets come from the stream, so scan for a sample whose draw is
        // the centered crop without flip; the transform must be identity
        let d = {
            let dir = tempfile::tempdir().unwrap();
            load_digit_dataset(dir.path(), &tiny_spec()).unwrap()
        };
        let mut found = false;
        for index in 0..d.train.len() {
            let mut rng = stream(11, &format!("augment/e0/i{index}"));
            let oy = rng.gen_range(0..=2 * AUGMENT_PAD);
            let ox = rng.gen_range(0..=2 * AUGMENT_PAD);
            let flip = rng.gen::<bool>();
            if oy == AUGMENT_PAD && ox == AUGMENT_PAD && !flip {
                let (mut batch, _) = d.train.batch(&[index]).unwrap();
                let before = batch.data.clone();
                augment_batch(&mut batch, 11, 0, &[index]).unwrap();
                assert_eq!(before, batch.data);
                found = true;
                break;
            }
        }
        assert!(found, "no identity draw among the samples scanned");
    }

    #[test]
    fn split_validation_catches_bad_construction() {
        assert!(DataSplit::new(vec![2], vec![1.0, 2.0, 3.0], vec![0], 1).is_err());
        assert!(DataSplit::new(vec![2], vec![1.0, 2.0], vec![5], 2).is_err());
        assert!(DataSplit::new(vec![], vec![], vec![], 1).is_err());
    }
}
