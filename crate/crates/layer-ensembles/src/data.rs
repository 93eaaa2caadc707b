//! Synthetic dataset generation, normalization, augmentation, corruption
//! operators and the on-disk tensor/image/manifest formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeError, Result};
use crate::mask::LabelMask;
use crate::model::derive_seed;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8] = b"LETEN1\n";

/// One grayscale image with its label map and bookkeeping tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// [1, H, W] intensities.
    pub image: Tensor,
    pub mask: LabelMask,
    pub id: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    /// Foreground class count: 1 (single ellipse) or 3 (ring + disc + blob).
    pub num_classes: usize,
    /// Foreground-background intensity gap drawn uniformly from this range.
    pub contrast_range: [f64; 2],
    /// Standard deviation of per-pixel Gaussian texture noise.
    pub noise_level: f64,
    /// Fraction of each split generated with strongly reduced contrast.
    pub low_contrast_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(LeError::InvalidConfig(
                "dataset images must be at least 16x16".into(),
            ));
        }
        if self.num_classes != 1 && self.num_classes != 3 {
            return Err(LeError::InvalidConfig(
                "dataset num_classes must be 1 or 3".into(),
            ));
        }
        if !(self.contrast_range[0] > 0.0 && self.contrast_range[1] >= self.contrast_range[0]) {
            return Err(LeError::InvalidConfig(
                "contrast_range must satisfy 0 < lo <= hi".into(),
            ));
        }
        if self.noise_level < 0.0 {
            return Err(LeError::InvalidConfig("noise_level must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.low_contrast_fraction) {
            return Err(LeError::InvalidConfig(
                "low_contrast_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Label values in the masks, background included.
    pub fn mask_classes(&self) -> usize {
        self.num_classes + 1
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Box-Muller draw; kept local so corruption streams depend only on ChaCha8.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates the full dataset deterministically from (spec, spec.seed).
/// Splits draw from disjoint seed streams, so resizing one split never
/// perturbs another.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make_split = |name: &str, count: usize, tag: u64| -> Result<Vec<Sample>> {
        let split_seed = derive_seed(spec.seed, tag);
        let low_count = (spec.low_contrast_fraction * count as f64).round() as usize;
        (0..count)
            .map(|i| {
                let sample_seed = derive_seed(split_seed, i as u64);
                generate_sample(spec, name, i, sample_seed, i < low_count)
            })
            .collect()
    };
    Ok(Dataset {
        train: make_split("train", spec.train, 300)?,
        val: make_split("val", spec.val, 301)?,
        test: make_split("test", spec.test, 302)?,
    })
}

fn generate_sample(
    spec: &DatasetSpec,
    split: &str,
    index: usize,
    seed: u64,
    low_contrast: bool,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u32; h * w];

    // Foreground is kept centred: jitter stays well inside the smallest radius.
    let jitter = (h.min(w) as f64) / 16.0;
    let cy = h as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
    let cx = w as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
    let min_side = h.min(w) as f64;

    if spec.num_classes == 1 {
        let ry = rng.gen_range(min_side / 6.0..min_side / 3.5);
        let rx = rng.gen_range(min_side / 6.0..min_side / 3.5);
        paint_ellipse(&mut labels, h, w, cy, cx, ry, rx, 1, true);
    } else {
        // Concentric disc (1) and ring (2) with a detached blob (3).
        let r_inner = rng.gen_range(min_side / 9.0..min_side / 7.0);
        let r_outer = r_inner + rng.gen_range(min_side / 16.0..min_side / 10.0);
        paint_ellipse(&mut labels, h, w, cy, cx, r_outer, r_outer, 2, true);
        paint_ellipse(&mut labels, h, w, cy, cx, r_inner, r_inner, 1, true);
        let blob_r = rng.gen_range(min_side / 14.0..min_side / 9.0);
        let blob_cx = cx - r_outer - blob_r - min_side / 24.0;
        paint_ellipse(&mut labels, h, w, cy, blob_cx, blob_r, blob_r, 3, false);
    }

    let contrast_scale = if low_contrast { 0.25 } else { 1.0 };
    let contrast =
        rng.gen_range(spec.contrast_range[0]..=spec.contrast_range[1]) * contrast_scale;
    let background = rng.gen_range(0.15..0.35);
    // Per-class brightness offsets keep the K=3 structures distinguishable.
    let class_gain = [0.0, 1.0, 0.6, 0.85];

    let mut pixels = vec![0.0f64; h * w];
    for (i, px) in pixels.iter_mut().enumerate() {
        let class = labels[i] as usize;
        *px = background
            + contrast * class_gain[class]
            + spec.noise_level * standard_normal(&mut rng);
    }

    let mut tags = Vec::new();
    if low_contrast {
        tags.push("low-contrast".to_string());
    }
    Ok(Sample {
        image: Tensor::new(vec![1, h, w], pixels)?,
        mask: LabelMask::new(labels, h, w, spec.mask_classes())?,
        id: format!("{split}-{index:04}"),
        tags,
    })
}

/// Sets `class` on every pixel inside the ellipse. With `overwrite = false`
/// existing foreground labels are preserved, keeping classes disjoint.
fn paint_ellipse(
    labels: &mut [u32],
    h: usize,
    w: usize,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    class: u32,
    overwrite: bool,
) {
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                let i = r * w + c;
                if overwrite || labels[i] == 0 {
                    labels[i] = class;
                }
            }
        }
    }
}

/// Rescales to zero mean and unit standard deviation (population std).
pub fn normalize(image: &Tensor) -> Result<Tensor> {
    let mean = image.mean();
    let n = image.numel() as f64;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(LeError::InvalidArgument(
            "normalize: constant image has no intensity variance".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    Ok(image.map(|v| (v - mean) * inv))
}

pub const PATCH_SWAP_SIZE: usize = 10;

/// Random flips and 90-degree rotations applied to image and mask together,
/// plus an image-only swap of two 10x10 patches.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut image = sample.image.clone();
    let mut labels = sample.mask.labels().to_vec();
    let mut h = sample.mask.height();
    let mut w = sample.mask.width();

    if rng.gen_bool(0.5) {
        flip_horizontal(image.data_mut(), h, w);
        flip_horizontal(&mut labels, h, w);
    }
    if rng.gen_bool(0.5) {
        flip_vertical(image.data_mut(), h, w);
        flip_vertical(&mut labels, h, w);
    }
    let quarter_turns = rng.gen_range(0..4u32);
    for _ in 0..quarter_turns {
        let img = rot90(image.data(), h, w);
        image = Tensor::new(vec![1, w, h], img)?;
        labels = rot90(&labels, h, w);
        std::mem::swap(&mut h, &mut w);
    }

    let p = PATCH_SWAP_SIZE;
    if h > p && w > p {
        let (r1, c1) = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
        let (r2, c2) = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
        swap_patches(image.data_mut(), w, (r1, c1), (r2, c2), p);
    }

    Ok(Sample {
        image,
        mask: LabelMask::new(labels, h, w, sample.mask.num_classes())?,
        id: sample.id.clone(),
        tags: sample.tags.clone(),
    })
}

pub fn flip_horizontal<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for r in 0..h {
        data[r * w..(r + 1) * w].reverse();
    }
}

pub fn flip_vertical<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for r in 0..h / 2 {
        for c in 0..w {
            data.swap(r * w + c, (h - 1 - r) * w + c);
        }
    }
}

/// Counter-clockwise quarter turn; output is [w, h].
pub fn rot90<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for c in (0..w).rev() {
        for r in 0..h {
            out.push(data[r * w + c]);
        }
    }
    out
}

fn swap_patches(data: &mut [f64], w: usize, a: (usize, usize), b: (usize, usize), size: usize) {
    if a == b {
        return;
    }
    for dr in 0..size {
        for dc in 0..size {
            let ia = (a.0 + dr) * w + a.1 + dc;
            let ib = (b.0 + dr) * w + b.1 + dc;
            // Overlapping patches still permute values pairwise.
            data.swap(ia, ib);
        }
    }
}

/// Adds i.i.d. Gaussian(mean, std) noise to every pixel.
pub fn corrupt_gaussian(image: &Tensor, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if std < 0.0 {
        return Err(LeError::InvalidArgument(
            "corrupt_gaussian: std must be >= 0".into(),
        ));
    }
    let data = image
        .data()
        .iter()
        .map(|v| v + mean + std * standard_normal(rng))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

pub const GAUSSIAN_CORRUPTION_MEAN: f64 = 0.3;
pub const GAUSSIAN_CORRUPTION_STD: f64 = 0.7;

/// Convolves with a random sum-one kernel (reflect padding) and re-normalizes
/// the result to zero mean and unit standard deviation.
pub fn corrupt_random_convolution(
    image: &Tensor,
    kernel_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(LeError::InvalidArgument(format!(
            "corrupt_random_convolution: kernel size must be odd, got {kernel_size}"
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(LeError::ShapeMismatch {
            context: "corrupt_random_convolution".into(),
            expected: vec![1, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (h, w) = (shape[1], shape[2]);

    let k2 = kernel_size * kernel_size;
    let mut kernel: Vec<f64>;
    loop {
        kernel = (0..k2).map(|_| standard_normal(rng)).collect();
        let sum: f64 = kernel.iter().sum();
        // A near-zero sum would blow up the normalization; redraw (probability
        // of hitting this is negligible but not zero).
        if sum.abs() > 1e-6 {
            for v in &mut kernel {
                *v /= sum;
            }
            break;
        }
    }

    let out = convolve_reflect(image.data(), h, w, &kernel, kernel_size);
    normalize(&Tensor::new(vec![1, h, w], out)?)
}

/// Single-channel 2D convolution with reflect (half-sample) padding.
pub fn convolve_reflect(src: &[f64], h: usize, w: usize, kernel: &[f64], kernel_size: usize) -> Vec<f64> {
    let half = (kernel_size / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };
    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for kr in 0..kernel_size {
                for kc in 0..kernel_size {
                    let rr = reflect(r as isize + kr as isize - half, h);
                    let cc = reflect(c as isize + kc as isize - half, w);
                    acc += kernel[kr * kernel_size + kc] * src[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Writes the raw tensor container: magic, u32 rank, u32 extents, f64 payload,
/// all little-endian.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(LeError::InvalidArgument(format!(
            "{}: not a raw tensor file (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    input.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank == 0 || rank > 8 {
        return Err(LeError::InvalidArgument(format!(
            "{}: implausible tensor rank {rank}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf8 = [0u8; 8];
    for _ in 0..numel {
        input.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Tensor::new(shape, data)
}

pub fn mask_to_tensor(mask: &LabelMask) -> Tensor {
    Tensor::from_fn(&[mask.height(), mask.width()], |i| mask.labels()[i] as f64)
}

pub fn tensor_to_mask(tensor: &Tensor, num_classes: usize) -> Result<LabelMask> {
    let shape = tensor.shape();
    if shape.len() != 2 {
        return Err(LeError::ShapeMismatch {
            context: "tensor_to_mask".into(),
            expected: vec![0, 0],
            got: shape.to_vec(),
        });
    }
    let labels = tensor
        .data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(LeError::InvalidArgument(format!(
                    "mask tensor holds non-integer value {v}"
                )))
            } else {
                Ok(v as u32)
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelMask::new(labels, shape[0], shape[1], num_classes)
}

/// 8-bit binary PGM for human inspection; intensities are min-max scaled.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        [1, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(LeError::ShapeMismatch {
                context: "write_pgm".into(),
                expected: vec![1, 0, 0],
                got: shape.to_vec(),
            })
        }
    };
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: String,
    pub tags: Vec<String>,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "id,image,mask,split,tags")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.id,
            row.image_path.display(),
            row.mask_path.display(),
            row.split,
            row.tags.join(";")
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let input = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(LeError::InvalidArgument(format!(
                "{}:{}: expected 5 manifest fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            image_path: PathBuf::from(fields[1]),
            mask_path: PathBuf::from(fields[2]),
            split: fields[3].to_string(),
            tags: if fields[4].is_empty() {
                Vec::new()
            } else {
                fields[4].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(rows)
}

/// Writes every sample as raw tensors plus a PGM preview, and a manifest CSV
/// tying them together. Returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for split in ["train", "val", "test"] {
        let samples = dataset.split(split).unwrap();
        for sample in samples {
            let image_path = dir.join(format!("{}-image.leten", sample.id));
            let mask_path = dir.join(format!("{}-mask.leten", sample.id));
            write_tensor(&image_path, &sample.image)?;
            write_tensor(&mask_path, &mask_to_tensor(&sample.mask))?;
            write_pgm(&dir.join(format!("{}.pgm", sample.id)), &sample.image)?;
            rows.push(ManifestRow {
                id: sample.id.clone(),
                image_path,
                mask_path,
                split: split.to_string(),
                tags: sample.tags.clone(),
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path, num_mask_classes: usize) -> Result<Dataset> {
    let rows = read_manifest(manifest_path)?;
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for row in rows {
        let image = read_tensor(&row.image_path)?;
        let mask = tensor_to_mask(&read_tensor(&row.mask_path)?, num_mask_classes)?;
        let sample = Sample {
            image,
            mask,
            id: row.id,
            tags: row.tags,
        };
        match row.split.as_str() {
            "train" => dataset.train.push(sample),
            "val" => dataset.val.push(sample),
            "test" => dataset.test.push(sample),
            other => {
                return Err(LeError::InvalidArgument(format!(
                    "manifest split `{other}` is not one of train/val/test"
                )))
            }
        }
    }
    Ok(dataset)
}
