//! Datasets: CIFAR binary files, a synthetic localization generator,
//! stratified splits and crop/flip augmentation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbones::ChannelNorm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Location of the class signal in a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalRegion {
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: u8,
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl SignalRegion {
    /// `(y_range, x_range)` of the quadrant in an `h×w` image.
    pub fn quadrant_bounds(
        &self,
        h: usize,
        w: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (hh, hw) = (h / 2, w / 2);
        let ys = if self.quadrant / 2 == 0 { 0..hh } else { hh..h };
        let xs = if self.quadrant.is_multiple_of(2) {
            0..hw
        } else {
            hw..w
        };
        (ys, xs)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Ground-truth signal placement (synthetic data only).
    pub regions: Option<Vec<SignalRegion>>,
    /// CIFAR-100 coarse labels, kept so files round-trip byte for byte.
    pub coarse_labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {l} >= {} classes",
                self.num_classes
            )));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Subset by sample indices, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
            regions: self
                .regions
                .as_ref()
                .map(|r| indices.iter().map(|&i| r[i]).collect()),
            coarse_labels: self
                .coarse_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses CIFAR-10/100 binary records. Pixels map to `[0, 1]` by `/255`;
/// CIFAR-100 uses the fine label.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format {
            expected: format!("a positive multiple of {rec} bytes"),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let n = bytes.len() / rec;
    let classes = variant.num_classes();
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (label, px) = match variant {
            CifarVariant::Cifar10 => (r[0], &r[1..]),
            CifarVariant::Cifar100 => {
                if r[0] >= 20 {
                    return Err(Error::Data(format!(
                        "record {i}: coarse label {} >= 20",
                        r[0]
                    )));
                }
                coarse.push(r[0]);
                (r[1], &r[2..])
            }
        };
        if usize::from(label) >= classes {
            return Err(Error::Data(format!(
                "record {i}: label {label} >= {classes}"
            )));
        }
        labels.push(usize::from(label));
        pixels.extend(px.iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_vec([n, 3, 32, 32], pixels)?,
        labels,
        num_classes: classes,
        split: Split::Train,
        regions: None,
        coarse_labels: (variant == CifarVariant::Cifar100).then_some(coarse),
    })
}

pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant)
}

/// Encodes a 3×32×32 dataset as CIFAR records (pixels rounded to bytes).
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(Error::Data(format!(
            "CIFAR needs 3x32x32 images, got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        let label = u8::try_from(ds.labels[i])
            .ok()
            .filter(|&l| usize::from(l) < variant.num_classes())
            .ok_or_else(|| {
                Error::Data(format!("label {} does not fit {variant:?}", ds.labels[i]))
            })?;
        if variant == CifarVariant::Cifar100 {
            out.push(ds.coarse_labels.as_ref().map_or(0, |c| c[i]));
        }
        out.push(label);
        out.extend(
            ds.images
                .sample(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar_binary(
    ds: &Dataset,
    path: impl AsRef<Path>,
    variant: CifarVariant,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cifar(ds, variant)?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLocalizationSpec {
    pub classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticLocalizationSpec {
    fn default() -> Self {
        SyntheticLocalizationSpec {
            classes: 4,
            samples: 2400,
            image_size: 32,
            channels: 3,
            patch_size: 8,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Background grey level of synthetic images.
const BACKGROUND: f64 = 0.5;

/// Class pattern value: binary stripes whose orientation (horizontal,
/// vertical, diagonal, anti-diagonal) is `class mod 4` and whose width is
/// `2 + class / 4`; channels alternate phase.
fn pattern(class: usize, ch: usize, dy: usize, dx: usize) -> f64 {
    let (y, x) = (dy as i64, dx as i64);
    let u = match class % 4 {
        0 => y,
        1 => x,
        2 => y + x,
        _ => y - x,
    };
    let width = 2 + (class / 4) as i64;
    if (u.div_euclid(width) + ch as i64).rem_euclid(2) == 0 {
        0.95
    } else {
        0.05
    }
}

/// Balanced images where class `k` is its own stripe pattern placed uniformly
/// inside quadrant `k mod 4` over a noisy grey background.
pub fn generate_synthetic(spec: &SyntheticLocalizationSpec) -> Result<Dataset> {
    let s = spec.image_size;
    if spec.classes < 2 || spec.channels == 0 || s < 2 {
        return Err(Error::config(
            "synthetic",
            "need >= 2 classes, >= 1 channel, image_size >= 2",
        ));
    }
    if spec.patch_size == 0 || spec.patch_size > s / 2 {
        return Err(Error::config(
            "synthetic.patch_size",
            format!(
                "patch {} does not fit a {}-pixel quadrant",
                spec.patch_size,
                s / 2
            ),
        ));
    }
    if spec.noise_std < 0.0 || !spec.noise_std.is_finite() {
        return Err(Error::config(
            "synthetic.noise_std",
            "must be finite and >= 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let c = spec.channels;
    let mut images = Tensor::<f64>::zeros([spec.samples, c, s, s]);
    let mut regions = Vec::with_capacity(spec.samples);
    let half = s / 2;
    for (i, &label) in labels.iter().enumerate() {
        let quadrant = (label % 4) as u8;
        let slack = half - spec.patch_size;
        let y0 = usize::from(quadrant / 2) * half + rng.gen_range(0..=slack);
        let x0 = usize::from(quadrant % 2) * half + rng.gen_range(0..=slack);
        let region = SignalRegion {
            quadrant,
            y0,
            x0,
            size: spec.patch_size,
        };
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let inside = (y0..y0 + spec.patch_size).contains(&y)
                        && (x0..x0 + spec.patch_size).contains(&x);
                    let base = if inside {
                        pattern(label, ch, y - y0, x - x0)
                    } else {
                        BACKGROUND
                    };
                    let n = if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    images.set([i, ch, y, x], (base + n).clamp(0.0, 1.0));
                }
            }
        }
        regions.push(region);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.classes,
        split: Split::Train,
        regions: Some(regions),
        coarse_labels: None,
    })
}

/// Stratified split: each class contributes `round(count · val_fraction)`
/// samples to validation, chosen by a seeded shuffle.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(
            "val_fraction",
            format!("must lie in (0, 1), got {val_fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        ds.subset(&train_idx, Split::Train),
        ds.subset(&val_idx, Split::Val),
    ))
}

/// Per-channel mean and standard deviation over all images.
pub fn channel_stats(ds: &Dataset) -> ChannelNorm {
    let [n, c, h, w] = ds.images.shape();
    let plane = h * w;
    let count = (n * plane).max(1) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, chunk) in ds.images.data().chunks(plane.max(1)).enumerate() {
        let ch = i % c;
        for &v in chunk {
            mean[ch] += v;
            sq[ch] += v * v;
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
        })
        .collect();
    ChannelNorm { mean, std }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub crop_pad: usize,
    pub hflip_p: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_pad: 4,
            hflip_p: 0.5,
        }
    }
}

/// Zero-pads by `pad` on every side and crops back to the original size at
/// offset `(dy, dx)` of the padded image.
pub fn crop_with_offset(
    img: &[f64],
    [c, h, w]: [usize; 3],
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn hflip(img: &mut [f64], [c, h, w]: [usize; 3]) {
    for row in img.chunks_mut(w).take(c * h) {
        row.reverse();
    }
}

/// Random crop (uniform offset in `0..=2·pad`) then horizontal flip with
/// probability `hflip_p`, independently per image.
pub fn augment<R: Rng + ?Sized>(
    batch: &Tensor<f64>,
    rng: &mut R,
    policy: AugmentPolicy,
) -> Tensor<f64> {
    let [n, c, h, w] = batch.shape();
    let dims = [c, h, w];
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * policy.crop_pad);
        let dx = rng.gen_range(0..=2 * policy.crop_pad);
        let flip = rng.gen_bool(policy.hflip_p.clamp(0.0, 1.0));
        let mut img = crop_with_offset(batch.sample(i), dims, policy.crop_pad, dy, dx);
        if flip {
            hflip(&mut img, dims);
        }
        data.extend(img);
    }
    Tensor::from_vec(batch.shape(), data).expect("shape preserved")
}
