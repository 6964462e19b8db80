//! Grad-CAM, attention heatmaps, attention-guided warping and PPM output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attzoom::AttentionRecord;
use crate::autodiff::Graph;
use crate::backbones::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-negative map, max-normalized to `[0, 1]`, shape `[1, 1, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor<f64>,
    pub layer: String,
    pub target_class: Option<usize>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values.at([0, 0, y, x])
    }

    /// Fraction of total mass inside rows `ys` and columns `xs`.
    pub fn mass_fraction(&self, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
        let total = self.values.sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = ys
            .flat_map(|y| xs.clone().map(move |x| (y, x)))
            .map(|(y, x)| self.at(y, x))
            .sum();
        inside / total
    }
}

/// Divides by the maximum so the peak is exactly 1; all-zero maps stay zero.
pub fn max_normalize(values: Tensor<f64>) -> Tensor<f64> {
    let max = values.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.map(|v| v / max)
    } else {
        values
    }
}

/// Bilinear resize of every plane, sampling at pixel centres with edge clamping.
pub fn resize_bilinear(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let axis = |o: usize, len_in: usize, len_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5)
            .clamp(0.0, (len_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len_in - 1);
        (i0, i1, s - i0 as f64)
    };
    Tensor::from_fn([n, c, out_h, out_w], |[b, ch, y, xo]| {
        let (y0, y1, fy) = axis(y, h, out_h);
        let (x0, x1, fx) = axis(xo, w, out_w);
        let top = x.at([b, ch, y0, x0]) * (1.0 - fx) + x.at([b, ch, y0, x1]) * fx;
        let bot = x.at([b, ch, y1, x0]) * (1.0 - fx) + x.at([b, ch, y1, x1]) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Combines an activation `[1, C, h, w]` with its gradient: channel weights are
/// spatially averaged gradients, the map is the ReLU of the weighted sum.
pub fn cam_from_activation(activation: &Tensor<f64>, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
    crate::tensor::ensure_same_shape("grad_cam", activation, grad)?;
    let [n, c, h, w] = activation.shape();
    if n != 1 {
        return Err(Error::Contract(format!(
            "grad_cam expects one sample, got {n}"
        )));
    }
    let plane = (h * w) as f64;
    let alpha: Vec<f64> = (0..c)
        .map(|ch| (0..h * w).map(|i| grad.data()[ch * h * w + i]).sum::<f64>() / plane)
        .collect();
    Ok(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        let s: f64 = (0..c)
            .map(|ch| alpha[ch] * activation.at([0, ch, y, x]))
            .sum();
        s.max(0.0)
    }))
}

/// Grad-CAM of `target_class` at `layer` (see [`Model::layer_names`]),
/// upsampled to the input resolution. `None` picks the model's default layer.
pub fn grad_cam(
    model: &Model<f64>,
    image: &Tensor<f64>,
    target_class: usize,
    layer: Option<&str>,
) -> Result<SaliencyMap> {
    let layer = layer.map_or_else(|| model.default_cam_layer(), str::to_string);
    let [n, _, h, w] = image.shape();
    if n != 1 {
        return Err(Error::Contract(format!(
            "grad_cam expects one image, got {n}"
        )));
    }
    let k = model.spec.num_classes;
    if target_class >= k {
        return Err(Error::Data(format!("target class {target_class} >= {k}")));
    }
    let mut g = Graph::new();
    let fp = model.forward(&mut g, image)?;
    let node = fp.layer(&layer).ok_or_else(|| Error::UnknownLayer {
        name: layer.clone(),
        available: fp.layers.iter().map(|(n, _)| n.clone()).collect(),
    })?;
    let onehot = g.constant(Tensor::from_fn([1, k, 1, 1], |[_, c, _, _]| {
        f64::from(u8::from(c == target_class))
    }));
    let picked = g.mul(fp.logits, onehot)?;
    let score = g.sum(picked);
    let grads = g.backward(score)?;
    let activation = g.value(node);
    let zero = Tensor::zeros(activation.shape());
    let grad = grads.get(node).unwrap_or(&zero);
    let cam = cam_from_activation(activation, grad)?;
    Ok(SaliencyMap {
        values: max_normalize(resize_bilinear(&cam, h, w)),
        layer,
        target_class: Some(target_class),
    })
}

/// The gated map `f(A)` of sample `index` in `record`, max-normalized.
pub fn attention_heatmap(record: &AttentionRecord<f64>, index: usize) -> Result<SaliencyMap> {
    let [n, _, h, w] = record.gated.shape();
    if index >= n {
        return Err(Error::Data(format!("sample {index} out of {n}")));
    }
    let values = Tensor::from_vec([1, 1, h, w], record.gated.sample(index).to_vec())?;
    Ok(SaliencyMap {
        values: max_normalize(values),
        layer: "attention".into(),
        target_class: None,
    })
}

/// Floor added to the normalized attention density so the warp stays strictly monotone.
pub const WARP_FLOOR: f64 = 0.05;

/// Axis-separable sampling grid: output column `j` samples source x
/// coordinate `xs[j]`, output row `i` samples `ys[i]`; both in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl WarpGrid {
    pub fn identity(h: usize, w: usize) -> Self {
        WarpGrid {
            xs: (0..w).map(|j| (j as f64 + 0.5) / w as f64).collect(),
            ys: (0..h).map(|i| (i as f64 + 0.5) / h as f64).collect(),
        }
    }

    /// Source `(y, x)` for output pixel `(i, j)`.
    pub fn source(&self, i: usize, j: usize) -> (f64, f64) {
        (self.ys[i], self.xs[j])
    }

    pub fn is_strictly_monotone(&self) -> bool {
        let inc = |v: &[f64]| {
            v.windows(2).all(|p| p[0] < p[1]) && v.iter().all(|c| (0.0..=1.0).contains(c))
        };
        inc(&self.xs) && inc(&self.ys)
    }
}

/// Inverse of the piecewise-linear cumulative distribution of `mass`
/// (mixed with the uniform floor), evaluated at output pixel centres.
pub fn inverse_cdf_axis(mass: &[f64]) -> Vec<f64> {
    let n = mass.len();
    let total: f64 = mass.iter().sum();
    let density: Vec<f64> = mass
        .iter()
        .map(|&m| {
            let p = if total > 0.0 {
                m / total
            } else {
                1.0 / n as f64
            };
            (1.0 - WARP_FLOOR) * p + WARP_FLOOR / n as f64
        })
        .collect();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for d in &density {
        cum.push(cum.last().copied().unwrap_or(0.0) + d);
    }
    let scale = cum[n];
    for c in &mut cum {
        *c /= scale;
    }
    (0..n)
        .map(|j| {
            let u = (j as f64 + 0.5) / n as f64;
            let k = cum.partition_point(|&c| c <= u).clamp(1, n) - 1;
            let seg = cum[k + 1] - cum[k];
            ((k as f64 + ((u - cum[k]) / seg).clamp(0.0, 1.0)) / n as f64).clamp(0.0, 1.0)
        })
        .collect()
}

/// Builds the warp grid for a saliency map at strength `lambda`.
pub fn warp_grid(saliency: &SaliencyMap, lambda: f64) -> Result<WarpGrid> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(
            "lambda",
            format!("must be finite and >= 0, got {lambda}"),
        ));
    }
    let (h, w) = (saliency.height(), saliency.width());
    let col_mass: Vec<f64> = (0..w)
        .map(|x| (0..h).map(|y| saliency.at(y, x).max(0.0)).sum())
        .collect();
    let row_mass: Vec<f64> = (0..h)
        .map(|y| (0..w).map(|x| saliency.at(y, x).max(0.0)).sum())
        .collect();
    let id = WarpGrid::identity(h, w);
    let mix = |ident: &[f64], full: Vec<f64>| -> Vec<f64> {
        ident
            .iter()
            .zip(full)
            .map(|(&u, f)| ((1.0 - lambda) * u + lambda * f).clamp(0.0, 1.0))
            .collect()
    };
    Ok(WarpGrid {
        xs: mix(&id.xs, inverse_cdf_axis(&col_mass)),
        ys: mix(&id.ys, inverse_cdf_axis(&row_mass)),
    })
}

/// Pixel-space source coordinate; values within `1e-9` of a pixel centre
/// snap to it so identity grids resample exactly.
fn to_pixel(c: f64, len: usize) -> (usize, usize, f64) {
    let mut p = (c * len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    if (p - p.round()).abs() < 1e-9 {
        p = p.round();
    }
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

/// Bilinear resampling of `image` (`[1, C, H, W]`) through `grid`.
pub fn resample(image: &Tensor<f64>, grid: &WarpGrid) -> Result<Tensor<f64>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || grid.ys.len() != h || grid.xs.len() != w {
        return Err(Error::Shape {
            op: "resample",
            lhs: image.shape().to_vec(),
            rhs: vec![1, c, grid.ys.len(), grid.xs.len()],
        });
    }
    let cols: Vec<_> = grid.xs.iter().map(|&x| to_pixel(x, w)).collect();
    let rows: Vec<_> = grid.ys.iter().map(|&y| to_pixel(y, h)).collect();
    Ok(Tensor::from_fn([1, c, h, w], |[_, ch, i, j]| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let px = |y, x| image.at([0, ch, y, x]);
        let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a * (1.0 - f) + b * f };
        lerp(
            lerp(px(y0, x0), px(y0, x1), fx),
            lerp(px(y1, x0), px(y1, x1), fx),
            fy,
        )
    }))
}

/// Expands high-saliency regions and contracts the rest. `lambda = 0` is the
/// identity, `1` the full redistribution.
pub fn warp_image(
    image: &Tensor<f64>,
    saliency: &SaliencyMap,
    lambda: f64,
) -> Result<(Tensor<f64>, WarpGrid)> {
    let [_, _, h, w] = image.shape();
    if (saliency.height(), saliency.width()) != (h, w) {
        return Err(Error::Shape {
            op: "warp_image",
            lhs: image.shape().to_vec(),
            rhs: saliency.values.shape().to_vec(),
        });
    }
    let grid = warp_grid(saliency, lambda)?;
    Ok((resample(image, &grid)?, grid))
}

/// Ramp anchors, evenly spaced over `[0, 1]`: black, purple, red, orange, pale yellow.
pub const RAMP_ANCHORS: [[u8; 3]; 5] = [
    [0, 0, 0],
    [87, 16, 110],
    [188, 55, 84],
    [249, 142, 9],
    [252, 255, 164],
];

/// The fixed 256-entry colour ramp used for saliency images.
pub fn color_ramp() -> [[u8; 3]; 256] {
    let mut ramp = [[0u8; 3]; 256];
    let segs = (RAMP_ANCHORS.len() - 1) as f64;
    for (i, entry) in ramp.iter_mut().enumerate() {
        let pos = i as f64 / 255.0 * segs;
        let k = (pos.floor() as usize).min(RAMP_ANCHORS.len() - 2);
        let f = pos - k as f64;
        for ch in 0..3 {
            let a = f64::from(RAMP_ANCHORS[k][ch]);
            let b = f64::from(RAMP_ANCHORS[k + 1][ch]);
            entry[ch] = (a + (b - a) * f).round() as u8;
        }
    }
    ramp
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB rendering (`[1, 3, h, w]`) of a saliency map through [`color_ramp`].
pub fn render_saliency(map: &SaliencyMap) -> Tensor<f64> {
    let ramp = color_ramp();
    Tensor::from_fn([1, 3, map.height(), map.width()], |[_, ch, y, x]| {
        f64::from(ramp[usize::from(to_byte(map.at(y, x)))][ch]) / 255.0
    })
}

/// Binary PPM (P6) bytes for a `[1, 3, h, w]` or `[1, 1, h, w]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::Shape {
            op: "encode_ppm",
            lhs: image.shape().to_vec(),
            rhs: vec![1, 3, h, w],
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(image.at([0, ch.min(c - 1), y, x])));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Parses a binary P6 file with maxval 255 into `[1, 3, h, w]` values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |what: &str| Error::Format {
        expected: "binary PPM (P6, maxval 255)".into(),
        actual: what.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad(&format!("magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("field `{s}`")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(&format!("maxval {max}")));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 3 * w * h {
        return Err(bad(&format!("{} payload bytes for {w}x{h}", payload.len())));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |[_, ch, y, x]| {
        f64::from(payload[(y * w + x) * 3 + ch]) / 255.0
    }))
}

/// One emitted visualization file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub sample: usize,
    pub class: usize,
    pub model: String,
    /// `input`, `gradcam`, `heatmap` or `warp`.
    pub map_type: String,
}
