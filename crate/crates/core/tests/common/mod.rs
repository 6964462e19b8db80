//! Naive nested-loop reference implementations shared by the integration
//! tests. They only read tensors through `shape()` and `data()` and never call
//! the library's ops.
#![allow(dead_code)]

use attzoom_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense NCHW array used by the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Arr {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Arr {
            shape: t.shape(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(self.shape, self.data.clone()).unwrap()
    }

    pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        Arr {
            shape,
            data: (0..shape.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }
}

/// Direct cross-correlation with zero padding.
pub fn conv(
    x: &Arr,
    w: &Arr,
    bias: Option<&[f64]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Arr {
    let [n, c, h, wd] = x.shape;
    let [o, wc, kh, kw] = w.shape;
    assert_eq!(c, wc);
    let oh = (h + 2 * pad_h - kh) / stride + 1;
    let ow = (wd + 2 * pad_w - kw) / stride + 1;
    let mut out = Arr::zeros([n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc +=
                                    w.get(oc, ic, ky, kx) * x.get(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gate(a: &Arr, threshold: f64) -> Arr {
    Arr {
        shape: a.shape,
        data: a
            .data
            .iter()
            .map(|&v| {
                let s = sigmoid(v);
                if s >= threshold {
                    1.0
                } else {
                    s
                }
            })
            .collect(),
    }
}

/// `F ⊙ f` with the single-channel map repeated over channels.
pub fn mask(f: &Arr, g: &Arr) -> Arr {
    let [n, c, h, w] = f.shape;
    let mut out = Arr::zeros(f.shape);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(b, ch, y, x, f.get(b, ch, y, x) * g.get(b, 0, y, x));
                }
            }
        }
    }
    out
}

pub fn zero_insert(x: &Arr, m: usize) -> Arr {
    let [n, c, h, w] = x.shape;
    let mut out = Arr::zeros([n, c, m * h, m * w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(b, ch, m * y, m * xx, x.get(b, ch, y, xx));
                }
            }
        }
    }
    out
}

/// Squeeze-and-excitation with dense weights given as `[out][in]` rows.
pub fn se(x: &Arr, w1: &[Vec<f64>], b1: &[f64], w2: &[Vec<f64>], b2: &[f64]) -> Arr {
    let [n, c, h, w] = x.shape;
    let mut out = Arr::zeros(x.shape);
    for b in 0..n {
        let mut pooled = vec![0.0; c];
        for (ch, p) in pooled.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.get(b, ch, y, xx);
                }
            }
            *p = s / (h * w) as f64;
        }
        let hidden: Vec<f64> = w1
            .iter()
            .zip(b1)
            .map(|(row, bias)| {
                (row.iter().zip(&pooled).map(|(a, p)| a * p).sum::<f64>() + bias).max(0.0)
            })
            .collect();
        for ch in 0..c {
            let e = w2[ch].iter().zip(&hidden).map(|(a, v)| a * v).sum::<f64>() + b2[ch];
            let s = sigmoid(e);
            for y in 0..h {
                for xx in 0..w {
                    out.set(b, ch, y, xx, x.get(b, ch, y, xx) * s);
                }
            }
        }
    }
    out
}

/// Parameters of one AttZoom instance in oracle form.
pub struct ZoomParams<'a> {
    pub w_a: &'a Arr,
    pub b_a: Option<f64>,
    pub w_e: &'a Arr,
    pub b_e: Option<&'a [f64]>,
    pub threshold: f64,
    pub m: usize,
    pub enhance_stride: usize,
}

/// Attention conv, gate, mask, zero insertion and enhancement conv, each
/// computed by the primitives above. Returns `(A, f(A), F_W, F_W^Up, F_E)`.
pub fn attzoom(x: &Arr, p: &ZoomParams) -> (Arr, Arr, Arr, Arr, Arr) {
    let [_, _, kh, kw] = p.w_a.shape;
    let b_a = p.b_a.map(|b| vec![b]);
    let a = conv(x, p.w_a, b_a.as_deref(), 1, (kh - 1) / 2, (kw - 1) / 2);
    let f = gate(&a, p.threshold);
    let fw = mask(x, &f);
    let up = zero_insert(&fw, p.m);
    let [_, _, eh, ew] = p.w_e.shape;
    let fe = conv(
        &up,
        p.w_e,
        p.b_e,
        p.enhance_stride,
        (eh - 1) / 2,
        (ew - 1) / 2,
    );
    (a, f, fw, up, fe)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
