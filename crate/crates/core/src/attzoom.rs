//! The Attention-Zoom layer.
//!
//! Given a feature map `F` of shape `[N, C, H, W]`:
//!
//! 1. `A = W_A * F` (single output channel, stride 1, same padding),
//! 2. `f(A) = 1` where `σ(A) ≥ threshold`, otherwise `σ(A)`,
//! 3. `F_W = F ⊙ f(A)` with the map broadcast over channels,
//! 4. `F_W^Up` places `F_W(c, h, w)` at `(c, m·h, m·w)` of an `m`-times larger
//!    grid and zero everywhere else,
//! 5. `F_E = W_E * F_W^Up`.
//!
//! The sigmoid is applied inside the gate so the pre-sigmoid map `A` stays
//! available for inspection; the computation is identical to applying it at
//! step 1 and thresholding the probabilities.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GateGradient, Graph, InitScheme, NodeId, ParamStore, Threshold};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid_scalar, ConvSpec, Tensor};

pub const W_A: &str = "W_A";
pub const B_A: &str = "b_A";
pub const W_E: &str = "W_E";
pub const B_E: &str = "b_E";
pub const T_LOGIT: &str = "t_logit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttZoomConfig {
    /// `(K_H, K_W)` of the attention kernel, both odd.
    pub attention_kernel: (usize, usize),
    pub threshold: f64,
    pub zoom_multiplier: usize,
    pub enhance_kernel: (usize, usize),
    /// `1` keeps the zoomed resolution, `zoom_multiplier` restores the input extents.
    pub enhance_stride: usize,
    /// Output channels of the enhancement conv; `None` keeps the input channel count.
    pub enhance_out_channels: Option<usize>,
    /// Learn the threshold through `t = σ(t_logit)`.
    pub learn_threshold: bool,
    pub gate_gradient: GateGradient,
    pub bias: bool,
}

impl Default for AttZoomConfig {
    fn default() -> Self {
        AttZoomConfig {
            attention_kernel: (3, 3),
            threshold: 0.5,
            zoom_multiplier: 2,
            enhance_kernel: (3, 3),
            enhance_stride: 1,
            enhance_out_channels: None,
            learn_threshold: false,
            gate_gradient: GateGradient::Exact,
            bias: true,
        }
    }
}

fn odd_pair(field: &str, (h, w): (usize, usize)) -> Result<()> {
    if h % 2 == 0 || w % 2 == 0 {
        return Err(Error::config(
            field,
            format!("kernel sides must be odd, got {h}x{w}"),
        ));
    }
    Ok(())
}

impl AttZoomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(
                "threshold",
                format!("must lie in (0, 1), got {}", self.threshold),
            ));
        }
        if self.zoom_multiplier < 2 {
            return Err(Error::config(
                "zoom_multiplier",
                format!("must be >= 2, got {}", self.zoom_multiplier),
            ));
        }
        odd_pair("attention_kernel", self.attention_kernel)?;
        odd_pair("enhance_kernel", self.enhance_kernel)?;
        if self.enhance_stride != 1 && self.enhance_stride != self.zoom_multiplier {
            return Err(Error::config(
                "enhance_stride",
                format!(
                    "must be 1 or {}, got {}",
                    self.zoom_multiplier, self.enhance_stride
                ),
            ));
        }
        if self.enhance_out_channels == Some(0) {
            return Err(Error::config("enhance_out_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.enhance_out_channels.unwrap_or(in_channels)
    }

    pub fn attention_spec(&self) -> ConvSpec {
        let (kh, kw) = self.attention_kernel;
        ConvSpec {
            out_channels: 1,
            kernel_h: kh,
            kernel_w: kw,
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            has_bias: self.bias,
        }
        .with_same_padding()
    }

    pub fn enhance_spec(&self, in_channels: usize) -> ConvSpec {
        let (kh, kw) = self.enhance_kernel;
        ConvSpec {
            out_channels: self.out_channels(in_channels),
            kernel_h: kh,
            kernel_w: kw,
            stride: self.enhance_stride,
            pad_h: 0,
            pad_w: 0,
            has_bias: self.bias,
        }
        .with_same_padding()
    }

    /// Output shape for an input of shape `[n, c, h, w]`.
    pub fn output_shape(&self, [n, c, h, w]: [usize; 4]) -> [usize; 4] {
        let m = self.zoom_multiplier;
        let (uh, uw) = (m * h, m * w);
        let (oh, ow) = if self.enhance_stride == 1 {
            (uh, uw)
        } else {
            (h, w)
        };
        [n, self.out_channels(c), oh, ow]
    }
}

/// Pre-sigmoid attention map `A = W_A * F`, stride 1, same padding.
pub fn attention_map<T: Scalar>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [o, c, kh, kw] = weights.shape();
    if o != 1 || c != features.shape()[1] {
        return Err(Error::Shape {
            op: "attention_map",
            lhs: features.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    odd_pair("attention_kernel", (kh, kw))?;
    let spec = ConvSpec {
        out_channels: 1,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        pad_h: 0,
        pad_w: 0,
        has_bias: bias.is_some(),
    }
    .with_same_padding();
    crate::tensor::conv2d(features, weights, bias, &spec)
}

/// Threshold gate: `1` where `σ(a) ≥ threshold`, otherwise `σ(a)`.
pub fn gate<T: Scalar>(a: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(
            "threshold",
            format!("must lie in (0, 1), got {threshold}"),
        ));
    }
    let t = T::lit(threshold);
    Ok(a.map(|x| {
        let s = sigmoid_scalar(x);
        if s >= t {
            T::one()
        } else {
            s
        }
    }))
}

/// Attention maps kept from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    /// Pre-sigmoid map `A`, `[N, 1, H, W]`.
    pub raw: Tensor<T>,
    /// Gated map `f(A)`, `[N, 1, H, W]`.
    pub gated: Tensor<T>,
    /// `σ(A) ≥ threshold`, in the layout of `raw`.
    pub clamp_mask: Vec<bool>,
    pub threshold: f64,
}

/// Graph nodes for each intermediate of one layer application.
#[derive(Debug, Clone, Copy)]
pub struct AttZoomNodes {
    pub attention: NodeId,
    pub gated: NodeId,
    pub weighted: NodeId,
    pub upsampled: NodeId,
    pub enhanced: NodeId,
    pub threshold: Threshold,
}

/// One AttZoom layer whose parameters live in a [`ParamStore`] under
/// `<prefix>W_A`, `<prefix>b_A`, `<prefix>W_E`, `<prefix>b_E`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttZoomLayer {
    pub config: AttZoomConfig,
    pub in_channels: usize,
    pub prefix: String,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl AttZoomLayer {
    pub fn new(
        config: AttZoomConfig,
        in_channels: usize,
        prefix: impl Into<String>,
    ) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        Ok(AttZoomLayer {
            config,
            in_channels,
            prefix: prefix.into(),
        })
    }

    pub fn name(&self, p: &str) -> String {
        format!("{}{p}", self.prefix)
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.config, self.in_channels)
    }

    /// Name, shape and initializer of every parameter, in registration order.
    /// Weights are He-normal; the attention bias starts at
    /// `logit(threshold) + 1` so the gate is mostly open; the enhancement
    /// bias starts at zero.
    pub fn param_layout(&self) -> Vec<(String, [usize; 4], InitScheme)> {
        let c = self.in_channels;
        let cfg = &self.config;
        let (kh, kw) = cfg.attention_kernel;
        let (eh, ew) = cfg.enhance_kernel;
        let co = cfg.out_channels(c);
        let mut out = vec![(
            self.name(W_A),
            [1, c, kh, kw],
            // Window mean of the features, so attention starts out tracking activation energy.
            InitScheme::Constant(1.0 / (c * kh * kw) as f64),
        )];
        if cfg.bias {
            // One logit below the threshold, so gates start on the differentiable branch.
            out.push((
                self.name(B_A),
                [1, 1, 1, 1],
                InitScheme::Constant(logit(cfg.threshold) - 1.0),
            ));
        }
        out.push((
            self.name(W_E),
            [co, c, eh, ew],
            // Only one in m² upsampled positions is nonzero.
            InitScheme::HeNormal {
                fan_in: (c * eh * ew / (cfg.zoom_multiplier * cfg.zoom_multiplier)).max(1),
            },
        ));
        if cfg.bias {
            out.push((self.name(B_E), [1, co, 1, 1], InitScheme::Constant(0.0)));
        }
        if cfg.learn_threshold {
            out.push((
                self.name(T_LOGIT),
                [1, 1, 1, 1],
                InitScheme::Constant(logit(cfg.threshold)),
            ));
        }
        out
    }

    /// Registers freshly initialized parameters per [`Self::param_layout`].
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        for (name, shape, init) in self.param_layout() {
            store.insert(name, init_tensor(shape, init, rng), init)?;
        }
        Ok(())
    }

    /// Records the layer on `g`, consuming the feature map node `input`.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        input: NodeId,
    ) -> Result<AttZoomNodes> {
        let [_, c, _, _] = g.value(input).shape();
        if c != self.in_channels {
            return Err(Error::Shape {
                op: "attzoom",
                lhs: g.value(input).shape().to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let cfg = &self.config;
        let wa = g.param(params, &self.name(W_A))?;
        let ba = cfg
            .bias
            .then(|| g.param(params, &self.name(B_A)))
            .transpose()?;
        let attention = g.conv2d(input, wa, ba, cfg.attention_spec())?;

        let threshold = if cfg.learn_threshold {
            let tl = g.param(params, &self.name(T_LOGIT))?;
            Threshold::Node(g.sigmoid(tl))
        } else {
            Threshold::Fixed(cfg.threshold)
        };
        let gated = g.gate(attention, threshold, cfg.gate_gradient)?;
        let weighted = g.mul_broadcast(input, gated)?;
        let upsampled = g.upsample_zeros(weighted, cfg.zoom_multiplier)?;

        let we = g.param(params, &self.name(W_E))?;
        let be = cfg
            .bias
            .then(|| g.param(params, &self.name(B_E)))
            .transpose()?;
        let enhanced = g.conv2d(upsampled, we, be, cfg.enhance_spec(c))?;
        Ok(AttZoomNodes {
            attention,
            gated,
            weighted,
            upsampled,
            enhanced,
            threshold,
        })
    }

    /// Extracts the attention record for nodes produced by [`Self::apply`].
    pub fn record<T: Scalar>(&self, g: &Graph<T>, nodes: &AttZoomNodes) -> AttentionRecord<T> {
        let threshold = match nodes.threshold {
            Threshold::Fixed(t) => t,
            Threshold::Node(n) => g.value(n).data()[0].as_f64(),
        };
        let raw = g.value(nodes.attention).clone();
        let t = T::lit(threshold);
        let clamp_mask = raw.data().iter().map(|&a| sigmoid_scalar(a) >= t).collect();
        AttentionRecord {
            raw,
            gated: g.value(nodes.gated).clone(),
            clamp_mask,
            threshold,
        }
    }

    /// Inference-only forward pass on tensors.
    pub fn forward<T: Scalar>(
        &self,
        features: &Tensor<T>,
        params: &ParamStore<T>,
    ) -> Result<(Tensor<T>, AttentionRecord<T>)> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let nodes = self.apply(&mut g, params, x)?;
        let rec = self.record(&g, &nodes);
        Ok((g.value(nodes.enhanced).clone(), rec))
    }

    /// Writes `W_A.bin`, `b_A.bin`, `W_E.bin`, `b_E.bin` (without prefix) and
    /// an `attzoom.json` sidecar holding the config and channel count.
    pub fn save<T: Scalar>(&self, params: &ParamStore<T>, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut local = ParamStore::<T>::new();
        for p in params.iter().filter(|p| p.name.starts_with(&self.prefix)) {
            local.insert(&p.name[self.prefix.len()..], p.value.clone(), p.init)?;
        }
        local.save_dir(dir)?;
        let sidecar = LayerSidecar {
            in_channels: self.in_channels,
            config: self.config.clone(),
        };
        let path = dir.join("attzoom.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    /// Inverse of [`Self::save`]; the loaded parameters carry `prefix`.
    pub fn load<T: Scalar>(dir: impl AsRef<Path>, prefix: &str) -> Result<(Self, ParamStore<T>)> {
        let dir = dir.as_ref();
        let path = dir.join("attzoom.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: LayerSidecar = serde_json::from_slice(&bytes)?;
        let layer = AttZoomLayer::new(sidecar.config, sidecar.in_channels, prefix)?;
        let mut local = ParamStore::<T>::new();
        for (name, shape, init) in layer.param_layout() {
            local.insert(&name[prefix.len()..], Tensor::zeros(shape), init)?;
        }
        local.load_dir(dir)?;
        let mut store = ParamStore::new();
        for p in local.iter() {
            store.insert(format!("{prefix}{}", p.name), p.value.clone(), p.init)?;
        }
        Ok((layer, store))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSidecar {
    in_channels: usize,
    config: AttZoomConfig,
}

/// Draws a tensor for `init`; `External` yields zeros.
pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: [usize; 4],
    init: InitScheme,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        InitScheme::HeNormal { fan_in } => {
            Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
        }
        InitScheme::Constant(v) => Tensor::full(shape, T::lit(v)),
        InitScheme::External => Tensor::zeros(shape),
    }
}

/// Exact parameter count of one layer on `in_channels` input channels:
/// `C·K_H·K_W (+1) + C'·C·k_h·k_w (+C')`, plus one when the threshold is learned.
pub fn param_count(config: &AttZoomConfig, in_channels: usize) -> usize {
    let c = in_channels;
    let (kh, kw) = config.attention_kernel;
    let (eh, ew) = config.enhance_kernel;
    let co = config.out_channels(c);
    let bias = usize::from(config.bias);
    c * kh * kw + bias + co * c * eh * ew + bias * co + usize::from(config.learn_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T64 = Tensor<f64>;

    fn layer_with(cfg: AttZoomConfig, c: usize, seed: u64) -> (AttZoomLayer, ParamStore<f64>) {
        let layer = AttZoomLayer::new(cfg, c, "").unwrap();
        let mut ps = ParamStore::new();
        layer
            .init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        (layer, ps)
    }

    #[test]
    fn param_count_fixtures() {
        assert_eq!(param_count(&AttZoomConfig::default(), 3), 112);
        let tiny = AttZoomConfig {
            attention_kernel: (1, 1),
            enhance_kernel: (1, 1),
            bias: false,
            ..Default::default()
        };
        assert_eq!(param_count(&tiny, 1), 2);
        assert_eq!(
            param_count(&AttZoomConfig::default(), 64),
            576 + 1 + 36864 + 64
        );
        let (layer, ps) = layer_with(AttZoomConfig::default(), 5, 0);
        assert_eq!(ps.numel(), layer.param_count());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = AttZoomConfig {
            threshold: 1.5,
            ..Default::default()
        };
        let e = bad.validate().unwrap_err();
        assert!(e.to_string().contains("threshold"));
        for cfg in [
            AttZoomConfig {
                zoom_multiplier: 1,
                ..Default::default()
            },
            AttZoomConfig {
                attention_kernel: (2, 3),
                ..Default::default()
            },
            AttZoomConfig {
                enhance_stride: 3,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: AttZoomConfig = serde_json::from_str(r#"{"threshold": 0.3}"#).unwrap();
        assert_eq!(ok.threshold, 0.3);
        assert_eq!(ok.zoom_multiplier, 2);
        assert!(serde_json::from_str::<AttZoomConfig>(r#"{"thresh": 0.3}"#).is_err());
    }

    #[test]
    fn attention_map_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = T64::randn([2, 3, 4, 5], 1.0, &mut rng);
        let a = attention_map(
            &f,
            &T64::zeros([1, 3, 3, 3]),
            Some(&T64::zeros([1, 1, 1, 1])),
        )
        .unwrap();
        assert_eq!(a, T64::zeros([2, 1, 4, 5]));
        let f1 = T64::randn([1, 1, 4, 4], 1.0, &mut rng);
        assert_eq!(
            attention_map(&f1, &T64::ones([1, 1, 1, 1]), None).unwrap(),
            f1
        );
        assert!(matches!(
            attention_map(&f, &T64::zeros([1, 2, 3, 3]), None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gate_fixtures() {
        let a = T64::from_vec([1, 1, 1, 2], vec![0.0, -1.0]).unwrap();
        let f = gate(&a, 0.5).unwrap();
        assert_eq!(f.data()[0], 1.0);
        assert!((f.data()[1] - 0.268941).abs() < 1e-6);
        let bounded = T64::from_vec([1, 1, 1, 4], vec![-5.0, -0.3, 2.0, 9.0]).unwrap();
        let f = gate(&bounded, 0.999999).unwrap();
        for (&x, &y) in bounded.data().iter().zip(f.data()) {
            assert_eq!(y, sigmoid_scalar(x));
        }
        assert!(gate(&a, 0.0).is_err() && gate(&a, 1.0).is_err());
    }

    #[test]
    fn saturated_gate_with_center_kernel_is_pure_zero_insertion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 2;
        let (layer, mut ps) = layer_with(AttZoomConfig::default(), c, 1);
        let f = T64::rand_uniform([1, c, 3, 4], 0.1, 1.0, &mut rng);
        *ps.get_mut(W_A).unwrap() = T64::full([1, c, 3, 3], 50.0);
        *ps.get_mut(B_A).unwrap() = T64::zeros([1, 1, 1, 1]);
        let mut we = T64::zeros([c, c, 3, 3]);
        for i in 0..c {
            we.set([i, i, 1, 1], 1.0);
        }
        *ps.get_mut(W_E).unwrap() = we;
        *ps.get_mut(B_E).unwrap() = T64::zeros([1, c, 1, 1]);
        let (out, rec) = layer.forward(&f, &ps).unwrap();
        assert!(rec.clamp_mask.iter().all(|&b| b));
        assert_eq!(out, crate::tensor::upsample_zeros(&f, 2).unwrap());
    }

    #[test]
    fn closed_gate_bounds_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 3;
        let (layer, mut ps) = layer_with(AttZoomConfig::default(), c, 2);
        let f = T64::rand_uniform([1, c, 4, 4], 0.0, 1.0, &mut rng);
        *ps.get_mut(W_A).unwrap() = T64::full([1, c, 3, 3], -10.0);
        *ps.get_mut(B_A).unwrap() = T64::zeros([1, 1, 1, 1]);
        *ps.get_mut(B_E).unwrap() = T64::zeros([1, c, 1, 1]);
        let (out, rec) = layer.forward(&f, &ps).unwrap();
        let eps = rec.gated.data().iter().cloned().fold(0.0, f64::max);
        assert!(eps < 1e-10);
        let w1: f64 = ps.get(W_E).unwrap().data().iter().map(|v| v.abs()).sum();
        let fmax = f.max_abs();
        assert!(out.max_abs() <= w1 * eps * fmax);
    }

    #[test]
    fn output_shapes_follow_stride_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (m, stride) in [(2, 1), (2, 2), (3, 1), (3, 3), (4, 4)] {
            let cfg = AttZoomConfig {
                zoom_multiplier: m,
                enhance_stride: stride,
                enhance_out_channels: Some(5),
                ..Default::default()
            };
            let (layer, ps) = layer_with(cfg.clone(), 2, 3);
            let f = T64::randn([2, 2, 5, 3], 1.0, &mut rng);
            let (out, _) = layer.forward(&f, &ps).unwrap();
            assert_eq!(out.shape(), cfg.output_shape([2, 2, 5, 3]));
            let expect = if stride == 1 {
                [2, 5, 5 * m, 3 * m]
            } else {
                [2, 5, 5, 3]
            };
            assert_eq!(out.shape(), expect);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AttZoomConfig {
            threshold: 0.4,
            ..Default::default()
        };
        let layer = AttZoomLayer::new(cfg, 3, "attzoom.0.").unwrap();
        let mut ps = ParamStore::<f64>::new();
        layer
            .init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        layer.save(&ps, dir.path()).unwrap();
        for f in ["W_A.bin", "b_A.bin", "W_E.bin", "b_E.bin", "attzoom.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (back, store) = AttZoomLayer::load::<f64>(dir.path(), "attzoom.0.").unwrap();
        assert_eq!(back, layer);
        for p in ps.iter() {
            assert_eq!(store.get(&p.name).unwrap(), &p.value);
        }
    }
}
