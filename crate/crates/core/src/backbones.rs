//! Desk-scale CNN backbones with declarative AttZoom insertion points.
//!
//! Every architecture is a list of stages followed by global average pooling
//! and a dense head, so any zoom multiplier still yields valid logits. An
//! insertion at stage `k` consumes stage `k`'s output unchanged and feeds the
//! next stage.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attzoom::{init_tensor, AttZoomConfig, AttZoomLayer, AttZoomNodes, AttentionRecord};
use crate::autodiff::{Graph, InitScheme, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn,
    MiniResnet,
    MiniSeResnet,
}

impl Architecture {
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Architecture::TinyCnn => vec![8, 16, 32],
            Architecture::MiniResnet | Architecture::MiniSeResnet => vec![64, 128, 256, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeBlockSpec {
    pub reduction: usize,
}

impl Default for SeBlockSpec {
    fn default() -> Self {
        SeBlockSpec { reduction: 16 }
    }
}

impl SeBlockSpec {
    /// `max(4, channels / reduction)`.
    pub fn hidden_width(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Insertion {
    pub stage: usize,
    #[serde(default)]
    pub config: AttZoomConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub attzoom_insertions: Vec<Insertion>,
    #[serde(default)]
    pub seed: u64,
    /// Per-stage channel widths; `None` uses the architecture defaults.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub se: SeBlockSpec,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelSpec {
            architecture,
            num_classes,
            input_shape,
            attzoom_insertions: Vec::new(),
            seed: 0,
            widths: None,
            se: SeBlockSpec::default(),
        }
    }

    pub fn with_insertion(mut self, stage: usize, config: AttZoomConfig) -> Self {
        self.attzoom_insertions.push(Insertion { stage, config });
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = Some(widths);
        self
    }

    /// The same spec without any AttZoom layers.
    pub fn baseline(&self) -> Self {
        ModelSpec {
            attzoom_insertions: Vec::new(),
            ..self.clone()
        }
    }
}

/// Squeeze-and-excitation: global pool, dense, ReLU, dense, sigmoid, channel scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl SeBlock {
    pub fn new(channels: usize, spec: SeBlockSpec, prefix: impl Into<String>) -> Self {
        SeBlock {
            channels,
            hidden: spec.hidden_width(channels),
            prefix: prefix.into(),
        }
    }

    pub fn param_layout(&self) -> Vec<(String, Shape, InitScheme)> {
        let (c, h) = (self.channels, self.hidden);
        vec![
            (
                format!("{}fc1.W", self.prefix),
                [h, c, 1, 1],
                InitScheme::HeNormal { fan_in: c },
            ),
            (
                format!("{}fc1.b", self.prefix),
                [1, h, 1, 1],
                InitScheme::Constant(0.0),
            ),
            (
                format!("{}fc2.W", self.prefix),
                [c, h, 1, 1],
                InitScheme::HeNormal { fan_in: h },
            ),
            (
                format!("{}fc2.b", self.prefix),
                [1, c, 1, 1],
                InitScheme::Constant(0.0),
            ),
        ]
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = &self.prefix;
        let squeeze = g.global_avg_pool(x)?;
        let w1 = g.param(params, &format!("{p}fc1.W"))?;
        let b1 = g.param(params, &format!("{p}fc1.b"))?;
        let h = g.dense(squeeze, w1, Some(b1))?;
        let h = g.relu(h);
        let w2 = g.param(params, &format!("{p}fc2.W"))?;
        let b2 = g.param(params, &format!("{p}fc2.b"))?;
        let e = g.dense(h, w2, Some(b2))?;
        let s = g.sigmoid(e);
        g.channel_scale(x, s)
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = self.apply(&mut g, params, xi)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum StageKind {
    /// conv 3×3 → ReLU → optional 2×2 max pool.
    Conv { conv: ConvSpec, pool: bool },
    /// Two 3×3 convs with a skip connection; the skip is a strided 1×1
    /// projection when the shape changes.
    Residual {
        conv1: ConvSpec,
        conv2: ConvSpec,
        project: Option<ConvSpec>,
        se: Option<SeBlock>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    kind: StageKind,
    in_channels: usize,
    out_channels: usize,
}

impl Stage {
    fn output_shape(&self, [n, _, h, w]: Shape) -> Option<Shape> {
        match &self.kind {
            StageKind::Conv { conv, pool } => {
                let (oh, ow) = conv.output_hw(h, w)?;
                if *pool {
                    (oh >= 2 && ow >= 2).then_some([n, self.out_channels, oh / 2, ow / 2])
                } else {
                    Some([n, self.out_channels, oh, ow])
                }
            }
            StageKind::Residual { conv1, .. } => {
                let (oh, ow) = conv1.output_hw(h, w)?;
                Some([n, self.out_channels, oh, ow])
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        match &self.kind {
            StageKind::Conv { pool: true, .. } => "conv+pool",
            StageKind::Conv { pool: false, .. } => "conv",
            StageKind::Residual { se: Some(_), .. } => "residual+se",
            StageKind::Residual { se: None, .. } => "residual",
        }
    }
}

fn stage_param_layout(k: usize, stage: &Stage) -> Vec<(String, Shape, InitScheme)> {
    let conv = |name: &str, spec: &ConvSpec, cin: usize| {
        let mut v = vec![(
            format!("stage{k}.{name}.W"),
            spec.weight_shape(cin),
            InitScheme::HeNormal {
                fan_in: cin * spec.kernel_h * spec.kernel_w,
            },
        )];
        if spec.has_bias {
            v.push((
                format!("stage{k}.{name}.b"),
                [1, spec.out_channels, 1, 1],
                InitScheme::Constant(0.0),
            ));
        }
        v
    };
    match &stage.kind {
        StageKind::Conv { conv: spec, .. } => conv("conv", spec, stage.in_channels),
        StageKind::Residual {
            conv1,
            conv2,
            project,
            se,
        } => {
            let mut v = conv("conv1", conv1, stage.in_channels);
            v.extend(conv("conv2", conv2, stage.out_channels));
            if let Some(se) = se {
                v.extend(se.param_layout());
            }
            if let Some(p) = project {
                v.extend(conv("proj", p, stage.in_channels));
            }
            v
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive one RNG stream per parameter name.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Per-channel affine normalization applied to raw `[0, 1]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.shape();
        if c != self.mean.len() || c != self.std.len() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let plane = (h * w).max(1);
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

/// Node handles produced by one [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: NodeId,
    pub logits: NodeId,
    /// Named 4-D activations in evaluation order (`stage{k}`, `attzoom{k}`).
    pub layers: Vec<(String, NodeId)>,
    pub attention: Vec<(usize, AttZoomNodes)>,
}

impl ForwardPass {
    pub fn layer(&self, name: &str) -> Option<NodeId> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

/// Attention records keyed by the stage they follow.
pub type StageRecords<T> = Vec<(usize, AttentionRecord<T>)>;

/// A built backbone: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub normalization: Option<ChannelNorm>,
    stages: Vec<Stage>,
    insertions: Vec<Option<AttZoomLayer>>,
    head_in: usize,
}

fn conv3(out: usize) -> ConvSpec {
    ConvSpec::same(out, 3)
}

fn build_stages(spec: &ModelSpec) -> Result<Vec<Stage>> {
    let widths = spec
        .widths
        .clone()
        .unwrap_or_else(|| spec.architecture.default_widths());
    let expected = spec.architecture.default_widths().len();
    if widths.len() != expected || widths.contains(&0) {
        return Err(Error::config(
            "model.widths",
            format!("need {expected} positive widths, got {widths:?}"),
        ));
    }
    let cin = spec.input_shape[0];
    let stages = match spec.architecture {
        Architecture::TinyCnn => {
            let pools = [true, true, false];
            let mut prev = cin;
            widths
                .iter()
                .zip(pools)
                .map(|(&w, pool)| {
                    let s = Stage {
                        kind: StageKind::Conv {
                            conv: conv3(w),
                            pool,
                        },
                        in_channels: prev,
                        out_channels: w,
                    };
                    prev = w;
                    s
                })
                .collect()
        }
        Architecture::MiniResnet | Architecture::MiniSeResnet => {
            let with_se = spec.architecture == Architecture::MiniSeResnet;
            let mut stages = vec![Stage {
                kind: StageKind::Conv {
                    conv: conv3(widths[0]),
                    pool: false,
                },
                in_channels: cin,
                out_channels: widths[0],
            }];
            let strides = [2, 2, 1];
            for (k, (&w, stride)) in widths[1..].iter().zip(strides).enumerate() {
                let prev = widths[k];
                let project =
                    (prev != w || stride != 1).then(|| ConvSpec::same(w, 1).with_stride(stride));
                stages.push(Stage {
                    kind: StageKind::Residual {
                        conv1: conv3(w).with_stride(stride),
                        conv2: conv3(w),
                        project,
                        se: with_se
                            .then(|| SeBlock::new(w, spec.se, format!("stage{}.se.", k + 1))),
                    },
                    in_channels: prev,
                    out_channels: w,
                });
            }
            stages
        }
    };
    Ok(stages)
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Every parameter draws from its own RNG
    /// stream keyed by `(seed, name)`, so adding AttZoom layers leaves all
    /// shared parameters bitwise unchanged.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::config(
                "model.num_classes",
                "need at least 2 classes",
            ));
        }
        let [c, h, w] = spec.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(
                "model.input_shape",
                format!("{:?} has an empty extent", spec.input_shape),
            ));
        }
        let stages = build_stages(spec)?;
        let mut insertions: Vec<Option<AttZoomLayer>> = vec![None; stages.len()];
        for (i, ins) in spec.attzoom_insertions.iter().enumerate() {
            let k = ins.stage;
            if k >= stages.len() {
                return Err(Error::Build {
                    stage: k,
                    reason: format!("architecture has {} stages", stages.len()),
                });
            }
            if insertions[k].is_some() {
                return Err(Error::Build {
                    stage: k,
                    reason: "more than one AttZoom layer at this stage".into(),
                });
            }
            ins.config.validate().map_err(|e| Error::Build {
                stage: k,
                reason: format!("insertion {i}: {e}"),
            })?;
            insertions[k] = Some(AttZoomLayer::new(
                ins.config.clone(),
                stages[k].out_channels,
                format!("attzoom.{k}."),
            )?);
        }

        // Shape propagation validates every insertion against its consumer.
        let mut shape = [1, c, h, w];
        for (k, stage) in stages.iter().enumerate() {
            if shape[1] != stage.in_channels {
                return Err(Error::Build {
                    stage: k,
                    reason: format!(
                        "expects {} input channels, receives {}",
                        stage.in_channels, shape[1]
                    ),
                });
            }
            shape = stage.output_shape(shape).ok_or_else(|| Error::Build {
                stage: k,
                reason: format!("input extents {:?} too small", &shape[2..]),
            })?;
            if let Some(layer) = &insertions[k] {
                shape = layer.config.output_shape(shape);
            }
        }
        let head_in = shape[1];

        let mut layout: Vec<(String, Shape, InitScheme)> = Vec::new();
        for (k, stage) in stages.iter().enumerate() {
            layout.extend(stage_param_layout(k, stage));
            if let Some(layer) = &insertions[k] {
                layout.extend(layer.param_layout());
            }
        }
        layout.push((
            "head.W".into(),
            [spec.num_classes, head_in, 1, 1],
            InitScheme::HeNormal { fan_in: head_in },
        ));
        layout.push((
            "head.b".into(),
            [1, spec.num_classes, 1, 1],
            InitScheme::Constant(0.0),
        ));

        let mut params = ParamStore::new();
        for (name, shape, init) in layout {
            let mut rng = param_rng(spec.seed, &name);
            let value = init_tensor(shape, init, &mut rng);
            params.insert(name, value, init)?;
        }
        Ok(Model {
            spec: spec.clone(),
            params,
            normalization: None,
            stages,
            insertions,
            head_in,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn attzoom_layers(&self) -> impl Iterator<Item = (usize, &AttZoomLayer)> {
        self.insertions
            .iter()
            .enumerate()
            .filter_map(|(k, l)| l.as_ref().map(|l| (k, l)))
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Names of the 4-D activations Grad-CAM can target, in order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for k in 0..self.stages.len() {
            v.push(format!("stage{k}"));
            if self.insertions[k].is_some() {
                v.push(format!("attzoom{k}"));
            }
        }
        v
    }

    /// The stage following the last AttZoom insertion, or the last stage for
    /// baselines (falls back to the insertion itself when it is last).
    pub fn default_cam_layer(&self) -> String {
        match self.attzoom_layers().last() {
            Some((k, _)) if k + 1 < self.stages.len() => format!("stage{}", k + 1),
            Some((k, _)) => format!("attzoom{k}"),
            None => format!("stage{}", self.stages.len() - 1),
        }
    }

    fn conv(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        k: usize,
        name: &str,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let w = g.param(&self.params, &format!("stage{k}.{name}.W"))?;
        let b = spec
            .has_bias
            .then(|| g.param(&self.params, &format!("stage{k}.{name}.b")))
            .transpose()?;
        g.conv2d(x, w, b, *spec)
    }

    fn stage(&self, g: &mut Graph<T>, x: NodeId, k: usize) -> Result<NodeId> {
        match &self.stages[k].kind {
            StageKind::Conv { conv, pool } => {
                let y = self.conv(g, x, k, "conv", conv)?;
                let y = g.relu(y);
                if *pool {
                    g.max_pool2(y)
                } else {
                    Ok(y)
                }
            }
            StageKind::Residual {
                conv1,
                conv2,
                project,
                se,
            } => {
                let y = self.conv(g, x, k, "conv1", conv1)?;
                let y = g.relu(y);
                let mut y = self.conv(g, y, k, "conv2", conv2)?;
                if let Some(se) = se {
                    y = se.apply(g, &self.params, y)?;
                }
                let skip = match project {
                    Some(p) => self.conv(g, x, k, "proj", p)?,
                    None => x,
                };
                let sum = g.add(y, skip)?;
                Ok(g.relu(sum))
            }
        }
    }

    /// Records the forward pass for a raw (unnormalized) input batch.
    pub fn forward(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<ForwardPass> {
        let [_, c, h, w] = input.shape();
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::Shape {
                op: "model input",
                lhs: input.shape().to_vec(),
                rhs: self.spec.input_shape.to_vec(),
            });
        }
        let x = match &self.normalization {
            Some(norm) => norm.apply(input)?,
            None => input.clone(),
        };
        let input = g.constant(x);
        let mut x = input;
        let mut layers = Vec::new();
        let mut attention = Vec::new();
        for k in 0..self.stages.len() {
            x = self.stage(g, x, k)?;
            layers.push((format!("stage{k}"), x));
            if let Some(layer) = &self.insertions[k] {
                let nodes = layer.apply(g, &self.params, x)?;
                x = nodes.enhanced;
                layers.push((format!("attzoom{k}"), x));
                attention.push((k, nodes));
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let hw = g.param(&self.params, "head.W")?;
        let hb = g.param(&self.params, "head.b")?;
        let logits = g.dense(pooled, hw, Some(hb))?;
        Ok(ForwardPass {
            input,
            logits,
            layers,
            attention,
        })
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, input)?;
        Ok(g.value(fp.logits).clone())
    }

    /// Logits plus the attention record of every AttZoom layer.
    pub fn predict_with_attention(
        &self,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, StageRecords<T>)> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, input)?;
        let recs = fp
            .attention
            .iter()
            .map(|(k, nodes)| {
                let layer = self.insertions[*k].as_ref().expect("insertion present");
                (*k, layer.record(&g, nodes))
            })
            .collect();
        Ok((g.value(fp.logits).clone(), recs))
    }

    /// Text table of stages with input/output shapes and parameter counts.
    pub fn summary(&self) -> String {
        let [c, h, w] = self.spec.input_shape;
        let mut shape = [1, c, h, w];
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<12} {:<16} {:<16} {:>10}",
            "layer", "kind", "input", "output", "params"
        );
        let count = |prefix: &str| -> usize {
            self.params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .map(|p| p.value.len())
                .sum()
        };
        let fmt_shape = |s: Shape| format!("{}x{}x{}", s[1], s[2], s[3]);
        for (k, stage) in self.stages.iter().enumerate() {
            let next = stage.output_shape(shape).expect("validated at build");
            let _ = writeln!(
                out,
                "{:<10} {:<12} {:<16} {:<16} {:>10}",
                format!("stage{k}"),
                stage.kind_name(),
                fmt_shape(shape),
                fmt_shape(next),
                count(&format!("stage{k}.")),
            );
            shape = next;
            if let Some(layer) = &self.insertions[k] {
                let next = layer.config.output_shape(shape);
                let _ = writeln!(
                    out,
                    "{:<10} {:<12} {:<16} {:<16} {:>10}",
                    format!("attzoom{k}"),
                    format!("attzoom x{}", layer.config.zoom_multiplier),
                    fmt_shape(shape),
                    fmt_shape(next),
                    layer.param_count(),
                );
                shape = next;
            }
        }
        let _ = writeln!(
            out,
            "{:<10} {:<12} {:<16} {:<16} {:>10}",
            "head",
            "gap+dense",
            fmt_shape(shape),
            format!("{}", self.spec.num_classes),
            count("head."),
        );
        let _ = writeln!(out, "total parameters: {}", self.param_count());
        out
    }

    pub fn head_in_channels(&self) -> usize {
        self.head_in
    }

    /// Writes `model.json`, optional `normalization.json` and one
    /// `<param>.bin` per parameter into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save_dir(dir)?;
        let path = dir.join("model.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.spec)?)
            .map_err(|e| Error::io(&path, e))?;
        if let Some(norm) = &self.normalization {
            let path = dir.join("normalization.json");
            std::fs::write(&path, serde_json::to_vec_pretty(norm)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let spec: ModelSpec = serde_json::from_slice(&bytes)?;
        let mut model = Model::build(&spec)?;
        model.params.load_dir(dir)?;
        let norm_path = dir.join("normalization.json");
        if norm_path.exists() {
            let bytes = std::fs::read(&norm_path).map_err(|e| Error::io(&norm_path, e))?;
            model.normalization = Some(serde_json::from_slice(&bytes)?);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(insert: bool) -> ModelSpec {
        let spec = ModelSpec::new(Architecture::TinyCnn, 10, [3, 32, 32]).with_seed(7);
        if insert {
            spec.with_insertion(0, AttZoomConfig::default())
        } else {
            spec
        }
    }

    #[test]
    fn tiny_cnn_shapes_with_and_without_attzoom() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::rand_uniform([4, 3, 32, 32], 0.0, 1.0, &mut rng);
        let base = Model::<f64>::build(&tiny(false)).unwrap();
        assert_eq!(base.predict(&x).unwrap().shape(), [4, 10, 1, 1]);

        let zoom = Model::<f64>::build(&tiny(true)).unwrap();
        let mut g = Graph::new();
        let fp = zoom.forward(&mut g, &x).unwrap();
        assert_eq!(g.value(fp.layer("stage0").unwrap()).shape(), [4, 8, 16, 16]);
        assert_eq!(
            g.value(fp.layer("attzoom0").unwrap()).shape(),
            [4, 8, 32, 32]
        );
        assert_eq!(
            g.value(fp.layer("stage1").unwrap()).shape(),
            [4, 16, 16, 16]
        );
        assert_eq!(g.value(fp.logits).shape(), [4, 10, 1, 1]);
    }

    #[test]
    fn shared_parameters_are_identical_across_arms() {
        let base = Model::<f64>::build(&tiny(false)).unwrap();
        let zoom = Model::<f64>::build(&tiny(true)).unwrap();
        for p in base.params.iter() {
            assert_eq!(
                zoom.params.get(&p.name).unwrap().data(),
                p.value.data(),
                "{}",
                p.name
            );
        }
        let extra = zoom.param_count() - base.param_count();
        assert_eq!(
            extra,
            crate::attzoom::param_count(&AttZoomConfig::default(), 8)
        );
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Model::<f64>::build(&tiny(true)).unwrap();
        let b = Model::<f64>::build(&tiny(true)).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        let other = Model::<f64>::build(&tiny(true).with_seed(8)).unwrap();
        assert_ne!(
            a.params.get("stage0.conv.W"),
            other.params.get("stage0.conv.W")
        );
    }

    #[test]
    fn incompatible_insertions_name_the_stage() {
        let bad_stage = tiny(false).with_insertion(5, AttZoomConfig::default());
        match Model::<f64>::build(&bad_stage) {
            Err(Error::Build { stage: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad_channels = tiny(false).with_insertion(
            1,
            AttZoomConfig {
                enhance_out_channels: Some(3),
                ..Default::default()
            },
        );
        match Model::<f64>::build(&bad_channels) {
            Err(e @ Error::Build { stage: 2, .. }) => assert!(e.to_string().contains("stage 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn se_hidden_width_clips_at_four() {
        let se = SeBlockSpec { reduction: 16 };
        assert_eq!(se.hidden_width(32), 4);
        assert_eq!(se.hidden_width(16), 4);
        assert_eq!(se.hidden_width(256), 16);
    }

    #[test]
    fn se_block_identity_and_constant_cases() {
        let block = SeBlock::new(6, SeBlockSpec::default(), "se.");
        let mut ps = ParamStore::<f64>::new();
        for (name, shape, _) in block.param_layout() {
            ps.insert(name, Tensor::zeros(shape), InitScheme::External)
                .unwrap();
        }
        // Zero weights with a large bias saturate the excitation to one.
        *ps.get_mut("se.fc2.b").unwrap() = Tensor::full([1, 6, 1, 1], 800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 6, 3, 3], 1.0, &mut rng);
        let y = block.forward(&x, &ps).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }

        let mut ps2 = ps.clone();
        *ps2.get_mut("se.fc1.W").unwrap() = Tensor::randn([4, 6, 1, 1], 1.0, &mut rng);
        *ps2.get_mut("se.fc2.W").unwrap() = Tensor::randn([6, 4, 1, 1], 1.0, &mut rng);
        *ps2.get_mut("se.fc2.b").unwrap() = Tensor::zeros([1, 6, 1, 1]);
        let c = Tensor::<f64>::from_fn([1, 6, 4, 4], |[_, ch, _, _]| ch as f64 * 0.3 - 0.5);
        let y = block.forward(&c, &ps2).unwrap();
        for ch in 0..6 {
            let v0 = y.at([0, ch, 0, 0]);
            for yy in 0..4 {
                for xx in 0..4 {
                    assert_eq!(y.at([0, ch, yy, xx]), v0);
                }
            }
        }
    }

    #[test]
    fn summary_lists_every_stage() {
        let m = Model::<f64>::build(&tiny(true)).unwrap();
        let s = m.summary();
        for name in ["stage0", "attzoom0", "stage1", "stage2", "head"] {
            assert!(s.contains(name), "{s}");
        }
        assert!(s.contains(&format!("total parameters: {}", m.param_count())));
        assert!(s.contains("8x16x16") && s.contains("8x32x32"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f64>::build(&tiny(true)).unwrap();
        m.normalization = Some(ChannelNorm {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        });
        m.save_checkpoint(dir.path()).unwrap();
        let back = Model::<f64>::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.normalization, m.normalization);
        for p in m.params.iter() {
            assert_eq!(back.params.get(&p.name).unwrap(), &p.value);
        }
    }

    #[test]
    fn default_cam_layer_follows_insertion() {
        assert_eq!(
            Model::<f64>::build(&tiny(false))
                .unwrap()
                .default_cam_layer(),
            "stage2"
        );
        assert_eq!(
            Model::<f64>::build(&tiny(true))
                .unwrap()
                .default_cam_layer(),
            "stage1"
        );
    }
}
