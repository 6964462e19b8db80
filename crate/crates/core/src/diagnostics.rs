//! Finite-difference checks of every differentiable op and of the full
//! AttZoom and SE blocks on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attzoom::{attention_map, AttZoomConfig, AttZoomLayer, B_A};
use crate::autodiff::{
    grad_check, GateGradient, GradCheckOptions, GradCheckReport, Graph, InitScheme, NodeId,
    ParamStore, Threshold,
};
use crate::backbones::{SeBlock, SeBlockSpec};
use crate::error::Result;
use crate::tensor::{sigmoid_scalar, ConvSpec, Tensor};

/// Minimum distance between `σ(A)` and the threshold at every gate input, so
/// finite differences never cross the gate's discontinuity.
pub const GATE_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>>;

struct Case {
    name: String,
    params: ParamStore<f64>,
    forward: Forward,
}

fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values so every pooling window has a unique maximum.
fn distinct(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::from_vec(shape, v).expect("shape matches")
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t, InitScheme::External)
            .expect("unique names");
    }
    s
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph<f64>, out: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let rn = g.constant(r.clone());
    let prod = g.mul(out, rn)?;
    Ok(g.sum(prod))
}

fn case(
    name: &str,
    params: ParamStore<f64>,
    out_shape: [usize; 4],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId> + 'static,
) -> Case {
    let r = randn(rng, out_shape);
    Case {
        name: name.to_string(),
        params,
        forward: Box::new(move |g, p| {
            let out = f(g, p)?;
            project(g, out, &r)
        }),
    }
}

/// Attention-map input whose gate inputs all keep [`GATE_MARGIN`] from the threshold.
fn gate_safe_input(
    rng: &mut ChaCha8Rng,
    shape: [usize; 4],
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    t: f64,
) -> Tensor<f64> {
    loop {
        let x = randn(rng, shape);
        let a = attention_map(&x, w, Some(b)).expect("valid shapes");
        if a.data()
            .iter()
            .all(|&v| (sigmoid_scalar(v) - t).abs() > GATE_MARGIN)
        {
            return x;
        }
    }
}

fn attzoom_case(name: &str, cfg: AttZoomConfig, rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = 2;
    let layer = AttZoomLayer::new(cfg.clone(), c, "")?;
    let mut params = ParamStore::new();
    layer.init_params(&mut params, rng)?;
    // Centre the attention bias so both gate branches occur.
    *params.get_mut(B_A).expect("bias present") = Tensor::scalar(rng.gen_range(-0.5..0.5));
    let w = params.require("W_A")?.clone();
    let b = params.require(B_A)?.clone();
    let x = gate_safe_input(rng, [2, c, 4, 5], &w, &b, cfg.threshold);
    params.insert("x", x, InitScheme::External)?;
    let out_shape = cfg.output_shape([2, c, 4, 5]);
    Ok(case(name, params, out_shape, rng, move |g, p| {
        let x = g.param(p, "x")?;
        Ok(layer.apply(g, p, x)?.enhanced)
    }))
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    for (label, spec, in_shape) in [
        ("conv2d", ConvSpec::same(3, 3), [2, 2, 5, 5]),
        (
            "conv2d_stride2",
            ConvSpec::same(2, 3).with_stride(2),
            [1, 3, 6, 7],
        ),
        (
            "conv2d_1x1_nobias",
            ConvSpec::same(2, 1).without_bias(),
            [2, 2, 4, 4],
        ),
    ] {
        let cin = in_shape[1];
        let mut entries = vec![
            ("x", randn(rng, in_shape)),
            ("w", randn(rng, spec.weight_shape(cin))),
        ];
        if spec.has_bias {
            entries.push(("b", randn(rng, [1, spec.out_channels, 1, 1])));
        }
        let (oh, ow) = spec.output_hw(in_shape[2], in_shape[3]).expect("fits");
        out.push(case(
            label,
            store(entries),
            [in_shape[0], spec.out_channels, oh, ow],
            rng,
            move |g, p| {
                let x = g.param(p, "x")?;
                let w = g.param(p, "w")?;
                let b = if spec.has_bias {
                    Some(g.param(p, "b")?)
                } else {
                    None
                };
                g.conv2d(x, w, b, spec)
            },
        ));
    }

    let s = [2, 2, 3, 3];
    out.push(case(
        "sigmoid",
        store(vec![("x", randn(rng, s))]),
        s,
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            Ok(g.sigmoid(x))
        },
    ));

    for t in [0.3, 0.5, 0.8] {
        let a = Tensor::from_fn([2, 1, 3, 4], |_| loop {
            let v: f64 = rng.gen_range(-4.0..4.0);
            if (sigmoid_scalar(v) - t).abs() > GATE_MARGIN {
                break v;
            }
        });
        out.push(case(
            &format!("gate_t{t}"),
            store(vec![("a", a)]),
            [2, 1, 3, 4],
            rng,
            move |g, p| {
                let a = g.param(p, "a")?;
                g.gate(a, Threshold::Fixed(t), GateGradient::Exact)
            },
        ));
    }

    out.push(case(
        "mul_broadcast",
        store(vec![
            ("f", randn(rng, [2, 3, 3, 4])),
            ("m", randn(rng, [2, 1, 3, 4])),
        ]),
        [2, 3, 3, 4],
        rng,
        |g, p| {
            let f = g.param(p, "f")?;
            let m = g.param(p, "m")?;
            g.mul_broadcast(f, m)
        },
    ));
    out.push(case(
        "channel_scale",
        store(vec![
            ("x", randn(rng, [2, 3, 2, 3])),
            ("s", randn(rng, [2, 3, 1, 1])),
        ]),
        [2, 3, 2, 3],
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            let s = g.param(p, "s")?;
            g.channel_scale(x, s)
        },
    ));
    for m in [2, 3] {
        out.push(case(
            &format!("upsample_zeros_m{m}"),
            store(vec![("x", randn(rng, [1, 2, 3, 2]))]),
            [1, 2, 3 * m, 2 * m],
            rng,
            move |g, p| {
                let x = g.param(p, "x")?;
                g.upsample_zeros(x, m)
            },
        ));
    }
    out.push(case(
        "global_avg_pool",
        store(vec![("x", randn(rng, [2, 3, 3, 4]))]),
        [2, 3, 1, 1],
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            g.global_avg_pool(x)
        },
    ));
    out.push(case(
        "max_pool2",
        store(vec![("x", distinct(rng, [2, 2, 4, 5]))]),
        [2, 2, 2, 2],
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            g.max_pool2(x)
        },
    ));
    out.push(case(
        "relu",
        store(vec![("x", away_from_zero(rng, [2, 2, 3, 3]))]),
        [2, 2, 3, 3],
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            Ok(g.relu(x))
        },
    ));
    out.push(case(
        "dense",
        store(vec![
            ("x", randn(rng, [3, 2, 2, 1])),
            ("w", randn(rng, [5, 4, 1, 1])),
            ("b", randn(rng, [1, 5, 1, 1])),
        ]),
        [3, 5, 1, 1],
        rng,
        |g, p| {
            let x = g.param(p, "x")?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            g.dense(x, w, Some(b))
        },
    ));
    out.push(case(
        "add_mul",
        store(vec![
            ("a", randn(rng, [1, 2, 2, 3])),
            ("b", randn(rng, [1, 2, 2, 3])),
        ]),
        [1, 2, 2, 3],
        rng,
        |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let s = g.add(a, b)?;
            g.mul(s, a)
        },
    ));
    let labels = vec![2, 0, 3];
    out.push(Case {
        name: "softmax_cross_entropy".into(),
        params: store(vec![("z", randn(rng, [3, 4, 1, 1]))]),
        forward: Box::new(move |g, p| {
            let z = g.param(p, "z")?;
            g.softmax_cross_entropy(z, &labels)
        }),
    });

    let se = SeBlock::new(8, SeBlockSpec { reduction: 2 }, "");
    let mut se_params = store(vec![("x", randn(rng, [2, 8, 3, 3]))]);
    for (name, shape, _) in se.param_layout() {
        se_params.insert(name, randn(rng, shape), InitScheme::External)?;
    }
    out.push(case(
        "se_block",
        se_params,
        [2, 8, 3, 3],
        rng,
        move |g, p| {
            let x = g.param(p, "x")?;
            se.apply(g, p, x)
        },
    ));

    out.push(attzoom_case("attzoom", AttZoomConfig::default(), rng)?);
    out.push(attzoom_case(
        "attzoom_m3_stride3",
        AttZoomConfig {
            zoom_multiplier: 3,
            enhance_stride: 3,
            threshold: 0.6,
            ..Default::default()
        },
        rng,
    )?);
    out.push(attzoom_case(
        "attzoom_learned_threshold",
        AttZoomConfig {
            learn_threshold: true,
            attention_kernel: (1, 3),
            enhance_kernel: (5, 3),
            enhance_out_channels: Some(3),
            ..Default::default()
        },
        rng,
    )?);
    Ok(out)
}

/// Runs every case and returns one report per case, in a fixed order.
pub fn gradcheck_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    cases(seed)?
        .into_iter()
        .map(|c| {
            Ok(SuiteEntry {
                report: grad_check(&c.params, &c.forward, opts)?,
                name: c.name,
            })
        })
        .collect()
}
