//! SGD with momentum, Adam, and per-epoch learning-rate schedules.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One SGD update in place. Weight decay is folded into the gradient before
/// the momentum buffer: `g += wd·p; v = μ·v + g; p -= lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// One bias-corrected Adam update in place; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (b1, b2, wd) = (T::lit(beta1), T::lit(beta2), T::lit(weight_decay));
    let (one, lr, eps) = (T::one(), T::lit(lr), T::lit(eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        let g = g + wd * *p;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam,
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }

    pub fn momentum(&self) -> Option<f64> {
        match self {
            OptimizerKind::Sgd { momentum } => Some(*momentum),
            OptimizerKind::Adam => None,
        }
    }
}

/// Optimizer with per-parameter state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    velocity: HashMap<String, Tensor<T>>,
    adam: HashMap<String, AdamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            velocity: HashMap::new(),
            adam: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self
                        .velocity
                        .entry(p.name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    sgd_step(&mut p.value, g, v, lr, momentum, self.weight_decay);
                }
                OptimizerKind::Adam => {
                    let st = self
                        .adam
                        .entry(p.name.clone())
                        .or_insert_with(|| AdamState {
                            m: Tensor::zeros(g.shape()),
                            v: Tensor::zeros(g.shape()),
                        });
                    adam_step(
                        &mut p.value,
                        g,
                        st,
                        self.step,
                        lr,
                        ADAM_BETA1,
                        ADAM_BETA2,
                        ADAM_EPS,
                        self.weight_decay,
                    );
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerKind {
    Cosine,
    Step { step_size: usize },
    ReduceOnPlateau,
    OneCycle,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::Step { .. } => "step",
            SchedulerKind::ReduceOnPlateau => "plateau",
            SchedulerKind::OneCycle => "one_cycle",
        }
    }

    /// Parses the tags used on the command line and in leaderboards.
    pub fn from_tag(tag: &str, step_size: Option<usize>) -> Result<Self> {
        match tag {
            "cosine" => Ok(SchedulerKind::Cosine),
            "step" => Ok(SchedulerKind::Step {
                step_size: step_size
                    .ok_or_else(|| Error::config("scheduler.step_size", "required for step"))?,
            }),
            "plateau" | "reduce_on_plateau" => Ok(SchedulerKind::ReduceOnPlateau),
            "one_cycle" => Ok(SchedulerKind::OneCycle),
            other => Err(Error::config(
                "scheduler",
                format!("unknown scheduler `{other}`"),
            )),
        }
    }
}

/// Epochs without validation-loss improvement before the plateau schedule decays.
pub const PLATEAU_PATIENCE: usize = 3;
pub const PLATEAU_FACTOR: f64 = 0.1;
/// Fraction of epochs spent warming up in the one-cycle schedule.
pub const ONE_CYCLE_WARMUP: f64 = 0.3;
/// One-cycle starts at `base / 25` and ends at `base / 1000`.
pub const ONE_CYCLE_START_DIV: f64 = 25.0;
pub const ONE_CYCLE_END_DIV: f64 = 1000.0;
/// Cosine annealing floor is `base / 100`.
pub const COSINE_MIN_DIV: f64 = 100.0;

/// Closed-form learning rate at 0-based epoch `t` of `total` epochs. The
/// plateau schedule is stateful; this returns its undecayed value.
pub fn scheduler_lr(kind: SchedulerKind, base_lr: f64, t: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let tf = t as f64;
    match kind {
        SchedulerKind::Cosine => {
            let min = base_lr / COSINE_MIN_DIV;
            min + 0.5 * (base_lr - min) * (1.0 + (PI * tf / total).cos())
        }
        SchedulerKind::Step { step_size } => base_lr * 0.1f64.powi((t / step_size.max(1)) as i32),
        SchedulerKind::ReduceOnPlateau => base_lr,
        SchedulerKind::OneCycle => {
            let warm = ONE_CYCLE_WARMUP * total;
            let start = base_lr / ONE_CYCLE_START_DIV;
            let end = base_lr / ONE_CYCLE_END_DIV;
            if tf < warm {
                start + (base_lr - start) * tf / warm
            } else {
                let frac = ((tf - warm) / (total - warm)).min(1.0);
                end + 0.5 * (base_lr - end) * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Learning-rate schedule evaluated once per epoch.
#[derive(Debug, Clone)]
pub struct Scheduler {
    kind: SchedulerKind,
    base_lr: f64,
    total: usize,
    plateau_lr: f64,
    best_loss: f64,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, base_lr: f64, total_epochs: usize) -> Self {
        Scheduler {
            kind,
            base_lr,
            total: total_epochs,
            plateau_lr: base_lr,
            best_loss: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Learning rate for 0-based epoch `t`.
    pub fn lr(&self, t: usize) -> f64 {
        match self.kind {
            SchedulerKind::ReduceOnPlateau => self.plateau_lr,
            k => scheduler_lr(k, self.base_lr, t, self.total),
        }
    }

    /// Feeds the end-of-epoch validation loss (used only by the plateau schedule).
    pub fn observe(&mut self, val_loss: f64) {
        if self.kind != SchedulerKind::ReduceOnPlateau {
            return;
        }
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= PLATEAU_PATIENCE {
                self.plateau_lr *= PLATEAU_FACTOR;
                self.bad_epochs = 0;
            }
        }
    }
}
