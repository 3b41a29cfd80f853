//! Optimizers and learning-rate schedules over flat `f64` slots.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = SdqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(SdqError::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SdqError::Config(format!("{what}: learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SdqError::Config(format!("{what}: momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(SdqError::Config(format!("{what}: weight decay must be non-negative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
    /// Multiply by `gamma` every `every` epochs.
    Step { gamma: f64, every: usize },
}

impl Schedule {
    /// Learning-rate multiplier at `epoch` out of `total`.
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                if total == 0 {
                    return 1.0;
                }
                let t = epoch.min(total) as f64 / total as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step { gamma, every } => gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

/// Per-slot optimizer state; a slot is one flat parameter array.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    fn ensure(&mut self, slot: usize, len: usize) {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
            self.t.push(0);
        }
        if self.m[slot].len() != len {
            self.m[slot] = vec![0.0; len];
            self.v[slot] = vec![0.0; len];
            self.t[slot] = 0;
        }
    }

    /// Forgets the state of `slot`, e.g. after the slot's meaning changed.
    pub fn reset_slot(&mut self, slot: usize) {
        if slot < self.m.len() {
            self.m[slot].iter_mut().for_each(|x| *x = 0.0);
            self.v[slot].iter_mut().for_each(|x| *x = 0.0);
            self.t[slot] = 0;
        }
    }

    /// One update of `param` along `grad` with the rate scaled by `lr_scale`.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr_scale: f64) {
        assert_eq!(param.len(), grad.len(), "optimizer slot {slot}: length mismatch");
        self.ensure(slot, param.len());
        let lr = self.cfg.lr * lr_scale;
        let wd = self.cfg.weight_decay;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum;
                let m = &mut self.m[slot];
                for i in 0..param.len() {
                    let g = grad[i] + wd * param[i];
                    m[i] = mu * m[i] + g;
                    param[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam => {
                self.t[slot] += 1;
                let t = self.t[slot] as i32;
                let c1 = 1.0 - ADAM_B1.powi(t);
                let c2 = 1.0 - ADAM_B2.powi(t);
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..param.len() {
                    let g = grad[i] + wd * param[i];
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}
