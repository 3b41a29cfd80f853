//! Strategy generation: joint training of weights and bitwidth parameters
//! under stochastic bitwidth quantization, with the quantization-error
//! regularizer pushing bitwidths down and threshold decay applying the
//! reductions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dbp::{BitChange, DbpTable, GumbelConfig, GumbelSampler, Granularity, StochasticPass};
use crate::error::{Result, SdqError};
use crate::grad::{Graph, Var};
use crate::model::{cross_entropy, Model, QuantPlan};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::phase2::normalize_weights_rows;
use crate::quant::{grid_steps, quantize_weight_values};
use crate::strategy::{LayerAssignment, MpqStrategy};
use crate::tensor::Tensor;
use crate::train::{epoch_batches, numerical_abort, step_params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayCadence {
    #[default]
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub lambda_q: f64,
    pub beta_threshold: f64,
    pub epochs: usize,
    pub candidates: Vec<u32>,
    pub activation_bits: u32,
    /// Bitwidth of the pinned (first and last) layers.
    pub pinned_bits: u32,
    pub granularity: Granularity,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Optimizer for the bitwidth parameters; its learning rate defaults to
    /// the weight learning rate.
    pub beta_optimizer: Option<OptimizerConfig>,
    pub schedule: Schedule,
    pub gumbel: GumbelConfig,
    pub decay: DecayCadence,
    /// Normalize weights before quantization in this phase too.
    pub normalize: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            lambda_q: 1e-3,
            beta_threshold: 1e-4,
            epochs: 10,
            candidates: vec![2, 3, 4, 5, 6, 7, 8],
            activation_bits: 4,
            pinned_bits: 8,
            granularity: Granularity::Layer,
            batch_size: 64,
            optimizer: OptimizerConfig {
                lr: 0.05,
                ..OptimizerConfig::default()
            },
            beta_optimizer: None,
            schedule: Schedule::Constant,
            gumbel: GumbelConfig::default(),
            decay: DecayCadence::Epoch,
            normalize: false,
            seed: 7,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_q >= 0.0) {
            return Err(SdqError::Config("lambda_q must be non-negative".into()));
        }
        if !(self.beta_threshold > 0.0 && self.beta_threshold < 1.0) {
            return Err(SdqError::Config(format!(
                "beta_threshold must lie in (0, 1), got {}",
                self.beta_threshold
            )));
        }
        if self.epochs == 0 {
            return Err(SdqError::Config("phase 1 needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(SdqError::Config("batch_size must be positive".into()));
        }
        if self.activation_bits == 0 || self.pinned_bits == 0 {
            return Err(SdqError::Config("bitwidths must be at least 1".into()));
        }
        self.optimizer.validate("weight optimizer")?;
        self.beta_config().validate("beta optimizer")?;
        if !(self.gumbel.tau > 0.0) {
            return Err(SdqError::Config("gumbel tau must be positive".into()));
        }
        Ok(())
    }

    pub fn beta_config(&self) -> OptimizerConfig {
        self.beta_optimizer.unwrap_or(self.optimizer)
    }

    pub fn dbp_table(&self, model: &Model) -> Result<DbpTable> {
        DbpTable::new(
            model.spec.dbp_layers(self.pinned_bits),
            &self.candidates,
            self.granularity,
        )
    }
}

/// Per-unit QER coefficients `λ_b·Σ||Q_b(w) − T(w)||²` over the unit's rows,
/// at each unit's active bitwidth. Computed on plain values, so nothing
/// flows back to the weights.
pub fn qer_coefficients(dbp: &DbpTable, weights: &[&Tensor]) -> Result<Vec<f64>> {
    let mut coeff = vec![0.0; dbp.units().len()];
    for (l, w) in weights.iter().enumerate() {
        if dbp.pinned_bits(l).is_some() {
            continue;
        }
        let bits = dbp.layer_bits(l);
        let (q, img) = quantize_weight_values(w, &bits)?;
        let per = w.len() / bits.len();
        for (grp, &u) in dbp.layer_units(l).iter().enumerate() {
            let range = grp * per..(grp + 1) * per;
            let err: f64 = q.data()[range.clone()]
                .iter()
                .zip(&img.data()[range])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let steps = grid_steps(bits[grp]);
            coeff[u] += steps * steps * err;
        }
    }
    Ok(coeff)
}

/// `Σ_u β_u · λ_{b_u} · ||Q_{b_u}(w) − T(w)||²` with the `β` leaves of `pass`.
pub fn qer_loss(g: &mut Graph, dbp: &DbpTable, weights: &[&Tensor], pass: &StochasticPass) -> Result<Var> {
    let coeff = qer_coefficients(dbp, weights)?;
    if coeff.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let terms: Vec<Var> = coeff
        .iter()
        .enumerate()
        .map(|(u, &k)| g.scale(pass.beta_var(u), k))
        .collect();
    let s = g.stack(&terms)?;
    Ok(g.sum(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase1StepMetrics {
    pub task: f64,
    pub qer: f64,
    pub loss: f64,
    pub weight_grad_norm: f64,
    pub beta_grad_norm: f64,
}

/// Mutable state of a strategy search.
#[derive(Debug, Clone)]
pub struct Phase1State {
    pub dbp: DbpTable,
    pub sampler: GumbelSampler,
    pub weight_opt: Optimizer,
    pub beta_opt: Optimizer,
}

impl Phase1State {
    pub fn new(model: &Model, cfg: &Phase1Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Phase1State {
            dbp: cfg.dbp_table(model)?,
            sampler: GumbelSampler::new(cfg.gumbel)?,
            weight_opt: Optimizer::new(cfg.optimizer),
            beta_opt: Optimizer::new(cfg.beta_config()),
        })
    }
}

/// One joint step: task loss plus `λ_Q`·QER. Weights learn from the task
/// loss only, the active `β` of each unit from both terms. `β` is clamped
/// afterwards. With `frozen_weights` only `β` moves.
#[allow(clippy::too_many_arguments)]
pub fn phase1_step(
    model: &mut Model,
    state: &mut Phase1State,
    x: &Tensor,
    y: &[usize],
    cfg: &Phase1Config,
    lr_scale: f64,
    frozen_weights: bool,
    at: (usize, usize),
) -> Result<Phase1StepMetrics> {
    let mut g = Graph::new();
    let vars = model.leaves(&mut g, !frozen_weights);
    let pass = StochasticPass::draw(&mut g, &state.dbp, &mut state.sampler)?;
    let xv = g.constant(x.clone());
    let dbp = &state.dbp;
    let f = model.forward(&mut g, &vars, xv, Some(cfg.activation_bits), |g, l, w| {
        let w = if cfg.normalize {
            normalize_weights_rows(g, w, &dbp.layer_bits(l))?
        } else {
            w
        };
        pass.quantize(g, dbp, l, w)
    })?;
    let task = cross_entropy(&mut g, f.logits, y)?;
    let weights: Vec<&Tensor> = model.params.iter().map(|p| &p.weight).collect();
    let qer = qer_loss(&mut g, dbp, &weights, &pass)?;
    let scaled = g.scale(qer, cfg.lambda_q);
    let loss = g.add(task, scaled)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(numerical_abort("strategy", at.0, at.1, lv, model, &f.peaks));
    }
    let (task_v, qer_v) = (g.value(task).item(), g.value(qer).item());
    g.backward(loss)?;

    let weight_grad_norm = if frozen_weights {
        0.0
    } else {
        step_params(model, &g, &vars, &mut state.weight_opt, lr_scale)
    };
    let n_cand = state.dbp.candidates().len();
    let mut beta_sq = 0.0;
    for u in 0..state.dbp.units().len() {
        let grad = g.grad(pass.beta_var(u)).item();
        beta_sq += grad * grad;
        let unit = &mut state.dbp.units_mut()[u];
        let i = unit.active_index();
        // one optimizer slot per (unit, candidate) so momentum never carries
        // over to a freshly activated level
        state
            .beta_opt
            .step(u * n_cand + i, &mut unit.beta_mut()[i..i + 1], &[grad], lr_scale);
    }
    state.dbp.clamp_betas();
    Ok(Phase1StepMetrics {
        task: task_v,
        qer: qer_v,
        loss: lv,
        weight_grad_norm,
        beta_grad_norm: beta_sq.sqrt(),
    })
}

/// Applies threshold decay; see [`DbpTable::decay`].
pub fn decay_bitwidths(dbp: &mut DbpTable, beta_threshold: f64) -> Vec<BitChange> {
    dbp.decay(beta_threshold)
}

/// The strategy implied by the current table.
pub fn extract_strategy(dbp: &DbpTable, model: &Model, activation_bits: u32) -> MpqStrategy {
    let kernel_wise = dbp
        .layers()
        .iter()
        .enumerate()
        .any(|(l, _)| dbp.layer_units(l).len() > 1);
    let layers = model
        .spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let bits = dbp.layer_bits(l);
            let pinned = dbp.pinned_bits(l).is_some();
            LayerAssignment {
                name: spec.name.clone(),
                bits: dbp.layer_bits_summary(l),
                params: spec.params() as u64,
                pinned,
                kernel_bits: (kernel_wise && !pinned).then_some(bits),
            }
        })
        .collect();
    MpqStrategy {
        model: model.spec.id.clone(),
        candidates: dbp.candidates().to_vec(),
        activation_bits,
        layers,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Epoch {
    pub phase: String,
    pub epoch: usize,
    pub task_loss: f64,
    pub qer: f64,
    pub loss: f64,
    pub weight_grad_norm: f64,
    pub beta_grad_norm: f64,
    /// Representative bitwidth of every layer, in model order, after decay.
    pub layer_bits: Vec<u32>,
    /// Active `β` of every search unit.
    pub betas: Vec<f64>,
    pub changes: Vec<BitChange>,
    pub beta_clamps: u64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Phase1Outcome {
    pub dbp: DbpTable,
    pub strategy: MpqStrategy,
    pub epochs: Vec<Phase1Epoch>,
}

/// Current deterministic plan: every unit at its active bitwidth.
pub fn active_plan(dbp: &DbpTable, activation_bits: u32, normalize: bool) -> QuantPlan {
    QuantPlan::Fixed {
        bits: (0..dbp.num_layers()).map(|l| dbp.layer_bits(l)).collect(),
        activation_bits,
        normalize,
    }
}

/// Runs the full strategy search. With `frozen_weights` the model is never
/// updated.
pub fn run_phase1(
    model: &mut Model,
    train: &Dataset,
    cfg: &Phase1Config,
    frozen_weights: bool,
) -> Result<Phase1Outcome> {
    let mut state = Phase1State::new(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_scale = cfg.schedule.factor(epoch, cfg.epochs);
        let mut sums = [0.0; 5];
        let mut changes = Vec::new();
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut rng);
        let steps = batches.len().max(1) as f64;
        for (step, idx) in batches.into_iter().enumerate() {
            let (x, y) = train.batch(&idx);
            let m = phase1_step(model, &mut state, &x, &y, cfg, lr_scale, frozen_weights, (epoch, step))?;
            for (s, v) in sums
                .iter_mut()
                .zip([m.task, m.qer, m.loss, m.weight_grad_norm, m.beta_grad_norm])
            {
                *s += v;
            }
            if cfg.decay == DecayCadence::Step {
                changes.extend(decay_bitwidths(&mut state.dbp, cfg.beta_threshold));
            }
        }
        if cfg.decay == DecayCadence::Epoch {
            changes.extend(decay_bitwidths(&mut state.dbp, cfg.beta_threshold));
        }
        let plan = active_plan(&state.dbp, cfg.activation_bits, cfg.normalize);
        epochs.push(Phase1Epoch {
            phase: "strategy".into(),
            epoch,
            task_loss: sums[0] / steps,
            qer: sums[1] / steps,
            loss: sums[2] / steps,
            weight_grad_norm: sums[3] / steps,
            beta_grad_norm: sums[4] / steps,
            layer_bits: (0..state.dbp.num_layers())
                .map(|l| state.dbp.layer_bits_summary(l))
                .collect(),
            betas: state.dbp.units().iter().map(|u| u.active_beta()).collect(),
            changes,
            beta_clamps: state.sampler.clamp_count(),
            train_accuracy: model.accuracy(&train.x, &train.y, &plan)?,
        });
    }
    let strategy = extract_strategy(&state.dbp, model, cfg.activation_bits);
    Ok(Phase1Outcome {
        dbp: state.dbp,
        strategy,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetSpec};
    use crate::model::{build_model, ModelSpec};
    use crate::quant::weight_levels;

    fn toy() -> (Model, Dataset) {
        let spec = DatasetSpec {
            samples: 256,
            ..DatasetSpec::default()
        };
        let (tr, _) = gen_dataset(&spec).unwrap();
        (build_model(&ModelSpec::parse("mlp:2-8-8-8-4").unwrap(), 1), tr)
    }

    #[test]
    fn lambda_ratio() {
        assert_eq!(grid_steps(4).powi(2) / grid_steps(2).powi(2), 25.0);
    }

    #[test]
    fn on_grid_weights_have_no_qer() {
        let (m, _) = toy();
        let cfg = Phase1Config::default();
        let dbp = cfg.dbp_table(&m).unwrap();
        // pick values whose image lands exactly on the 8-bit grid
        let lv = weight_levels(8);
        let w: Vec<Tensor> = m
            .params
            .iter()
            .map(|p| {
                let data = (0..p.weight.len())
                    .map(|i| {
                        let t: f64 = lv[(i * 37) % lv.len()];
                        let t = if i == 0 { 1.0 } else { t };
                        (t * 0.5f64.tanh()).atanh()
                    })
                    .collect();
                Tensor::new(data, p.weight.shape().to_vec()).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = w.iter().collect();
        for c in qer_coefficients(&dbp, &refs).unwrap() {
            assert!(c.abs() < 1e-20, "{c}");
        }
    }

    #[test]
    fn qer_scales_with_layer_size() {
        let big = Tensor::new((0..1000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect(), vec![100, 10]).unwrap();
        let small = Tensor::new(big.data()[..100].to_vec(), vec![10, 10]).unwrap();
        let layers = vec![
            crate::dbp::DbpLayer { name: "a".into(), rows: 100, block: 0, pinned_bits: None },
            crate::dbp::DbpLayer { name: "b".into(), rows: 10, block: 0, pinned_bits: None },
        ];
        let dbp = DbpTable::new(layers, &[2, 4], Granularity::Layer).unwrap();
        let c = qer_coefficients(&dbp, &[&big, &small]).unwrap();
        let ratio = c[0] / c[1];
        assert!(ratio > 7.0 && ratio < 13.0, "{ratio}");
    }

    #[test]
    fn zero_lambda_and_frozen_weights_leave_qer_out_of_beta() {
        let (mut m, tr) = toy();
        let cfg = Phase1Config {
            lambda_q: 0.0,
            ..Phase1Config::default()
        };
        let mut state = Phase1State::new(&m, &cfg).unwrap();
        let (x, y) = tr.batch(&(0..32).collect::<Vec<_>>());
        let m0 = m.clone();
        let r = phase1_step(&mut m, &mut state, &x, &y, &cfg, 1.0, true, (0, 0)).unwrap();
        assert_eq!(m, m0);
        assert_eq!(r.weight_grad_norm, 0.0);
        assert!(r.qer > 0.0);
        assert_eq!(r.loss, r.task);
    }

    #[test]
    fn step_is_bit_reproducible() {
        let run = || {
            let (mut m, tr) = toy();
            let cfg = Phase1Config::default();
            let mut state = Phase1State::new(&m, &cfg).unwrap();
            let (x, y) = tr.batch(&(0..32).collect::<Vec<_>>());
            let r = phase1_step(&mut m, &mut state, &x, &y, &cfg, 1.0, false, (0, 0)).unwrap();
            (r.loss.to_bits(), state.dbp.units()[0].active_beta().to_bits(), m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_pressure_keeps_max_bits() {
        let (mut m, tr) = toy();
        let cfg = Phase1Config {
            lambda_q: 0.0,
            epochs: 2,
            ..Phase1Config::default()
        };
        let out = run_phase1(&mut m, &tr, &cfg, true).unwrap();
        // a frozen model still feels task pressure; β only ever decays if
        // that pressure alone drives it under the threshold
        for e in &out.epochs {
            assert!(e.layer_bits.iter().all(|&b| b >= 2));
        }
        let pinned: Vec<bool> = out.strategy.layers.iter().map(|l| l.pinned).collect();
        assert_eq!(pinned, vec![true, false, false, true]);
        assert_eq!(out.strategy.layers[0].bits, 8);
    }

    #[test]
    fn strong_qer_decays_and_trajectories_never_rise() {
        let (mut m, tr) = toy();
        let cfg = Phase1Config {
            lambda_q: 1.0,
            epochs: 4,
            ..Phase1Config::default()
        };
        let out = run_phase1(&mut m, &tr, &cfg, false).unwrap();
        assert!(out.strategy.avg_weight_bits() < 8.0);
        for w in out.epochs.windows(2) {
            for (a, b) in w[0].layer_bits.iter().zip(&w[1].layer_bits) {
                assert!(b <= a);
            }
        }
    }

    #[test]
    fn kernel_strategy_exports_rows() {
        let (mut m, tr) = toy();
        let cfg = Phase1Config {
            lambda_q: 1.0,
            epochs: 1,
            granularity: Granularity::Kernel,
            ..Phase1Config::default()
        };
        let out = run_phase1(&mut m, &tr, &cfg, false).unwrap();
        let l1 = &out.strategy.layers[1];
        assert_eq!(l1.kernel_bits.as_ref().unwrap().len(), 8);
        assert!(out.strategy.layers[0].kernel_bits.is_none());
    }

    #[test]
    fn bad_config_rejected() {
        let (m, _) = toy();
        for cfg in [
            Phase1Config { beta_threshold: 1.0, ..Phase1Config::default() },
            Phase1Config { epochs: 0, ..Phase1Config::default() },
            Phase1Config { candidates: vec![4, 2], ..Phase1Config::default() },
        ] {
            assert!(Phase1State::new(&m, &cfg).is_err());
        }
    }
}
