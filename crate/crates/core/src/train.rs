//! Shared training plumbing: batching, parameter updates, full-precision
//! training of the teacher, and the non-finite loss abort.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SdqError};
use crate::grad::Graph;
use crate::model::{cross_entropy, Model, ParamVars, QuantPlan};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};

/// Shuffled mini-batch index lists for one epoch. The final short batch is
/// kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Applies one optimizer step to every weight and bias from the gradients
/// held in `g`, and returns the global gradient L2 norm. Weights use slot
/// `2l`, biases `2l + 1`.
pub fn step_params(
    model: &mut Model,
    g: &Graph,
    vars: &ParamVars,
    opt: &mut Optimizer,
    lr_scale: f64,
) -> f64 {
    let mut sq = 0.0;
    for (l, p) in model.params.iter_mut().enumerate() {
        let gw = g.grad(vars.weights[l]);
        let gb = g.grad(vars.biases[l]);
        sq += gw.data().iter().chain(gb.data()).map(|v| v * v).sum::<f64>();
        opt.step(2 * l, p.weight.data_mut(), gw.data(), lr_scale);
        opt.step(2 * l + 1, p.bias.data_mut(), gb.data(), lr_scale);
    }
    sq.sqrt()
}

/// Builds the abort error for a non-finite loss, naming the parameter layer
/// whose output had the largest magnitude.
pub fn numerical_abort(
    phase: &str,
    epoch: usize,
    step: usize,
    loss: f64,
    model: &Model,
    peaks: &[f64],
) -> SdqError {
    // a NaN peak is the most direct culprit; otherwise the largest, with inf on top
    let worst = peaks.iter().position(|p| p.is_nan()).unwrap_or_else(|| {
        peaks
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > peaks[best] { i } else { best })
    });
    SdqError::NumericalAbort {
        phase: phase.to_string(),
        epoch,
        step,
        loss,
        layer: model.layer_name(worst).to_string(),
        magnitude: peaks.get(worst).copied().unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FpConfig {
    fn default() -> Self {
        FpConfig {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Cosine,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpEpoch {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub train_accuracy: f64,
}

/// Trains `model` at full precision with cross-entropy.
pub fn train_full_precision(model: &mut Model, train: &Dataset, cfg: &FpConfig) -> Result<Vec<FpEpoch>> {
    cfg.optimizer.validate("teacher optimizer")?;
    if cfg.batch_size == 0 {
        return Err(SdqError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_scale = cfg.schedule.factor(epoch, cfg.epochs);
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let (x, y) = train.batch(&idx);
            let mut g = Graph::new();
            let vars = model.leaves(&mut g, true);
            let xv = g.constant(x);
            let f = model.forward(&mut g, &vars, xv, None, |_, _, w| Ok(w))?;
            let loss = cross_entropy(&mut g, f.logits, &y)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(numerical_abort("teacher", epoch, step, lv, model, &f.peaks));
            }
            g.backward(loss)?;
            norm_sum += step_params(model, &g, &vars, &mut opt, lr_scale);
            loss_sum += lv;
            steps += 1;
        }
        log.push(FpEpoch {
            phase: "teacher".into(),
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            grad_norm: norm_sum / steps.max(1) as f64,
            train_accuracy: model.accuracy(&train.x, &train.y, &QuantPlan::FullPrecision)?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetSpec};
    use crate::model::{build_model, ModelSpec};

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fp_training_learns_mixture() {
        let spec = DatasetSpec {
            samples: 800,
            ..DatasetSpec::default()
        };
        let (tr, te) = gen_dataset(&spec).unwrap();
        let mut m = build_model(&ModelSpec::parse("mlp:2-16-16-4").unwrap(), 3);
        let cfg = FpConfig {
            epochs: 10,
            ..FpConfig::default()
        };
        let log = train_full_precision(&mut m, &tr, &cfg).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        assert!(m.accuracy(&te.x, &te.y, &QuantPlan::FullPrecision).unwrap() > 0.9);
    }

    #[test]
    fn abort_names_largest_layer() {
        let m = build_model(&ModelSpec::parse("mlp:2-4-4-2").unwrap(), 0);
        let e = numerical_abort("p1", 1, 2, f64::NAN, &m, &[1.0, 50.0, 3.0]);
        match e {
            SdqError::NumericalAbort { layer, magnitude, .. } => {
                assert_eq!(layer, "fc1");
                assert_eq!(magnitude, 50.0);
            }
            other => panic!("{other:?}"),
        }
        let e = numerical_abort("p1", 1, 2, f64::NAN, &m, &[1.0, f64::INFINITY, f64::NAN]);
        assert!(matches!(e, SdqError::NumericalAbort { ref layer, .. } if layer == "fc2"));
    }
}
