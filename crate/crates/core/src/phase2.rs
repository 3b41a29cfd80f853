//! Post-training at a fixed mixed-precision strategy: distillation from a
//! full-precision teacher plus the entropy-aware bin regularizer.
//!
//! Bin statistics are taken on the weight image `tanh(w)/max|tanh(w)|`
//! (after normalization when enabled), the real-valued counterpart of the
//! quantized weight on the `[-1, 1]` grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SdqError};
use crate::grad::{softmax_row, Graph, Var};
use crate::model::{fixed_weight, Model, ParamVars, QuantPlan};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::quant::{grid_steps, weight_image, weight_levels, PASSTHROUGH_BITS};
use crate::strategy::MpqStrategy;
use crate::tensor::Tensor;
use crate::train::{epoch_batches, numerical_abort, step_params};

/// Per-bin statistics of one row group at bitwidth `bits`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinHistogram {
    pub bits: u32,
    pub levels: Vec<f64>,
    pub counts: Vec<usize>,
    pub sums: Vec<f64>,
    pub sums_sq: Vec<f64>,
}

impl BinHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn proportions(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Bin means; empty bins report their level.
    pub fn means(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|i| match self.counts[i] {
                0 => self.levels[i],
                c => self.sums[i] / c as f64,
            })
            .collect()
    }

    /// Population variance per bin; 0 for empty bins.
    pub fn variances(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|i| match self.counts[i] {
                0 => 0.0,
                c => {
                    let m = self.sums[i] / c as f64;
                    (self.sums_sq[i] / c as f64 - m * m).max(0.0)
                }
            })
            .collect()
    }
}

/// Index of the nearest `b`-bit weight level to `v`; ties go up.
pub fn bin_index(v: f64, bits: u32) -> usize {
    let l = grid_steps(bits);
    ((v + 1.0) / 2.0 * l + 0.5).floor().clamp(0.0, l) as usize
}

/// Assigns every value to its nearest level on the `b`-bit `[-1, 1]` grid.
pub fn bin_assign(values: &[f64], bits: u32) -> Result<BinHistogram> {
    if bits == 0 || bits > 16 {
        return Err(SdqError::contract(format!("bin_assign: unsupported bitwidth {bits}")));
    }
    let levels = weight_levels(bits);
    let k = levels.len();
    let mut h = BinHistogram {
        bits,
        levels,
        counts: vec![0; k],
        sums: vec![0.0; k],
        sums_sq: vec![0.0; k],
    };
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(SdqError::NonFinite {
                context: "bin_assign".into(),
                index: i,
                value: v,
            });
        }
        let b = bin_index(v, bits);
        h.counts[b] += 1;
        h.sums[b] += v;
        h.sums_sq[b] += v * v;
    }
    Ok(h)
}

/// `−Σ p·ln p` over bin proportions, with `0·ln 0 = 0`.
pub fn bin_entropy(h: &BinHistogram) -> f64 {
    -h.proportions()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `2^(b−1)/(2^b−1) · n/||w||₁`.
fn normalize_factor(n: usize, l1: f64, bits: u32) -> f64 {
    2f64.powi(bits as i32 - 1) / grid_steps(bits) * n as f64 / l1
}

/// `(2^(b−1)/(2^b−1)) · (n/||w||₁) · w`; all-zero input is returned as is.
pub fn normalize_weights(w: &Tensor, bits: u32) -> Result<Tensor> {
    if bits == 0 {
        return Err(SdqError::contract("normalize_weights: bitwidth must be at least 1"));
    }
    w.ensure_finite("normalize_weights input")?;
    let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Ok(w.clone());
    }
    let k = normalize_factor(w.len(), l1, bits);
    Ok(w.map(|v| k * v))
}

/// Graph version of [`normalize_weights`] where the rows of `w` split into
/// `bits.len()` equal groups, each normalized over its own entries.
pub fn normalize_weights_rows(g: &mut Graph, w: Var, bits: &[u32]) -> Result<Var> {
    if bits.is_empty() || bits.contains(&0) {
        return Err(SdqError::contract("normalize_weights: need bitwidths of at least 1"));
    }
    let value = g.value(w).clone();
    let rows = value.rows();
    if !rows.is_multiple_of(bits.len()) {
        return Err(SdqError::contract(format!(
            "normalize_weights: {rows} rows do not split into {} groups",
            bits.len()
        )));
    }
    if bits.len() == 1 {
        let l1 = value.data().iter().map(|v| v.abs()).sum::<f64>();
        if l1 == 0.0 {
            return Ok(w);
        }
        let n = value.len();
        let norm = g.l1(w);
        let inv = g.recip(norm);
        let k = g.scale(inv, normalize_factor(n, 1.0, bits[0]));
        return g.mul_scalar(w, k);
    }
    let per = value.len() / bits.len();
    let mut factors = Vec::with_capacity(bits.len());
    for (i, &b) in bits.iter().enumerate() {
        let idx: Vec<usize> = (i * per..(i + 1) * per).collect();
        let l1 = idx.iter().map(|&j| value.data()[j].abs()).sum::<f64>();
        if l1 == 0.0 {
            factors.push(g.scalar(1.0));
            continue;
        }
        let part = g.gather(w, idx)?;
        let norm = g.l1(part);
        let inv = g.recip(norm);
        factors.push(g.scale(inv, normalize_factor(per, 1.0, b)));
    }
    let c = g.stack(&factors)?;
    let zeros = g.constant(Tensor::zeros(value.shape()));
    g.mix(w, zeros, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbrConfig {
    /// Bins with at least this many members add their variance term.
    pub variance_min_count: usize,
}

impl Default for EbrConfig {
    fn default() -> Self {
        EbrConfig { variance_min_count: 3 }
    }
}

/// Bin histograms of one weight tensor's image, one per row group.
pub fn layer_histograms(image: &Tensor, bits: &[u32]) -> Result<Vec<BinHistogram>> {
    let per = image.len() / bits.len().max(1);
    bits.iter()
        .enumerate()
        .map(|(i, &b)| bin_assign(&image.data()[i * per..(i + 1) * per], b))
        .collect()
}

/// EBR of one layer: for every non-empty bin, `(mean − level)²` plus the
/// population variance when the bin has enough members. `image` must be a
/// graph node holding the weight image; bin membership is fixed from its
/// current value.
pub fn ebr_layer(g: &mut Graph, image: Var, bits: &[u32], cfg: &EbrConfig) -> Result<Option<Var>> {
    let value = g.value(image).clone();
    let per = value.len() / bits.len().max(1);
    let mut terms = Vec::new();
    for (grp, &b) in bits.iter().enumerate() {
        if b >= PASSTHROUGH_BITS {
            continue;
        }
        let levels = weight_levels(b);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); levels.len()];
        for j in grp * per..(grp + 1) * per {
            members[bin_index(value.data()[j], b)].push(j);
        }
        for (bin, idx) in members.into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let count = idx.len();
            let part = g.gather(image, idx)?;
            let mean = g.mean(part);
            // the level is a fixed target here
            let diff = g.add_const(mean, -levels[bin]);
            terms.push(g.mul(diff, diff)?);
            if count >= cfg.variance_min_count {
                terms.push(g.variance(part));
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let s = g.stack(&terms)?;
    Ok(Some(g.sum(s)))
}

/// Weight image of layer `w` as the forward pass sees it.
fn layer_image(g: &mut Graph, w: Var, bits: &[u32], normalize: bool) -> Result<Var> {
    let w = if normalize {
        normalize_weights_rows(g, w, bits)?
    } else {
        w
    };
    weight_image(g, w)
}

/// EBR summed over every quantized layer of the model.
pub fn ebr_loss(
    g: &mut Graph,
    vars: &ParamVars,
    plan_bits: &[Vec<u32>],
    normalize: bool,
    cfg: &EbrConfig,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (l, bits) in plan_bits.iter().enumerate() {
        if bits.iter().all(|&b| b >= PASSTHROUGH_BITS) {
            continue;
        }
        let img = layer_image(g, vars.weights[l], bits, normalize)?;
        if let Some(t) = ebr_layer(g, img, bits, cfg)? {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let s = g.stack(&terms)?;
    Ok(g.sum(s))
}

/// `Σ` over quantized layers and bins of the population variance of the
/// weight image within each bin.
pub fn summed_bin_variance(model: &Model, plan_bits: &[Vec<u32>], normalize: bool) -> Result<f64> {
    let mut total = 0.0;
    for (l, bits) in plan_bits.iter().enumerate() {
        if bits.iter().all(|&b| b >= PASSTHROUGH_BITS) {
            continue;
        }
        let mut g = Graph::new();
        let w = g.constant(model.params[l].weight.clone());
        let img = layer_image(&mut g, w, bits, normalize)?;
        for h in layer_histograms(g.value(img), bits)? {
            total += h.variances().iter().sum::<f64>();
        }
    }
    Ok(total)
}

/// `−(1/N)·Σ_i Σ_c softmax(teacher)_c · log softmax(student)_c`. The teacher
/// side is a constant.
pub fn kd_loss(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
    if teacher_logits.shape() != g.shape(student_logits) || teacher_logits.shape().len() != 2 {
        return Err(SdqError::contract(format!(
            "kd_loss: teacher {:?} vs student {:?}",
            teacher_logits.shape(),
            g.shape(student_logits)
        )));
    }
    teacher_logits.ensure_finite("teacher logits")?;
    let (n, k) = (teacher_logits.shape()[0], teacher_logits.shape()[1]);
    let mut p = teacher_logits.clone();
    for row in p.data_mut().chunks_mut(k) {
        softmax_row(row);
    }
    let p = g.constant(p);
    let ls = g.log_softmax(student_logits);
    let prod = g.mul(p, ls)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub lambda_e: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// Normalize weights before quantization.
    pub normalize: bool,
    pub ebr: EbrConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            lambda_e: 5e-2,
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig {
                lr: 0.05,
                ..OptimizerConfig::default()
            },
            schedule: Schedule::Cosine,
            normalize: true,
            ebr: EbrConfig::default(),
            seed: 7,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_e >= 0.0) {
            return Err(SdqError::Config("lambda_e must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(SdqError::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate("post-training optimizer")
    }
}

/// Row-group bitwidths of every model layer under `strategy`.
pub fn strategy_plan_bits(model: &Model, strategy: &MpqStrategy) -> Result<Vec<Vec<u32>>> {
    if strategy.layers.len() != model.num_layers() {
        return Err(SdqError::contract(format!(
            "strategy has {} layers, model has {}",
            strategy.layers.len(),
            model.num_layers()
        )));
    }
    model
        .spec
        .layers
        .iter()
        .zip(&strategy.layers)
        .map(|(spec, a)| {
            if spec.name != a.name {
                return Err(SdqError::contract(format!(
                    "strategy layer '{}' where model has '{}'",
                    a.name, spec.name
                )));
            }
            let bits = a.row_bits();
            if spec.out_features % bits.len() != 0 {
                return Err(SdqError::contract(format!(
                    "layer '{}': {} kernel bitwidths for {} rows",
                    a.name,
                    bits.len(),
                    spec.out_features
                )));
            }
            Ok(bits)
        })
        .collect()
}

/// The fixed inference plan of a strategy.
pub fn strategy_plan(model: &Model, strategy: &MpqStrategy, normalize: bool) -> Result<QuantPlan> {
    Ok(QuantPlan::Fixed {
        bits: strategy_plan_bits(model, strategy)?,
        activation_bits: strategy.activation_bits,
        normalize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase2StepMetrics {
    pub kd: f64,
    pub ebr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// One distillation step of `student` toward `teacher` on `(x, _)`.
#[allow(clippy::too_many_arguments)]
pub fn phase2_step(
    student: &mut Model,
    teacher: &Model,
    plan_bits: &[Vec<u32>],
    activation_bits: u32,
    x: &Tensor,
    cfg: &Phase2Config,
    opt: &mut Optimizer,
    lr_scale: f64,
    at: (usize, usize),
) -> Result<Phase2StepMetrics> {
    let t_logits = teacher.predict(x, &QuantPlan::FullPrecision)?;
    let mut g = Graph::new();
    let vars = student.leaves(&mut g, true);
    let xv = g.constant(x.clone());
    let f = student.forward(&mut g, &vars, xv, Some(activation_bits), |g, l, w| {
        fixed_weight(g, w, &plan_bits[l], cfg.normalize)
    })?;
    let kd = kd_loss(&mut g, &t_logits, f.logits)?;
    let loss = if cfg.lambda_e > 0.0 {
        let ebr = ebr_loss(&mut g, &vars, plan_bits, cfg.normalize, &cfg.ebr)?;
        let scaled = g.scale(ebr, cfg.lambda_e);
        (g.add(kd, scaled)?, g.value(ebr).item())
    } else {
        (kd, 0.0)
    };
    let lv = g.value(loss.0).item();
    if !lv.is_finite() {
        return Err(numerical_abort("post-training", at.0, at.1, lv, student, &f.peaks));
    }
    let kdv = g.value(kd).item();
    g.backward(loss.0)?;
    let grad_norm = step_params(student, &g, &vars, opt, lr_scale);
    Ok(Phase2StepMetrics {
        kd: kdv,
        ebr: loss.1,
        loss: lv,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Epoch {
    pub phase: String,
    pub epoch: usize,
    pub kd: f64,
    pub ebr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub bin_variance: f64,
    pub bin_entropy: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean bin entropy over the row groups of each quantized layer; 0 for
/// unquantized layers.
pub fn layer_entropies(model: &Model, plan_bits: &[Vec<u32>], normalize: bool) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(plan_bits.len());
    for (l, bits) in plan_bits.iter().enumerate() {
        if bits.iter().all(|&b| b >= PASSTHROUGH_BITS) {
            out.push(0.0);
            continue;
        }
        let mut g = Graph::new();
        let w = g.constant(model.params[l].weight.clone());
        let img = layer_image(&mut g, w, bits, normalize)?;
        let hs = layer_histograms(g.value(img), bits)?;
        out.push(hs.iter().map(bin_entropy).sum::<f64>() / hs.len() as f64);
    }
    Ok(out)
}

/// Runs post-training. `student` starts from whatever weights it holds.
pub fn run_phase2(
    student: &mut Model,
    teacher: &Model,
    strategy: &MpqStrategy,
    train: &Dataset,
    cfg: &Phase2Config,
) -> Result<Vec<Phase2Epoch>> {
    cfg.validate()?;
    let plan_bits = strategy_plan_bits(student, strategy)?;
    let plan = strategy_plan(student, strategy, cfg.normalize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_scale = cfg.schedule.factor(epoch, cfg.epochs);
        let mut acc = Phase2StepMetrics {
            kd: 0.0,
            ebr: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
        };
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut rng);
        let steps = batches.len().max(1) as f64;
        for (step, idx) in batches.into_iter().enumerate() {
            let (x, _) = train.batch(&idx);
            let m = phase2_step(
                student,
                teacher,
                &plan_bits,
                strategy.activation_bits,
                &x,
                cfg,
                &mut opt,
                lr_scale,
                (epoch, step),
            )?;
            acc.kd += m.kd;
            acc.ebr += m.ebr;
            acc.loss += m.loss;
            acc.grad_norm += m.grad_norm;
        }
        log.push(Phase2Epoch {
            phase: "post-training".into(),
            epoch,
            kd: acc.kd / steps,
            ebr: acc.ebr / steps,
            loss: acc.loss / steps,
            grad_norm: acc.grad_norm / steps,
            bin_variance: summed_bin_variance(student, &plan_bits, cfg.normalize)?,
            bin_entropy: layer_entropies(student, &plan_bits, cfg.normalize)?,
            train_accuracy: student.accuracy(&train.x, &train.y, &plan)?,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::log_softmax_row;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn entropy_examples() {
        let h = bin_assign(&[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        assert!((bin_entropy(&h) - 2.0 * 2f64.ln()).abs() < 1e-15);
        let h = bin_assign(&[0.9, 1.0, 0.95], 2).unwrap();
        assert_eq!(bin_entropy(&h), 0.0);
        let h = bin_assign(&[-1.0, -1.0 / 3.0], 2).unwrap();
        assert!((bin_entropy(&h) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_higher_level() {
        // midpoint between −1/3 and 1/3 at b = 2
        assert_eq!(bin_index(0.0, 2), 2);
        assert_eq!(bin_index(-2.0 / 3.0, 2), 1);
        assert_eq!(bin_index(-1.5, 2), 0);
        assert_eq!(bin_index(7.0, 2), 3);
    }

    #[test]
    fn uniform_weights_fill_bins_by_voronoi_width() {
        // nearest-level cells at b = 2 have widths 1/3, 2/3, 2/3, 1/3 on [−1, 1]
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let p = bin_assign(&v, 2).unwrap().proportions();
        for (got, want) in p.iter().zip([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]) {
            assert!((got - want).abs() < 0.02 * want, "{p:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        let w = Tensor::vector(vec![1.0, -1.0]);
        assert_eq!(normalize_weights(&w, 1).unwrap(), w);
        let z = Tensor::zeros(&[3]);
        assert_eq!(normalize_weights(&z, 4).unwrap(), z);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::vector((0..257).map(|_| rng.random::<f64>() - 0.3).collect());
        let n = normalize_weights(&w, 4).unwrap();
        let mean_abs = n.data().iter().map(|v| v.abs()).sum::<f64>() / n.len() as f64;
        assert!((mean_abs - 8.0 / 15.0).abs() < 1e-12);
        let scaled = normalize_weights(&w.map(|v| 3.5 * v), 4).unwrap();
        for (a, b) in n.data().iter().zip(scaled.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_normalize_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::new((0..24).map(|_| rng.random::<f64>() - 0.5).collect(), vec![4, 6]).unwrap();
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let one = normalize_weights_rows(&mut g, wv, &[3]).unwrap();
        assert_eq!(g.value(one), &normalize_weights(&w, 3).unwrap());
        let two = normalize_weights_rows(&mut g, wv, &[2, 5]).unwrap();
        let top = Tensor::vector(w.data()[..12].to_vec());
        let bottom = Tensor::vector(w.data()[12..].to_vec());
        let want: Vec<f64> = normalize_weights(&top, 2)
            .unwrap()
            .into_data()
            .into_iter()
            .chain(normalize_weights(&bottom, 5).unwrap().into_data())
            .collect();
        for (a, b) in g.value(two).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn ebr_of(values: &[f64], bits: u32, min_count: usize) -> f64 {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(values.to_vec()));
        let e = ebr_layer(&mut g, v, &[bits], &EbrConfig { variance_min_count: min_count })
            .unwrap()
            .unwrap();
        g.value(e).item()
    }

    #[test]
    fn ebr_examples() {
        let lv = 1.0 / 3.0;
        assert!(ebr_of(&[-1.0, lv, lv, 1.0, 1.0, 1.0], 2, 3) < 1e-30);
        let d = 0.05;
        assert!(ebr_of(&[lv - d, lv + d], 2, 3).abs() < 1e-15);
        let three = ebr_of(&[lv - d, lv, lv + d], 2, 3);
        assert!((three - 2.0 * d * d / 3.0).abs() < 1e-15);
        // the alternative reading counts pairs too
        assert!((ebr_of(&[lv - d, lv + d], 2, 2) - d * d).abs() < 1e-15);
    }

    #[test]
    fn ebr_matches_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for bits in [1, 2, 3, 4] {
            let levels = weight_levels(bits);
            let mut want = 0.0;
            for (bin, level) in levels.iter().enumerate() {
                let m: Vec<f64> = v.iter().copied().filter(|&x| bin_index(x, bits) == bin).collect();
                if m.is_empty() {
                    continue;
                }
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                want += (mean - level) * (mean - level);
                if m.len() >= 3 {
                    want += m.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m.len() as f64;
                }
            }
            assert!((ebr_of(&v, bits, 3) - want).abs() < 1e-10);
        }
    }

    fn kd_value(t: &Tensor, s: &Tensor) -> f64 {
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = kd_loss(&mut g, t, sv).unwrap();
        g.value(l).item()
    }

    fn entropy_rows(t: &Tensor) -> f64 {
        let k = t.shape()[1];
        let mut total = 0.0;
        for row in t.data().chunks(k) {
            let mut p = row.to_vec();
            softmax_row(&mut p);
            total -= p.iter().map(|q| q * q.ln()).sum::<f64>();
        }
        total / t.shape()[0] as f64
    }

    #[test]
    fn kd_examples() {
        let t = Tensor::new(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5, -2.0, 1.0], vec![2, 4]).unwrap();
        assert!((kd_value(&t, &t) - entropy_rows(&t)).abs() < 1e-12);
        let peaked = Tensor::new(vec![20.0, -20.0, -20.0, -20.0], vec![1, 4]).unwrap();
        assert!(kd_value(&peaked, &peaked) < 1e-15);

        // hand-rolled two-loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::new((0..12).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(), vec![3, 4]).unwrap();
        let t = Tensor::new((0..12).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(), vec![3, 4]).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let mut p = t.data()[i * 4..i * 4 + 4].to_vec();
            softmax_row(&mut p);
            let mut ls = s.data()[i * 4..i * 4 + 4].to_vec();
            log_softmax_row(&mut ls);
            for c in 0..4 {
                want -= p[c] * ls[c];
            }
        }
        assert!((kd_value(&t, &s) - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kd_teacher_gets_no_gradient_and_rejects_nan() {
        let t = Tensor::new(vec![f64::NAN, 0.0], vec![1, 2]).unwrap();
        let mut g = Graph::new();
        let s = g.param(Tensor::new(vec![0.0, 0.0], vec![1, 2]).unwrap());
        assert!(kd_loss(&mut g, &t, s).is_err());
    }

    proptest! {
        #[test]
        fn kd_is_at_least_teacher_entropy(
            t in prop::collection::vec(-3.0f64..3.0, 8),
            s in prop::collection::vec(-3.0f64..3.0, 8),
        ) {
            let t = Tensor::new(t, vec![2, 4]).unwrap();
            let s = Tensor::new(s, vec![2, 4]).unwrap();
            prop_assert!(kd_value(&t, &s) >= entropy_rows(&t) - 1e-12);
        }

        #[test]
        fn proportions_sum_to_one(v in prop::collection::vec(-1.5f64..1.5, 1..200), bits in 1u32..6) {
            let h = bin_assign(&v, bits).unwrap();
            prop_assert_eq!(h.total(), v.len());
            prop_assert!((h.proportions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(bin_entropy(&h) <= bits as f64 * 2f64.ln() + 1e-12);
        }
    }
}
