//! Differentiable bitwidth parameters and stochastic bitwidth quantization.
//!
//! Every search unit (a layer, by default) carries one parameter `β` per
//! candidate bitwidth, all initialised to 1. While a unit sits at candidate
//! index `i ≥ 1`, each forward pass draws a binary choice `c` with
//! `P(c = 1) = β[i]` through the straight-through Gumbel-softmax estimator
//! and quantizes the unit's weights to `c·Q_{b_i}(w) + (1−c)·Q_{b_{i−1}}(w)`.

use std::ops::Range;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqError};
use crate::grad::{sigmoid, Graph, Var};
use crate::quant::{quantize_weight_rows, PASSTHROUGH_BITS};
use crate::tensor::Tensor;

/// Lower clamp for `β` after every update, and the margin kept from 0 and 1
/// before taking logarithms.
pub const BETA_EPS: f64 = 1e-6;

/// How search units map onto the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One unit for every searchable layer together.
    Net,
    /// One unit per block of consecutive layers.
    Block,
    /// One unit per layer.
    #[default]
    Layer,
    /// One unit per output channel (row) of every layer.
    Kernel,
}

impl std::str::FromStr for Granularity {
    type Err = SdqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net" => Ok(Granularity::Net),
            "block" => Ok(Granularity::Block),
            "layer" => Ok(Granularity::Layer),
            "kernel" => Ok(Granularity::Kernel),
            other => Err(SdqError::Config(format!("unknown granularity '{other}'"))),
        }
    }
}

/// What the table needs to know about each parameter layer.
#[derive(Debug, Clone)]
pub struct DbpLayer {
    pub name: String,
    pub rows: usize,
    pub block: usize,
    pub pinned_bits: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct DbpUnit {
    pub name: String,
    /// `(layer, rows)` pairs covered by this unit.
    pub members: Vec<(usize, Range<usize>)>,
    beta: Vec<f64>,
    active: usize,
}

impl DbpUnit {
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn active_beta(&self) -> f64 {
        self.beta[self.active]
    }
}

/// One bitwidth reduction performed by [`DbpTable::decay`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitChange {
    pub unit: String,
    pub old_bits: u32,
    pub new_bits: u32,
}

#[derive(Debug, Clone)]
pub struct DbpTable {
    candidates: Vec<u32>,
    units: Vec<DbpUnit>,
    /// Per layer, the unit of each row group in row order; empty if pinned.
    layer_units: Vec<Vec<usize>>,
    layers: Vec<DbpLayer>,
}

impl DbpTable {
    pub fn new(layers: Vec<DbpLayer>, candidates: &[u32], granularity: Granularity) -> Result<Self> {
        if candidates.is_empty() {
            return Err(SdqError::Config("candidate set is empty".into()));
        }
        if candidates[0] == 0 || candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SdqError::Config(format!(
                "candidate set must be strictly increasing and start at 1 or more, got {candidates:?}"
            )));
        }
        let top = candidates.len() - 1;
        let fresh = |name: String| DbpUnit {
            name,
            members: Vec::new(),
            beta: vec![1.0; candidates.len()],
            active: top,
        };

        let mut units: Vec<DbpUnit> = Vec::new();
        let mut layer_units = vec![Vec::new(); layers.len()];
        let mut block_unit: Vec<(usize, usize)> = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            if layer.pinned_bits.is_some() {
                continue;
            }
            match granularity {
                Granularity::Net => {
                    if units.is_empty() {
                        units.push(fresh("net".into()));
                    }
                    units[0].members.push((l, 0..layer.rows));
                    layer_units[l].push(0);
                }
                Granularity::Block => {
                    let u = match block_unit.iter().find(|(b, _)| *b == layer.block) {
                        Some(&(_, u)) => u,
                        None => {
                            units.push(fresh(format!("block{}", layer.block)));
                            block_unit.push((layer.block, units.len() - 1));
                            units.len() - 1
                        }
                    };
                    units[u].members.push((l, 0..layer.rows));
                    layer_units[l].push(u);
                }
                Granularity::Layer => {
                    let mut u = fresh(layer.name.clone());
                    u.members.push((l, 0..layer.rows));
                    units.push(u);
                    layer_units[l].push(units.len() - 1);
                }
                Granularity::Kernel => {
                    for r in 0..layer.rows {
                        let mut u = fresh(format!("{}[{r}]", layer.name));
                        u.members.push((l, r..r + 1));
                        units.push(u);
                        layer_units[l].push(units.len() - 1);
                    }
                }
            }
        }
        Ok(DbpTable {
            candidates: candidates.to_vec(),
            units,
            layer_units,
            layers,
        })
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    pub fn units(&self) -> &[DbpUnit] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [DbpUnit] {
        &mut self.units
    }

    pub fn unit(&self, u: usize) -> &DbpUnit {
        &self.units[u]
    }

    pub fn layers(&self) -> &[DbpLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn active_bits(&self, u: usize) -> u32 {
        self.candidates[self.units[u].active]
    }

    /// Bitwidth of the lower branch, equal to the active one at the floor.
    pub fn lower_bits(&self, u: usize) -> u32 {
        self.candidates[self.units[u].active.saturating_sub(1)]
    }

    pub fn layer_units(&self, l: usize) -> &[usize] {
        &self.layer_units[l]
    }

    pub fn pinned_bits(&self, l: usize) -> Option<u32> {
        self.layers[l].pinned_bits
    }

    /// Current bitwidth of each row group of layer `l`.
    pub fn layer_bits(&self, l: usize) -> Vec<u32> {
        match self.layers[l].pinned_bits {
            Some(b) => vec![b],
            None => self.layer_units[l].iter().map(|&u| self.active_bits(u)).collect(),
        }
    }

    /// Representative per-layer bitwidth: the single value for uniform
    /// layers, the row-weighted mean rounded up otherwise.
    pub fn layer_bits_summary(&self, l: usize) -> u32 {
        let bits = self.layer_bits(l);
        if bits.iter().all(|&b| b == bits[0]) {
            bits[0]
        } else {
            let s: u32 = bits.iter().sum();
            s.div_ceil(bits.len() as u32)
        }
    }

    pub fn set_active_index(&mut self, u: usize, i: usize) -> Result<()> {
        if i >= self.candidates.len() {
            return Err(SdqError::contract(format!(
                "candidate index {i} out of range for {} candidates",
                self.candidates.len()
            )));
        }
        self.units[u].active = i;
        Ok(())
    }

    /// Clamp every `β` into `[BETA_EPS, 1]`.
    pub fn clamp_betas(&mut self) {
        for u in &mut self.units {
            for b in &mut u.beta {
                *b = b.clamp(BETA_EPS, 1.0);
            }
        }
    }

    /// Move every unit whose active `β` fell strictly below `threshold` one
    /// candidate down. Units at the lowest candidate stay put. The newly
    /// active `β` keeps whatever value it has (1 unless set otherwise).
    pub fn decay(&mut self, threshold: f64) -> Vec<BitChange> {
        let mut log = Vec::new();
        for u in 0..self.units.len() {
            let unit = &self.units[u];
            if unit.active >= 1 && unit.beta[unit.active] < threshold {
                let old_bits = self.candidates[unit.active];
                self.units[u].active -= 1;
                log.push(BitChange {
                    unit: self.units[u].name.clone(),
                    old_bits,
                    new_bits: self.candidates[self.units[u].active],
                });
            }
        }
        log
    }
}

/// Temperature and noise settings of the Gumbel-softmax choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Hard forward, soft backward. `false` uses the soft value forward too.
    pub hard: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 1.0,
            seed: 0,
            hard: true,
        }
    }
}

/// `−log(−log u)` with `u` uniform on the open interval `(0, 1)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    gumbel_from_uniform(u)
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Soft choice for given noise: `σ(((log β + g0) − (log(1−β) + g1))/τ)`,
/// which equals the two-way Gumbel-softmax weight of the upper branch.
pub fn soft_choice_value(beta: f64, g0: f64, g1: f64, tau: f64) -> f64 {
    let b = beta.clamp(BETA_EPS, 1.0 - BETA_EPS);
    sigmoid(((b.ln() + g0) - ((1.0 - b).ln() + g1)) / tau)
}

/// Seeded Gumbel noise source plus diagnostics.
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    cfg: GumbelConfig,
    rng: ChaCha8Rng,
    clamped: u64,
}

/// A drawn choice variable.
#[derive(Debug, Clone, Copy)]
pub struct Choice {
    /// Value used in the forward pass.
    pub c: Var,
    pub soft: f64,
    pub hard: f64,
}

impl GumbelSampler {
    pub fn new(cfg: GumbelConfig) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return Err(SdqError::Config(format!(
                "Gumbel temperature must be positive, got {}",
                cfg.tau
            )));
        }
        Ok(GumbelSampler {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            clamped: 0,
        })
    }

    pub fn config(&self) -> &GumbelConfig {
        &self.cfg
    }

    /// How many times `β` had to be pulled into `[ε, 1−ε]` before the log.
    pub fn clamp_count(&self) -> u64 {
        self.clamped
    }

    pub fn gumbel(&mut self) -> f64 {
        sample_gumbel(&mut self.rng)
    }

    /// Draws fresh noise and builds the choice for `beta`.
    pub fn soft_choice(&mut self, g: &mut Graph, beta: Var) -> Result<Choice> {
        let g0 = self.gumbel();
        let g1 = self.gumbel();
        self.soft_choice_with_noise(g, beta, g0, g1)
    }

    /// The choice for frozen noise `(g0, g1)`.
    pub fn soft_choice_with_noise(&mut self, g: &mut Graph, beta: Var, g0: f64, g1: f64) -> Result<Choice> {
        let bv = g.value(beta).item();
        let b = if bv > BETA_EPS && bv < 1.0 - BETA_EPS {
            beta
        } else {
            self.clamped += 1;
            let clamped = Tensor::scalar(bv.clamp(BETA_EPS, 1.0 - BETA_EPS));
            g.straight_through(clamped, beta)?
        };
        let log_b = g.log(b);
        let neg = g.scale(b, -1.0);
        let one_minus = g.add_const(neg, 1.0);
        let log_nb = g.log(one_minus);
        let z0 = g.add_const(log_b, g0);
        let z1 = g.add_const(log_nb, g1);
        let d = g.sub(z0, z1)?;
        let d = g.scale(d, 1.0 / self.cfg.tau);
        let soft_var = g.sigmoid(d);
        let soft = g.value(soft_var).item();
        let hard = if soft >= 0.5 { 1.0 } else { 0.0 };
        let c = if self.cfg.hard {
            g.straight_through(Tensor::scalar(hard), soft_var)?
        } else {
            soft_var
        };
        Ok(Choice { c, soft, hard })
    }
}

/// The random draws and parameter leaves of one stochastic forward pass.
#[derive(Debug)]
pub struct StochasticPass {
    betas: Vec<Var>,
    choices: Vec<Option<Choice>>,
}

impl StochasticPass {
    /// Adds a differentiable leaf for every unit's active `β` and draws one
    /// choice per unit that has a lower neighbour.
    pub fn draw(g: &mut Graph, dbp: &DbpTable, sampler: &mut GumbelSampler) -> Result<Self> {
        let mut betas = Vec::with_capacity(dbp.units().len());
        let mut choices = Vec::with_capacity(dbp.units().len());
        for unit in dbp.units() {
            let beta = g.param(Tensor::scalar(unit.active_beta()));
            betas.push(beta);
            if unit.active_index() >= 1 {
                choices.push(Some(sampler.soft_choice(g, beta)?));
            } else {
                choices.push(None);
            }
        }
        Ok(StochasticPass { betas, choices })
    }

    /// Like [`StochasticPass::draw`] with the hard value of every choice
    /// forced; used to enumerate branches.
    pub fn forced(g: &mut Graph, dbp: &DbpTable, hard: f64) -> Result<Self> {
        let mut betas = Vec::new();
        let mut choices = Vec::new();
        for unit in dbp.units() {
            let beta = g.param(Tensor::scalar(unit.active_beta()));
            betas.push(beta);
            choices.push((unit.active_index() >= 1).then(|| Choice {
                c: g.scalar(hard),
                soft: hard,
                hard,
            }));
        }
        Ok(StochasticPass { betas, choices })
    }

    pub fn beta_var(&self, unit: usize) -> Var {
        self.betas[unit]
    }

    pub fn choice(&self, unit: usize) -> Option<&Choice> {
        self.choices[unit].as_ref()
    }

    /// Quantized weight of layer `l` for this pass.
    pub fn quantize(&self, g: &mut Graph, dbp: &DbpTable, l: usize, w: Var) -> Result<Var> {
        if let Some(b) = dbp.pinned_bits(l) {
            if b >= PASSTHROUGH_BITS {
                return Ok(w);
            }
            return quantize_weight_rows(g, w, &[b]);
        }
        let units = dbp.layer_units(l);
        let hi: Vec<u32> = units.iter().map(|&u| dbp.active_bits(u)).collect();
        if units.iter().all(|&u| self.choices[u].is_none()) {
            return quantize_weight_rows(g, w, &hi);
        }
        let lo: Vec<u32> = units.iter().map(|&u| dbp.lower_bits(u)).collect();
        let q_hi = quantize_weight_rows(g, w, &hi)?;
        let q_lo = quantize_weight_rows(g, w, &lo)?;
        let mut cs = Vec::with_capacity(units.len());
        for &u in units {
            cs.push(match &self.choices[u] {
                Some(ch) => ch.c,
                None => g.scalar(1.0),
            });
        }
        let c = g.stack(&cs)?;
        g.mix(q_hi, q_lo, c)
    }
}

/// Quantize a single layer stochastically: one draw per unit, then the mix.
pub fn stochastic_quantize(
    g: &mut Graph,
    w: Var,
    layer: usize,
    dbp: &DbpTable,
    sampler: &mut GumbelSampler,
) -> Result<(Var, StochasticPass)> {
    let pass = StochasticPass::draw(g, dbp, sampler)?;
    let q = pass.quantize(g, dbp, layer, w)?;
    Ok((q, pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(n: usize, rows: usize) -> Vec<DbpLayer> {
        (0..n)
            .map(|i| DbpLayer {
                name: format!("l{i}"),
                rows,
                block: i / 2,
                pinned_bits: None,
            })
            .collect()
    }

    #[test]
    fn init_at_top_with_unit_betas() {
        let t = DbpTable::new(layers(3, 2), &[2, 3, 4], Granularity::Layer).unwrap();
        assert_eq!(t.units().len(), 3);
        for u in 0..3 {
            assert_eq!(t.active_bits(u), 4);
            assert!(t.unit(u).beta().iter().all(|&b| b == 1.0));
        }
    }

    #[test]
    fn granularity_unit_counts() {
        let mut ls = layers(4, 3);
        ls[0].pinned_bits = Some(8);
        let count = |g| DbpTable::new(ls.clone(), &[2, 4], g).unwrap().units().len();
        assert_eq!(count(Granularity::Net), 1);
        assert_eq!(count(Granularity::Block), 2);
        assert_eq!(count(Granularity::Layer), 3);
        assert_eq!(count(Granularity::Kernel), 9);
    }

    #[test]
    fn bad_candidates_rejected() {
        assert!(DbpTable::new(layers(1, 1), &[], Granularity::Layer).is_err());
        assert!(DbpTable::new(layers(1, 1), &[4, 2], Granularity::Layer).is_err());
        assert!(DbpTable::new(layers(1, 1), &[0, 2], Granularity::Layer).is_err());
    }

    #[test]
    fn decay_is_strict_and_floors() {
        let mut t = DbpTable::new(layers(3, 1), &[2, 3], Granularity::Layer).unwrap();
        assert!(t.decay(1e-4).is_empty());
        t.units_mut()[0].beta_mut()[1] = 1e-4;
        t.units_mut()[1].beta_mut()[1] = 0.5e-4;
        let log = t.decay(1e-4);
        assert_eq!(
            log,
            vec![BitChange {
                unit: "l1".into(),
                old_bits: 3,
                new_bits: 2
            }]
        );
        // the newly active level keeps its untouched value
        assert_eq!(t.unit(1).beta()[0], 1.0);
        // at the floor nothing moves even with a tiny beta
        t.units_mut()[1].beta_mut()[0] = 1e-9;
        assert!(t.decay(1e-4).is_empty());
        assert_eq!(t.active_bits(1), 2);
    }

    #[test]
    fn clamp_keeps_betas_in_range() {
        let mut t = DbpTable::new(layers(1, 1), &[2, 3], Granularity::Layer).unwrap();
        t.units_mut()[0].beta_mut()[1] = -3.0;
        t.units_mut()[0].beta_mut()[0] = 2.0;
        t.clamp_betas();
        assert_eq!(t.unit(0).beta(), &[1.0, BETA_EPS]);
    }

    #[test]
    fn gumbel_at_inverse_e_is_zero() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
    }

    #[test]
    fn near_one_beta_almost_always_high() {
        let mut s = GumbelSampler::new(GumbelConfig::default()).unwrap();
        let mut hits = 0;
        for _ in 0..10_000 {
            let mut g = Graph::new();
            let b = g.param(Tensor::scalar(1.0 - BETA_EPS));
            if s.soft_choice(&mut g, b).unwrap().hard == 1.0 {
                hits += 1;
            }
        }
        assert!(hits >= 9990, "{hits}");
    }

    #[test]
    fn beta_at_one_is_clamped_and_counted() {
        let mut s = GumbelSampler::new(GumbelConfig::default()).unwrap();
        let mut g = Graph::new();
        let b = g.param(Tensor::scalar(1.0));
        let ch = s.soft_choice_with_noise(&mut g, b, 0.1, -0.2).unwrap();
        assert_eq!(s.clamp_count(), 1);
        assert!(ch.soft.is_finite());
        g.backward(ch.c).unwrap();
        // gradient still reaches the unclamped leaf
        assert!(g.grad(b).item() > 0.0);
    }

    #[test]
    fn bad_temperature_rejected() {
        let cfg = GumbelConfig {
            tau: 0.0,
            ..GumbelConfig::default()
        };
        assert!(GumbelSampler::new(cfg).is_err());
    }
}
