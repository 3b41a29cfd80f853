//! Uniform quantizers with straight-through gradients.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`). The weight
//! quantizer maps into `[-1, 1]` via `2·q_b(tanh(w)/(2·max|tanh w|) + ½) − 1`
//! with the maximum taken over the whole tensor.

use crate::error::{Result, SdqError};
use crate::grad::{Graph, Var};
use crate::tensor::Tensor;

/// Bitwidths at or above this value bypass quantization entirely.
pub const PASSTHROUGH_BITS: u32 = 32;

const UNIT_TOLERANCE: f64 = 1e-12;

/// `2^b − 1`, the number of steps on a `b`-bit grid.
pub fn grid_steps(bits: u32) -> f64 {
    2f64.powi(bits as i32) - 1.0
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 {
        return Err(SdqError::contract("bitwidth must be at least 1"));
    }
    Ok(())
}

/// The `b`-bit quantizer on `[0, 1]`; its grid is `{k/(2^b−1)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitQuantizer {
    bits: u32,
}

impl UnitQuantizer {
    pub fn new(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(UnitQuantizer { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> Vec<f64> {
        let l = grid_steps(self.bits);
        (0..=l as u64).map(|k| k as f64 / l).collect()
    }

    pub fn apply(&self, x: f64) -> f64 {
        let l = grid_steps(self.bits);
        (l * x).round() / l
    }
}

/// Grid values of the `b`-bit weight quantizer, `{2k/(2^b−1) − 1}`.
pub fn weight_levels(bits: u32) -> Vec<f64> {
    let l = grid_steps(bits);
    (0..=l as u64).map(|k| 2.0 * k as f64 / l - 1.0).collect()
}

/// Forward `round((2^b−1)·x)/(2^b−1)`, backward identity.
pub fn quantize_unit(g: &mut Graph, x: Var, bits: u32) -> Result<Var> {
    check_bits(bits)?;
    if let Some((i, v)) = g
        .value(x)
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= -UNIT_TOLERANCE && **v <= 1.0 + UNIT_TOLERANCE))
    {
        return Err(SdqError::contract(format!(
            "quantize_unit: entry {i} = {v} lies outside [0, 1]"
        )));
    }
    g.quant_unit(x, &[grid_steps(bits)])
}

/// Continuous counterpart of the weight quantizer: `tanh(w)/max|tanh(w)|`.
///
/// This is the real-valued weight on the same `[-1, 1]` scale as the
/// quantized output; quantization error and bin statistics are measured
/// against it. All-zero input maps to zeros.
pub fn weight_image(g: &mut Graph, w: Var) -> Result<Var> {
    let t = g.tanh(w);
    let m = g.max_abs(t);
    if g.value(m).item() == 0.0 {
        let shape = g.shape(w).to_vec();
        return Ok(g.constant(Tensor::zeros(&shape)));
    }
    let inv = g.recip(m);
    g.mul_scalar(t, inv)
}

/// Weight quantizer into `[-1, 1]` at a single bitwidth.
pub fn quantize_weight(g: &mut Graph, w: Var, bits: u32) -> Result<Var> {
    quantize_weight_rows(g, w, &[bits])
}

/// Weight quantizer where the rows of `w` split into `bits.len()` equal
/// groups, each with its own bitwidth. The `max|tanh|` scale stays per
/// tensor.
pub fn quantize_weight_rows(g: &mut Graph, w: Var, bits: &[u32]) -> Result<Var> {
    for &b in bits {
        check_bits(b)?;
    }
    g.value(w).ensure_finite("quantize_weight input")?;
    let t = g.tanh(w);
    let m = g.max_abs(t);
    if g.value(m).item() == 0.0 {
        let shape = g.shape(w).to_vec();
        return Ok(g.constant(Tensor::zeros(&shape)));
    }
    let two_m = g.scale(m, 2.0);
    let inv = g.recip(two_m);
    let u = g.mul_scalar(t, inv)?;
    let u = g.add_const(u, 0.5);
    let levels: Vec<f64> = bits.iter().map(|&b| grid_steps(b)).collect();
    let q = g.quant_unit(u, &levels)?;
    let q = g.scale(q, 2.0);
    Ok(g.add_const(q, -1.0))
}

/// Activation quantizer: clamp to `[0, 1]`, then the unit quantizer.
pub fn quantize_activation(g: &mut Graph, x: Var, bits: u32) -> Result<Var> {
    check_bits(bits)?;
    g.value(x).ensure_finite("quantize_activation input")?;
    let c = g.clamp(x, 0.0, 1.0);
    if bits >= PASSTHROUGH_BITS {
        return Ok(c);
    }
    g.quant_unit(c, &[grid_steps(bits)])
}

/// Range-clamped uniform quantizer with step `s = (w_u − w_l)/(2^b − 1)`.
/// The grid is anchored at zero: outputs are `s·round(clamp(w)/s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampQuantizer {
    bits: u32,
    lower: f64,
    upper: f64,
}

impl ClampQuantizer {
    pub fn new(bits: u32, lower: f64, upper: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(SdqError::contract(format!(
                "clamp quantizer needs finite w_l < w_u, got [{lower}, {upper}]"
            )));
        }
        Ok(ClampQuantizer { bits, lower, upper })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn bins(&self) -> f64 {
        2f64.powi(self.bits as i32)
    }

    pub fn step(&self) -> f64 {
        self.range() / (self.bins() - 1.0)
    }

    pub fn apply(&self, w: f64) -> f64 {
        let s = self.step();
        s * (w.clamp(self.lower, self.upper) / s).round()
    }
}

pub fn quantize_clamped(w: &Tensor, q: &ClampQuantizer) -> Tensor {
    w.map(|v| q.apply(v))
}

/// `||wq − wr||²₂`.
pub fn quant_error_sq(wq: &Tensor, wr: &Tensor) -> Result<f64> {
    if wq.shape() != wr.shape() {
        return Err(SdqError::contract(format!(
            "quant_error_sq: shape mismatch {:?} vs {:?}",
            wq.shape(),
            wr.shape()
        )));
    }
    Ok(wq
        .data()
        .iter()
        .zip(wr.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `C(b) = 1/(12·(2^b − 1)²)`, the expected squared error of a `b`-bit
/// uniform quantizer on uniform input, in units of the squared range.
pub fn expected_error_coeff(bits: u32) -> f64 {
    let l = grid_steps(bits);
    1.0 / (12.0 * l * l)
}

/// Quantize `w` at `bits` outside any graph and return `(quantized,
/// image)` where `image = tanh(w)/max|tanh(w)|`.
pub fn quantize_weight_values(w: &Tensor, bits: &[u32]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let q = quantize_weight_rows(&mut g, wv, bits)?;
    let img = weight_image(&mut g, wv)?;
    Ok((g.value(q).clone(), g.value(img).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: &[f64], b: u32) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(x.to_vec()));
        let q = quantize_unit(&mut g, v, b).unwrap();
        g.value(q).data().to_vec()
    }

    #[test]
    fn unit_half_rounds_up() {
        assert_eq!(unit(&[0.5], 2), vec![2.0 / 3.0]);
    }

    #[test]
    fn unit_endpoints_fixed() {
        for b in 1..=8 {
            assert_eq!(unit(&[0.0, 1.0], b), vec![0.0, 1.0]);
        }
    }

    #[test]
    fn unit_rejects_out_of_range() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![0.2, 1.1]));
        assert!(matches!(
            quantize_unit(&mut g, v, 3),
            Err(SdqError::Contract(_))
        ));
        let v = g.param(Tensor::vector(vec![1.0 + 1e-13]));
        assert!(quantize_unit(&mut g, v, 3).is_ok());
    }

    #[test]
    fn unit_quantizer_levels() {
        let q = UnitQuantizer::new(3).unwrap();
        let lv = q.levels();
        assert_eq!(lv.len(), 8);
        assert_eq!(lv[0], 0.0);
        assert_eq!(lv[7], 1.0);
        assert!(UnitQuantizer::new(0).is_err());
    }

    #[test]
    fn weight_symmetric_one_bit() {
        for t in [0.01, 0.7, 3.0] {
            let mut g = Graph::new();
            let w = g.param(Tensor::vector(vec![t, -t]));
            let q = quantize_weight(&mut g, w, 1).unwrap();
            assert_eq!(g.value(q).data(), &[1.0, -1.0]);
        }
    }

    #[test]
    fn weight_zero_and_large() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.0, 50.0]));
        let q = quantize_weight(&mut g, w, 2).unwrap();
        // 0 maps to u = 1/2, round(1.5) = 2 -> 2·(2/3) − 1 = 1/3
        let v = g.value(q).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn weight_all_zero_is_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[3, 2]));
        let q = quantize_weight(&mut g, w, 4).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_clamps_and_masks() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-0.3, 0.5, 1.2, 0.4]));
        let q = quantize_activation(&mut g, x, 2).unwrap();
        let v = g.value(q).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0 / 3.0);
        assert_eq!(v[2], 1.0);
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn activation_rejects_nan() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![f64::NAN]));
        assert!(quantize_activation(&mut g, x, 4).is_err());
    }

    #[test]
    fn clamped_examples() {
        let q = ClampQuantizer::new(2, 0.0, 3.0).unwrap();
        assert_eq!(q.step(), 1.0);
        assert_eq!(q.apply(1.4), 1.0);
        let q = ClampQuantizer::new(3, -0.37, 1.1).unwrap();
        assert!((q.apply(-0.37) - (-0.37)).abs() <= q.step() / 2.0);
        assert!(ClampQuantizer::new(2, 1.0, 1.0).is_err());
    }

    #[test]
    fn error_sq_examples() {
        let a = Tensor::vector(vec![0.3, 0.4]);
        assert_eq!(quant_error_sq(&a, &a).unwrap(), 0.0);
        let b = Tensor::vector(vec![0.2, 0.5]);
        assert!((quant_error_sq(&a, &b).unwrap() - 0.02).abs() < 1e-15);
        assert!(quant_error_sq(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn error_coeff_values() {
        assert_eq!(expected_error_coeff(1), 1.0 / 12.0);
        assert_eq!(expected_error_coeff(2), 1.0 / 108.0);
    }

    #[test]
    fn row_groups_use_their_own_grid() {
        let w = Tensor::new(vec![0.3, -0.2, 0.1, -0.2], vec![2, 2]).unwrap();
        let (q, _) = quantize_weight_values(&w, &[1, 8]).unwrap();
        assert!(q.data()[..2].iter().all(|v| v.abs() == 1.0));
        assert!(q.data()[2..].iter().all(|v| v.abs() < 1.0));
    }
}
