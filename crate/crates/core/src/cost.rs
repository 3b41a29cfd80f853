//! BitOPs, model size and compression rate of a strategy, plus rounding to
//! hardware-supported bitwidths.
//!
//! `BitOPs(f) = b_w · b_a · |f| · w_f · h_f / s_f²`, where `w_f × h_f` is the
//! spatial size of the feature map the filter slides over and `s_f` its
//! stride, so `w_f·h_f/s_f²` is the number of output positions.
//!
//! Layer tables are plain text, one layer per line:
//!
//! ```text
//! # name kind params in_w in_h stride
//! conv1 conv 9408 224 224 2
//! fc dense 512000 1 1 1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqError};
use crate::strategy::MpqStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv,
    Depthwise,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv => "conv",
            LayerKind::Depthwise => "depthwise",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(LayerKind::Dense),
            "conv" => Ok(LayerKind::Conv),
            "depthwise" => Ok(LayerKind::Depthwise),
            other => Err(format!("unknown layer kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub kind: LayerKind,
    /// Filter cardinality: `k·k·c_in·c_out` for conv, `in·out` for dense.
    pub params: u64,
    /// Spatial width of the input feature map.
    pub in_w: u64,
    /// Spatial height of the input feature map.
    pub in_h: u64,
    pub stride: u64,
}

impl LayerMeta {
    pub fn new(name: &str, kind: LayerKind, params: u64, in_w: u64, in_h: u64, stride: u64) -> Result<Self> {
        if params == 0 {
            return Err(SdqError::contract(format!("layer '{name}' has zero parameters")));
        }
        if stride == 0 {
            return Err(SdqError::contract(format!("layer '{name}' has stride 0")));
        }
        Ok(LayerMeta {
            name: name.to_string(),
            kind,
            params,
            in_w,
            in_h,
            stride,
        })
    }
}

pub fn bitops(meta: &LayerMeta, bw: u32, ba: u32) -> Result<f64> {
    if bw == 0 || ba == 0 {
        return Err(SdqError::contract("bitops: bitwidths must be at least 1"));
    }
    let s = meta.stride as f64;
    Ok(bw as f64 * ba as f64 * meta.params as f64 * meta.in_w as f64 * meta.in_h as f64 / (s * s))
}

pub fn parse_layer_table(text: &str, source: &str) -> Result<Vec<LayerMeta>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| SdqError::parse(source, i + 1, m);
        if f.len() != 6 {
            return Err(err(format!(
                "expected 6 fields (name kind params in_w in_h stride), found {}",
                f.len()
            )));
        }
        let kind = f[1].parse::<LayerKind>().map_err(err)?;
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|e| SdqError::parse(source, i + 1, format!("bad {what} '{s}': {e}")))
        };
        let meta = LayerMeta::new(
            f[0],
            kind,
            num(f[2], "params")?,
            num(f[3], "in_w")?,
            num(f[4], "in_h")?,
            num(f[5], "stride")?,
        )
        .map_err(|e| err(e.to_string()))?;
        out.push(meta);
    }
    Ok(out)
}

pub fn format_layer_table(metas: &[LayerMeta]) -> String {
    let mut s = String::from("# name kind params in_w in_h stride\n");
    for m in metas {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            m.name,
            m.kind.as_str(),
            m.params,
            m.in_w,
            m.in_h,
            m.stride
        ));
    }
    s
}

pub fn load_layer_table(path: &Path) -> Result<Vec<LayerMeta>> {
    let text = std::fs::read_to_string(path).map_err(|e| SdqError::io(path, e))?;
    parse_layer_table(&text, &path.display().to_string())
}

/// ImageNet ResNet18 (basic blocks, 1×1 projection shortcuts, no biases).
pub fn resnet18_layer_table() -> Vec<LayerMeta> {
    let mut t = Vec::new();
    let mut push = |name: String, kind, params, hw, stride| {
        t.push(LayerMeta::new(&name, kind, params, hw, hw, stride).expect("static table"));
    };
    push("conv1".into(), LayerKind::Conv, 7 * 7 * 3 * 64, 224, 2);
    let stages = [(64u64, 56u64), (128, 28), (256, 14), (512, 7)];
    let mut cin = 64;
    let mut hw = 56;
    for (s, &(cout, out_hw)) in stages.iter().enumerate() {
        for b in 0..2 {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let pre = format!("layer{}.{b}", s + 1);
            push(format!("{pre}.conv1"), LayerKind::Conv, 9 * cin * cout, hw, stride);
            push(format!("{pre}.conv2"), LayerKind::Conv, 9 * cout * cout, out_hw, 1);
            if stride != 1 || cin != cout {
                push(format!("{pre}.downsample"), LayerKind::Conv, cin * cout, hw, stride);
            }
            cin = cout;
            hw = out_hw;
        }
    }
    push("fc".into(), LayerKind::Dense, 512 * 1000, 1, 1);
    t
}

fn lookup<'a>(strategy: &'a MpqStrategy, meta: &LayerMeta) -> Result<&'a crate::strategy::LayerAssignment> {
    strategy.layer(&meta.name).ok_or_else(|| {
        SdqError::contract(format!("strategy has no entry for layer '{}'", meta.name))
    })
}

/// Total BitOPs of `metas` under `strategy`.
pub fn total_bitops(strategy: &MpqStrategy, metas: &[LayerMeta]) -> Result<f64> {
    let mut total = 0.0;
    for m in metas {
        let l = lookup(strategy, m)?;
        let ba = strategy.activation_bits_for(l);
        let rows = l.row_bits();
        let per = 1.0 / rows.len() as f64;
        for b in rows {
            total += per * bitops(m, b, ba)?;
        }
    }
    Ok(total)
}

/// Weight storage in bytes: `Σ params·bits / 8`.
pub fn model_size_bytes(strategy: &MpqStrategy, metas: &[LayerMeta]) -> Result<f64> {
    let mut bits = 0.0;
    for m in metas {
        let l = lookup(strategy, m)?;
        if l.params != m.params {
            return Err(SdqError::contract(format!(
                "layer '{}' has {} params in the strategy but {} in the table",
                m.name, l.params, m.params
            )));
        }
        bits += l.bit_volume();
    }
    Ok(bits / 8.0)
}

/// Weight compression rate relative to 32-bit floats.
pub fn wcr(strategy: &MpqStrategy) -> f64 {
    32.0 / strategy.avg_weight_bits()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwRound {
    pub strategy: MpqStrategy,
    pub theoretical_avg_bits: f64,
    pub deployed_avg_bits: f64,
    pub theoretical_wcr: f64,
    pub deployed_wcr: f64,
}

/// Rounds every layer up to the smallest supported bitwidth at or above it.
pub fn hw_round(strategy: &MpqStrategy, supported: &[u32]) -> Result<HwRound> {
    if supported.is_empty() {
        return Err(SdqError::contract("hw_round: supported set is empty"));
    }
    let mut sup = supported.to_vec();
    sup.sort_unstable();
    sup.dedup();
    let up = |b: u32, name: &str| {
        sup.iter().copied().find(|&s| s >= b).ok_or_else(|| {
            SdqError::contract(format!(
                "hw_round: layer '{name}' uses {b} bits, above the largest supported {}",
                sup[sup.len() - 1]
            ))
        })
    };
    let mut out = strategy.clone();
    for l in &mut out.layers {
        l.bits = up(l.bits, &l.name)?;
        if let Some(k) = &mut l.kernel_bits {
            for b in k.iter_mut() {
                *b = up(*b, &l.name)?;
            }
        }
    }
    Ok(HwRound {
        theoretical_avg_bits: strategy.avg_weight_bits(),
        deployed_avg_bits: out.avg_weight_bits(),
        theoretical_wcr: wcr(strategy),
        deployed_wcr: wcr(&out),
        strategy: out,
    })
}

/// Strategy assigning `bits` to every layer of `metas`, with `pinned`
/// names held at `pinned_bits`.
pub fn uniform_strategy(
    model: &str,
    metas: &[LayerMeta],
    bits: u32,
    activation_bits: u32,
    pinned: &[&str],
    pinned_bits: u32,
) -> MpqStrategy {
    MpqStrategy {
        model: model.to_string(),
        candidates: vec![bits],
        activation_bits,
        layers: metas
            .iter()
            .map(|m| {
                let p = pinned.contains(&m.name.as_str());
                crate::strategy::LayerAssignment {
                    name: m.name.clone(),
                    bits: if p { pinned_bits } else { bits },
                    params: m.params,
                    pinned: p,
                    kernel_bits: None,
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::LayerAssignment;

    fn layer(name: &str, bits: u32, params: u64) -> LayerAssignment {
        LayerAssignment {
            name: name.into(),
            bits,
            params,
            pinned: false,
            kernel_bits: None,
        }
    }

    #[test]
    fn bitops_direct() {
        let m = LayerMeta::new("c", LayerKind::Conv, 100, 4, 4, 2).unwrap();
        assert_eq!(bitops(&m, 2, 2).unwrap(), 1600.0);
        assert_eq!(bitops(&m, 2, 4).unwrap(), 2.0 * bitops(&m, 2, 2).unwrap());
        assert!(bitops(&m, 0, 2).is_err());
    }

    #[test]
    fn meta_validation() {
        assert!(LayerMeta::new("x", LayerKind::Dense, 0, 1, 1, 1).is_err());
        assert!(LayerMeta::new("x", LayerKind::Dense, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn table_round_trip_and_errors() {
        let t = resnet18_layer_table();
        assert_eq!(t.len(), 21);
        let text = format_layer_table(&t);
        assert_eq!(parse_layer_table(&text, "t").unwrap(), t);
        assert!(matches!(
            parse_layer_table("a conv 10 1 1\n", "t"),
            Err(SdqError::Parse { line: 1, .. })
        ));
        assert!(parse_layer_table("a blob 10 1 1 1\n", "t").is_err());
        assert!(parse_layer_table("a conv 10 1 1 0\n", "t").is_err());
    }

    #[test]
    fn resnet18_param_count() {
        let p: u64 = resnet18_layer_table().iter().map(|m| m.params).sum();
        assert_eq!(p, 11_678_912);
    }

    #[test]
    fn wcr_identity_at_32() {
        let s = MpqStrategy {
            model: "m".into(),
            candidates: vec![32],
            activation_bits: 32,
            layers: vec![layer("a", 32, 5), layer("b", 32, 7)],
        };
        assert_eq!(wcr(&s), 1.0);
    }

    #[test]
    fn hw_round_examples() {
        let s = MpqStrategy {
            model: "m".into(),
            candidates: vec![2, 3, 4],
            activation_bits: 4,
            layers: vec![layer("a", 3, 10), layer("b", 4, 10), layer("c", 2, 10)],
        };
        let r = hw_round(&s, &[2, 4, 8, 16]).unwrap();
        let bits: Vec<u32> = r.strategy.layers.iter().map(|l| l.bits).collect();
        assert_eq!(bits, vec![4, 4, 2]);
        assert!(r.deployed_wcr <= r.theoretical_wcr);
        let again = hw_round(&r.strategy, &[2, 4, 8, 16]).unwrap();
        assert_eq!(again.strategy, r.strategy);
        assert!(hw_round(&s, &[2]).is_err());
        assert!(hw_round(&s, &[]).is_err());
    }

    #[test]
    fn missing_layer_is_contract_error() {
        let metas = vec![LayerMeta::new("z", LayerKind::Dense, 4, 1, 1, 1).unwrap()];
        let s = MpqStrategy {
            model: "m".into(),
            candidates: vec![4],
            activation_bits: 4,
            layers: vec![layer("a", 4, 4)],
        };
        assert!(matches!(model_size_bytes(&s, &metas), Err(SdqError::Contract(_))));
        assert!(total_bitops(&s, &metas).is_err());
    }

    #[test]
    fn size_is_linear_in_bits() {
        let metas = vec![
            LayerMeta::new("a", LayerKind::Dense, 80, 1, 1, 1).unwrap(),
            LayerMeta::new("b", LayerKind::Dense, 16, 1, 1, 1).unwrap(),
        ];
        let mut s = uniform_strategy("m", &metas, 4, 4, &[], 8);
        let base = model_size_bytes(&s, &metas).unwrap();
        s.layers[0].bits = 5;
        assert_eq!(model_size_bytes(&s, &metas).unwrap() - base, 10.0);
    }
}
