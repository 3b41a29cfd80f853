//! Mixed-precision strategies and their text file format.
//!
//! ```text
//! sdq-strategy 1
//! model <model id>
//! candidates <b0>,<b1>,...
//! activation_bits <b>
//! layers <count>
//! <name> <bits> <params> <pinned|free> [kernels=<b>,<b>,...]
//! ...
//! ```
//!
//! Fields are separated by a single space and every line ends in `\n`.
//! Layer lines follow model order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SdqError};

pub const STRATEGY_MAGIC: &str = "sdq-strategy 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAssignment {
    pub name: String,
    pub bits: u32,
    pub params: u64,
    pub pinned: bool,
    /// Per-output-channel bitwidths when the layer was searched kernel-wise.
    pub kernel_bits: Option<Vec<u32>>,
}

impl LayerAssignment {
    /// `Σ bits·params` for this layer, splitting params evenly over kernels.
    pub fn bit_volume(&self) -> f64 {
        match &self.kernel_bits {
            Some(k) if !k.is_empty() => {
                let per = self.params as f64 / k.len() as f64;
                k.iter().map(|&b| b as f64 * per).sum()
            }
            _ => self.bits as f64 * self.params as f64,
        }
    }

    /// Bitwidth of each row group; a single entry for uniform layers.
    pub fn row_bits(&self) -> Vec<u32> {
        self.kernel_bits.clone().unwrap_or_else(|| vec![self.bits])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpqStrategy {
    pub model: String,
    pub candidates: Vec<u32>,
    pub activation_bits: u32,
    pub layers: Vec<LayerAssignment>,
}

impl MpqStrategy {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Parameter-weighted mean weight bitwidth.
    pub fn avg_weight_bits(&self) -> f64 {
        let total = self.total_params() as f64;
        if total == 0.0 {
            return 0.0;
        }
        self.layers.iter().map(|l| l.bit_volume()).sum::<f64>() / total
    }

    pub fn layer(&self, name: &str) -> Option<&LayerAssignment> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Bitwidth of activations feeding layer `l`: pinned layers run at
    /// their own weight bitwidth, the rest at the global activation width.
    pub fn activation_bits_for(&self, l: &LayerAssignment) -> u32 {
        if l.pinned {
            l.bits
        } else {
            self.activation_bits
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cands: Vec<String> = self.candidates.iter().map(u32::to_string).collect();
        writeln!(s, "{STRATEGY_MAGIC}").unwrap();
        writeln!(s, "model {}", self.model).unwrap();
        writeln!(s, "candidates {}", cands.join(",")).unwrap();
        writeln!(s, "activation_bits {}", self.activation_bits).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            write!(
                s,
                "{} {} {} {}",
                l.name,
                l.bits,
                l.params,
                if l.pinned { "pinned" } else { "free" }
            )
            .unwrap();
            if let Some(k) = &l.kernel_bits {
                let k: Vec<String> = k.iter().map(u32::to_string).collect();
                write!(s, " kernels={}", k.join(",")).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| SdqError::parse(source, line, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (n, magic) = next("header")?;
        if magic != STRATEGY_MAGIC {
            return Err(err(n, format!("expected '{STRATEGY_MAGIC}', found '{magic}'")));
        }
        let field = |(n, line): (usize, &str), key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| err(n, format!("expected '{key} <value>'")))
        };
        let model = field(next("model")?, "model")?;
        let cl = next("candidates")?;
        let candidates = parse_bits_list(&field(cl, "candidates")?).map_err(|m| err(cl.0, m))?;
        let al = next("activation_bits")?;
        let activation_bits = field(al, "activation_bits")?
            .parse::<u32>()
            .map_err(|e| err(al.0, format!("bad activation_bits: {e}")))?;
        let ll = next("layers")?;
        let count = field(ll, "layers")?
            .parse::<usize>()
            .map_err(|e| err(ll.0, format!("bad layer count: {e}")))?;

        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("layer record")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 && parts.len() != 5 {
                return Err(err(n, format!("expected 4 or 5 fields, found {}", parts.len())));
            }
            let bits = parts[1]
                .parse::<u32>()
                .map_err(|e| err(n, format!("bad bits '{}': {e}", parts[1])))?;
            let params = parts[2]
                .parse::<u64>()
                .map_err(|e| err(n, format!("bad params '{}': {e}", parts[2])))?;
            let pinned = match parts[3] {
                "pinned" => true,
                "free" => false,
                other => return Err(err(n, format!("expected pinned|free, found '{other}'"))),
            };
            let kernel_bits = match parts.get(4) {
                None => None,
                Some(k) => {
                    let list = k
                        .strip_prefix("kernels=")
                        .ok_or_else(|| err(n, "expected kernels=<list>".into()))?;
                    Some(parse_bits_list(list).map_err(|m| err(n, m))?)
                }
            };
            layers.push(LayerAssignment {
                name: parts[0].to_string(),
                bits,
                params,
                pinned,
                kernel_bits,
            });
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(err(n, format!("trailing content '{extra}'")));
        }
        Ok(MpqStrategy {
            model,
            candidates,
            activation_bits,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SdqError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SdqError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

pub fn parse_bits_list(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|e| format!("bad bitwidth '{t}': {e}"))
        })
        .collect()
}
