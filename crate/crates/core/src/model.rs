//! Toy network zoo: MLPs and channel-scaled ResNet-shaped CNNs.
//!
//! Model ids:
//!
//! * `mlp:<in>-<hidden>-...-<classes>`, e.g. `mlp:2-32-32-32-4`
//! * `resnet:<c>x<h>x<w>:<width>:<blocks per stage>:<classes>`, three
//!   stages of basic blocks at widths `w, 2w, 4w`; `resnet:1x8x8:4:3:4` has
//!   the ResNet20 layer structure.
//!
//! The activation function is the clipped ReLU `clamp(x, 0, 1)` so that the
//! quantized forward (activations quantized on `[0, 1]`) and the
//! full-precision forward share one function family. First and last
//! parameter layers are pinned by default.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cost::{LayerKind, LayerMeta};
use crate::dbp::DbpLayer;
use crate::error::{Result, SdqError};
use crate::grad::{Graph, Var};
use crate::phase2::normalize_weights_rows;
use crate::quant::{quantize_activation, quantize_weight_rows, PASSTHROUGH_BITS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_features: usize,
    pub out_features: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Input spatial size `(h, w)`; `(1, 1)` for dense layers.
    pub in_hw: (usize, usize),
    pub block: usize,
    pub pinned: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.out_features, self.in_features],
            _ => vec![self.out_features, self.in_features, self.kernel, self.kernel],
        }
    }

    pub fn params(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.params() / self.out_features
    }

    pub fn meta(&self) -> LayerMeta {
        LayerMeta {
            name: self.name.clone(),
            kind: self.kind,
            params: self.params() as u64,
            in_w: self.in_hw.1 as u64,
            in_h: self.in_hw.0 as u64,
            stride: self.stride as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Param(usize),
    Act,
    GlobalPool,
    SaveSkip,
    /// Adds the saved skip tensor, optionally through a projection layer.
    AddSkip(Option<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    /// Per-sample input shape, e.g. `[2]` or `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub stages: Vec<Stage>,
}

fn bad(id: &str, msg: impl std::fmt::Display) -> SdqError {
    SdqError::parse(format!("model id '{id}'"), 1, msg.to_string())
}

fn parse_usize(id: &str, s: &str, what: &str) -> Result<usize> {
    let v = s
        .trim()
        .parse::<usize>()
        .map_err(|e| bad(id, format!("bad {what} '{s}': {e}")))?;
    if v == 0 {
        return Err(bad(id, format!("{what} must be positive")));
    }
    Ok(v)
}

impl ModelSpec {
    pub fn parse(id: &str) -> Result<Self> {
        let (family, rest) = id
            .split_once(':')
            .ok_or_else(|| bad(id, "expected '<family>:<layout>'"))?;
        match family {
            "mlp" => Self::mlp(id, rest),
            "resnet" => Self::resnet(id, rest),
            other => Err(bad(id, format!("unknown model family '{other}'"))),
        }
    }

    fn mlp(id: &str, rest: &str) -> Result<Self> {
        let widths = rest
            .split('-')
            .map(|w| parse_usize(id, w, "width"))
            .collect::<Result<Vec<_>>>()?;
        if widths.len() < 3 {
            return Err(bad(id, "an mlp needs an input, at least one hidden and an output width"));
        }
        let n = widths.len() - 1;
        let mut layers = Vec::new();
        let mut stages = Vec::new();
        for i in 0..n {
            layers.push(LayerSpec {
                name: format!("fc{i}"),
                kind: LayerKind::Dense,
                in_features: widths[i],
                out_features: widths[i + 1],
                kernel: 1,
                stride: 1,
                pad: 0,
                in_hw: (1, 1),
                block: i.div_ceil(2),
                pinned: i == 0 || i == n - 1,
            });
            stages.push(Stage::Param(i));
            if i + 1 < n {
                stages.push(Stage::Act);
            }
        }
        Ok(ModelSpec {
            id: id.to_string(),
            input_shape: vec![widths[0]],
            classes: widths[n],
            layers,
            stages,
        })
    }

    fn resnet(id: &str, rest: &str) -> Result<Self> {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 4 {
            return Err(bad(id, "expected resnet:<c>x<h>x<w>:<width>:<blocks>:<classes>"));
        }
        let dims = parts[0]
            .split('x')
            .map(|d| parse_usize(id, d, "input dim"))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() != 3 {
            return Err(bad(id, "input shape must be <c>x<h>x<w>"));
        }
        let width = parse_usize(id, parts[1], "width")?;
        let blocks = parse_usize(id, parts[2], "blocks")?;
        let classes = parse_usize(id, parts[3], "classes")?;
        let (c, mut h, mut w) = (dims[0], dims[1], dims[2]);
        if h < 4 || w < 4 {
            return Err(bad(id, "input must be at least 4x4 for two stride-2 stages"));
        }

        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut stages = Vec::new();
        let conv = |name: String, cin, cout, k, stride, hw, block| LayerSpec {
            name,
            kind: LayerKind::Conv,
            in_features: cin,
            out_features: cout,
            kernel: k,
            stride,
            pad: k / 2,
            in_hw: hw,
            block,
            pinned: false,
        };
        let mut stem = conv("conv0".into(), c, width, 3, 1, (h, w), 0);
        stem.pinned = true;
        layers.push(stem);
        stages.push(Stage::Param(0));
        stages.push(Stage::Act);

        let mut cin = width;
        let mut block_id = 1;
        for s in 0..3 {
            let cout = width << s;
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let pre = format!("stage{}.{b}", s + 1);
                let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                stages.push(Stage::SaveSkip);
                layers.push(conv(format!("{pre}.conv1"), cin, cout, 3, stride, (h, w), block_id));
                stages.push(Stage::Param(layers.len() - 1));
                stages.push(Stage::Act);
                layers.push(conv(format!("{pre}.conv2"), cout, cout, 3, 1, (oh, ow), block_id));
                stages.push(Stage::Param(layers.len() - 1));
                let proj = if stride != 1 || cin != cout {
                    layers.push(conv(format!("{pre}.proj"), cin, cout, 1, stride, (h, w), block_id));
                    Some(layers.len() - 1)
                } else {
                    None
                };
                stages.push(Stage::AddSkip(proj));
                stages.push(Stage::Act);
                cin = cout;
                h = oh;
                w = ow;
                block_id += 1;
            }
        }
        stages.push(Stage::GlobalPool);
        layers.push(LayerSpec {
            name: "fc".into(),
            kind: LayerKind::Dense,
            in_features: cin,
            out_features: classes,
            kernel: 1,
            stride: 1,
            pad: 0,
            in_hw: (1, 1),
            block: block_id,
            pinned: true,
        });
        stages.push(Stage::Param(layers.len() - 1));
        Ok(ModelSpec {
            id: id.to_string(),
            input_shape: dims,
            classes,
            layers,
            stages,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layer_metas(&self) -> Vec<LayerMeta> {
        self.layers.iter().map(LayerSpec::meta).collect()
    }

    pub fn dbp_layers(&self, pinned_bits: u32) -> Vec<DbpLayer> {
        self.layers
            .iter()
            .map(|l| DbpLayer {
                name: l.name.clone(),
                rows: l.out_features,
                block: l.block,
                pinned_bits: l.pinned.then_some(pinned_bits),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<ParamLayer>,
}

/// Graph leaves of a model's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Largest absolute pre-activation output of each parameter layer.
    pub peaks: Vec<f64>,
}

/// How weights and activations are treated at inference.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantPlan {
    FullPrecision,
    /// Fixed per-layer row-group bitwidths; 32 or more bypasses a layer.
    Fixed {
        bits: Vec<Vec<u32>>,
        activation_bits: u32,
        normalize: bool,
    },
}

/// Deterministic weight transform for a fixed bitwidth assignment.
pub fn fixed_weight(g: &mut Graph, w: Var, bits: &[u32], normalize: bool) -> Result<Var> {
    if bits.iter().all(|&b| b >= PASSTHROUGH_BITS) {
        return Ok(w);
    }
    let w = if normalize {
        normalize_weights_rows(g, w, bits)?
    } else {
        w
    };
    quantize_weight_rows(g, w, bits)
}

/// Builds a model with weights drawn from `N(0, 1/fan_in)` and zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .layers
        .iter()
        .map(|l| {
            let std = 1.0 / (l.fan_in() as f64).sqrt();
            let data = (0..l.params())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ParamLayer {
                weight: Tensor::new(data, l.weight_shape()).expect("weight shape"),
                bias: Tensor::zeros(&[l.out_features]),
            }
        })
        .collect();
    Model {
        spec: spec.clone(),
        params,
    }
}

impl Model {
    pub fn num_layers(&self) -> usize {
        self.params.len()
    }

    pub fn layer_name(&self, l: usize) -> &str {
        &self.spec.layers[l].name
    }

    pub fn leaves(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let mut weights = Vec::with_capacity(self.params.len());
        let mut biases = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if trainable {
                weights.push(g.param(p.weight.clone()));
                biases.push(g.param(p.bias.clone()));
            } else {
                weights.push(g.constant(p.weight.clone()));
                biases.push(g.constant(p.bias.clone()));
            }
        }
        ParamVars { weights, biases }
    }

    /// Records a forward pass. `weight_fn(g, layer, w)` produces the weight
    /// actually used by each parameter layer; activations are quantized at
    /// `activation_bits` when given, otherwise only clipped to `[0, 1]`.
    pub fn forward<F>(
        &self,
        g: &mut Graph,
        params: &ParamVars,
        x: Var,
        activation_bits: Option<u32>,
        mut weight_fn: F,
    ) -> Result<Forward>
    where
        F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
    {
        let n = g.shape(x)[0];
        let mut shape = vec![n];
        shape.extend(&self.spec.input_shape);
        let mut h = g.reshape(x, &shape)?;
        let mut skip: Option<Var> = None;
        let mut peaks = vec![0.0; self.params.len()];

        let apply = |g: &mut Graph, l: usize, input: Var, weight_fn: &mut F, peaks: &mut Vec<f64>| -> Result<Var> {
            let spec = &self.spec.layers[l];
            let w = weight_fn(g, l, params.weights[l])?;
            let out = match spec.kind {
                LayerKind::Dense => g.linear(input, w)?,
                _ => g.conv2d(input, w, spec.stride, spec.pad)?,
            };
            let out = g.add_bias(out, params.biases[l])?;
            peaks[l] = g.value(out).max_abs();
            Ok(out)
        };

        for stage in &self.spec.stages {
            h = match *stage {
                Stage::Param(l) => apply(g, l, h, &mut weight_fn, &mut peaks)?,
                Stage::Act => match activation_bits {
                    Some(b) => quantize_activation(g, h, b)?,
                    None => g.clamp(h, 0.0, 1.0),
                },
                Stage::GlobalPool => g.global_avg_pool(h)?,
                Stage::SaveSkip => {
                    skip = Some(h);
                    h
                }
                Stage::AddSkip(proj) => {
                    let s = skip.take().ok_or_else(|| SdqError::contract("residual add without saved input"))?;
                    let s = match proj {
                        Some(l) => apply(g, l, s, &mut weight_fn, &mut peaks)?,
                        None => s,
                    };
                    g.add(h, s)?
                }
            };
        }
        Ok(Forward { logits: h, peaks })
    }

    /// Logits for `x` without recording gradients.
    pub fn predict(&self, x: &Tensor, plan: &QuantPlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.leaves(&mut g, false);
        let xv = g.constant(x.clone());
        let f = match plan {
            QuantPlan::FullPrecision => self.forward(&mut g, &params, xv, None, |_, _, w| Ok(w))?,
            QuantPlan::Fixed {
                bits,
                activation_bits,
                normalize,
            } => self.forward(&mut g, &params, xv, Some(*activation_bits), |g, l, w| {
                fixed_weight(g, w, &bits[l], *normalize)
            })?,
        };
        Ok(g.value(f.logits).clone())
    }

    /// Classification accuracy in `[0, 1]`.
    pub fn accuracy(&self, x: &Tensor, y: &[usize], plan: &QuantPlan) -> Result<f64> {
        let logits = self.predict(x, plan)?;
        let k = self.spec.classes;
        let correct = y
            .iter()
            .enumerate()
            .filter(|(i, &label)| argmax(&logits.data()[i * k..(i + 1) * k]) == label)
            .count();
        Ok(correct as f64 / y.len().max(1) as f64)
    }

    pub fn layer_metas(&self) -> Vec<LayerMeta> {
        self.spec.layer_metas()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits: [n, k]` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(SdqError::contract(format!(
            "cross_entropy: logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(SdqError::contract(format!("label {bad} out of range for {k} classes")));
    }
    let ls = g.log_softmax(logits);
    let idx = labels.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    let picked = g.gather(ls, idx)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}
