//! Flat binary model checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "SDQCKPT1"
//! id_len       u32
//! id           id_len bytes of UTF-8 model id
//! layers       u32
//! per layer:   name_len u32, name bytes, ndim u32, dims u64 × ndim, bias_len u64
//! per layer:   weight f64 × prod(dims), row-major; bias f64 × bias_len
//! ```
//!
//! Loading rebuilds the model from its id and checks every shape.

use std::path::Path;

use crate::error::{Result, SdqError};
use crate::model::{Model, ModelSpec, ParamLayer};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDQCKPT1";

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    put_str(&mut out, &model.spec.id);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (spec, p) in model.spec.layers.iter().zip(&model.params) {
        put_str(&mut out, &spec.name);
        out.extend_from_slice(&(p.weight.shape().len() as u32).to_le_bytes());
        for &d in p.weight.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.bias.len() as u64).to_le_bytes());
    }
    for p in &model.params {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: needed {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid UTF-8".into()))
    }

    fn fail(&self, msg: String) -> SdqError {
        // binary format: report the byte offset where a text format has a line
        SdqError::parse(self.source, self.pos, msg)
    }
}

pub fn decode(buf: &[u8], source: &str) -> Result<Model> {
    let mut r = Reader { buf, pos: 0, source };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(SdqError::parse(source, 0, "not a checkpoint (bad magic)"));
    }
    let id = r.string()?;
    let spec = ModelSpec::parse(&id)?;
    let n = r.u32()? as usize;
    if n != spec.layers.len() {
        return Err(r.fail(format!("{n} layers recorded, model '{id}' has {}", spec.layers.len())));
    }
    let mut headers = Vec::with_capacity(n);
    for l in &spec.layers {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bias = r.u64()? as usize;
        if name != l.name || dims != l.weight_shape() || bias != l.out_features {
            return Err(r.fail(format!(
                "layer '{name}' {dims:?}+{bias} does not match model layer '{}' {:?}+{}",
                l.name,
                l.weight_shape(),
                l.out_features
            )));
        }
        headers.push((dims, bias));
    }
    let mut params = Vec::with_capacity(n);
    for (dims, bias) in headers {
        let count: usize = dims.iter().product();
        let w = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = (0..bias).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push(ParamLayer {
            weight: Tensor::new(w, dims)?,
            bias: Tensor::vector(b),
        });
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Model { spec, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| SdqError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| SdqError::io(path, e))?;
    decode(&buf, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip_is_exact() {
        for id in ["mlp:2-5-3", "resnet:1x4x4:2:1:3"] {
            let m = build_model(&ModelSpec::parse(id).unwrap(), 4);
            let bytes = encode(&m);
            assert_eq!(&bytes[..8], b"SDQCKPT1");
            assert_eq!(decode(&bytes, "m").unwrap(), m);
        }
    }

    #[test]
    fn layout_is_documented_one() {
        let m = build_model(&ModelSpec::parse("mlp:2-3-2").unwrap(), 0);
        let bytes = encode(&m);
        // magic, id, count, two headers, then 6+3+6+2 doubles
        let id = 4 + "mlp:2-3-2".len();
        let hdr = |name: &str| 4 + name.len() + 4 + 16 + 8;
        assert_eq!(bytes.len(), 8 + id + 4 + hdr("fc0") + hdr("fc1") + 8 * 17);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = build_model(&ModelSpec::parse("mlp:2-3-2").unwrap(), 0);
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 1], "m").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, "m").is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic, "m"), Err(SdqError::Parse { .. })));
    }
}
