//! CSV reports derived from a run directory.
//!
//! * `trajectory.csv`: `epoch,<layer>,<layer>,...` with each layer's
//!   bitwidth at the end of every search epoch.
//! * `bins.csv`: `layer,group,bits,bin,level,count,proportion,mean,variance`
//!   over the quantization bins of every quantized layer's weight image.
//! * `weights.csv`: `layer,bucket,lo,hi,count`, a 64-bucket histogram of
//!   each quantized layer's weight image on `[-1, 1]`.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Result, SdqError};
use crate::grad::Graph;
use crate::metrics::{read_records, records_of};
use crate::model::Model;
use crate::phase2::{layer_histograms, normalize_weights_rows, strategy_plan_bits};
use crate::pipeline::{CONFIG_FILE, METRICS_FILE, SEARCH_CKPT, STRATEGY_FILE, STUDENT_CKPT};
use crate::quant::{weight_image, PASSTHROUGH_BITS};
use crate::strategy::MpqStrategy;
use crate::tensor::Tensor;

pub const WEIGHT_BUCKETS: usize = 64;

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Per-epoch bitwidth trajectory of every layer from the search records.
pub fn trajectory_csv(records: &[Value], layer_names: &[String]) -> Result<String> {
    let mut rows = Vec::new();
    for r in records_of(records, "strategy") {
        let epoch = r.get("epoch").and_then(Value::as_u64);
        let bits = r.get("layer_bits").and_then(Value::as_array);
        let (Some(epoch), Some(bits)) = (epoch, bits) else {
            return Err(SdqError::contract("strategy record without epoch or layer_bits"));
        };
        if bits.len() != layer_names.len() {
            return Err(SdqError::contract(format!(
                "strategy record has {} layers, model has {}",
                bits.len(),
                layer_names.len()
            )));
        }
        let mut row = vec![epoch.to_string()];
        row.extend(bits.iter().map(|b| b.to_string()));
        rows.push(row);
    }
    let mut header = vec!["epoch"];
    header.extend(layer_names.iter().map(String::as_str));
    Ok(csv_text(&header, rows))
}

fn images(model: &Model, plan_bits: &[Vec<u32>], normalize: bool) -> Result<Vec<Option<Tensor>>> {
    plan_bits
        .iter()
        .enumerate()
        .map(|(l, bits)| {
            if bits.iter().all(|&b| b >= PASSTHROUGH_BITS) {
                return Ok(None);
            }
            let mut g = Graph::new();
            let w = g.constant(model.params[l].weight.clone());
            let w = if normalize { normalize_weights_rows(&mut g, w, bits)? } else { w };
            let img = weight_image(&mut g, w)?;
            Ok(Some(g.value(img).clone()))
        })
        .collect()
}

pub fn bins_csv(model: &Model, plan_bits: &[Vec<u32>], normalize: bool) -> Result<String> {
    let mut rows = Vec::new();
    for (l, img) in images(model, plan_bits, normalize)?.into_iter().enumerate() {
        let Some(img) = img else { continue };
        for (grp, h) in layer_histograms(&img, &plan_bits[l])?.iter().enumerate() {
            let (p, m, v) = (h.proportions(), h.means(), h.variances());
            for bin in 0..h.counts.len() {
                rows.push(vec![
                    model.layer_name(l).to_string(),
                    grp.to_string(),
                    h.bits.to_string(),
                    bin.to_string(),
                    format!("{:?}", h.levels[bin]),
                    h.counts[bin].to_string(),
                    format!("{:?}", p[bin]),
                    format!("{:?}", m[bin]),
                    format!("{:?}", v[bin]),
                ]);
            }
        }
    }
    Ok(csv_text(
        &["layer", "group", "bits", "bin", "level", "count", "proportion", "mean", "variance"],
        rows,
    ))
}

pub fn weights_csv(model: &Model, plan_bits: &[Vec<u32>], normalize: bool) -> Result<String> {
    let mut rows = Vec::new();
    let width = 2.0 / WEIGHT_BUCKETS as f64;
    for (l, img) in images(model, plan_bits, normalize)?.into_iter().enumerate() {
        let Some(img) = img else { continue };
        let mut counts = [0usize; WEIGHT_BUCKETS];
        for &v in img.data() {
            let k = (((v + 1.0) / width).floor() as isize).clamp(0, WEIGHT_BUCKETS as isize - 1);
            counts[k as usize] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            rows.push(vec![
                model.layer_name(l).to_string(),
                k.to_string(),
                format!("{:?}", -1.0 + k as f64 * width),
                format!("{:?}", -1.0 + (k + 1) as f64 * width),
                c.to_string(),
            ]);
        }
    }
    Ok(csv_text(&["layer", "bucket", "lo", "hi", "count"], rows))
}

/// Writes the three reports for `run_dir` into `out_dir`; returns the
/// written paths.
pub fn write_reports(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let spec = cfg.model_spec()?;
    let names: Vec<String> = spec.layers.iter().map(|l| l.name.clone()).collect();
    let records = read_records(&run_dir.join(METRICS_FILE))?;
    std::fs::create_dir_all(out_dir).map_err(|e| SdqError::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| SdqError::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("trajectory.csv", trajectory_csv(&records, &names)?)?;

    let strategy = MpqStrategy::load(&run_dir.join(STRATEGY_FILE))?;
    let ckpt = [STUDENT_CKPT, SEARCH_CKPT]
        .iter()
        .map(|f| run_dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| SdqError::Config(format!("no checkpoint in {}", run_dir.display())))?;
    let model = checkpoint::load(&ckpt)?;
    let plan_bits = strategy_plan_bits(&model, &strategy)?;
    put("bins.csv", bins_csv(&model, &plan_bits, cfg.train.normalize)?)?;
    put("weights.csv", weights_csv(&model, &plan_bits, cfg.train.normalize)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use serde_json::json;

    #[test]
    fn trajectory_layout() {
        let recs = vec![
            json!({"phase": "teacher", "epoch": 0}),
            json!({"phase": "strategy", "epoch": 0, "layer_bits": [8, 8, 8]}),
            json!({"phase": "strategy", "epoch": 1, "layer_bits": [8, 7, 8]}),
        ];
        let names: Vec<String> = ["fc0", "fc1", "fc2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            trajectory_csv(&recs, &names).unwrap(),
            "epoch,fc0,fc1,fc2\n0,8,8,8\n1,8,7,8\n"
        );
        assert!(trajectory_csv(&recs, &names[..2]).is_err());
    }

    #[test]
    fn histogram_counts_add_up() {
        let m = build_model(&ModelSpec::parse("mlp:2-6-6-3").unwrap(), 2);
        let plan = vec![vec![32], vec![2, 3], vec![4]];
        let bins = bins_csv(&m, &plan, true).unwrap();
        let mut total = 0usize;
        for line in bins.lines().skip(1) {
            total += line.split(',').nth(5).unwrap().parse::<usize>().unwrap();
        }
        assert_eq!(total, 36 + 18);
        let weights = weights_csv(&m, &plan, false).unwrap();
        assert_eq!(weights.lines().count(), 1 + 2 * WEIGHT_BUCKETS);
    }
}
