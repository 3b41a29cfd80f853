//! Seeded synthetic classification datasets and their CSV form.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Two isotropic Gaussians at ±(r, 0, …).
    TwoBlobs,
    /// Concentric rings, one per class.
    Ring,
    /// `classes` Gaussians with means evenly spaced on a circle of radius 3
    /// in the first two coordinates.
    GaussianMixture,
}

impl std::str::FromStr for Generator {
    type Err = SdqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-blobs" => Ok(Generator::TwoBlobs),
            "ring" => Ok(Generator::Ring),
            "gaussian-mixture" => Ok(Generator::GaussianMixture),
            other => Err(SdqError::Config(format!("unknown dataset generator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub noise: f64,
    /// Set from the run seed; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            generator: Generator::GaussianMixture,
            classes: 4,
            dim: 2,
            samples: 2000,
            noise: 0.7,
            seed: 7,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, dim]` features.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx` as a new `[idx.len(), dim]` tensor plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let labels = idx.iter().map(|&i| self.y[i]).collect();
        (Tensor::new(data, vec![idx.len(), d]).expect("batch shape"), labels)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| SdqError::io(path, e))
    }

    /// Reads feature columns followed by an integer label column.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let name = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut dim = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| SdqError::parse(&name, line + 2, e.to_string()))?;
            if rec.len() < 2 {
                return Err(SdqError::parse(&name, line + 2, "need at least one feature and a label"));
            }
            let d = rec.len() - 1;
            if *dim.get_or_insert(d) != d {
                return Err(SdqError::parse(&name, line + 2, "ragged row"));
            }
            for f in rec.iter().take(d) {
                x.push(f.trim().parse::<f64>().map_err(|e| {
                    SdqError::parse(&name, line + 2, format!("bad feature '{f}': {e}"))
                })?);
            }
            let lab = &rec[d];
            y.push(lab.trim().parse::<usize>().map_err(|e| {
                SdqError::parse(&name, line + 2, format!("bad label '{lab}': {e}"))
            })?);
        }
        let dim = dim.ok_or_else(|| SdqError::parse(&name, 1, "no rows"))?;
        let classes = y.iter().max().map_or(0, |m| m + 1);
        let n = y.len();
        Ok(Dataset {
            x: Tensor::new(x, vec![n, dim])?,
            y,
            classes,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> SdqError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SdqError::io(path, io),
        other => SdqError::parse(path.display().to_string(), 0, format!("{other:?}")),
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SdqError::Config("dataset needs at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(SdqError::Config("dataset dim must be at least 2".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(SdqError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.samples < 2 * self.classes {
            return Err(SdqError::Config("too few samples for the class count".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(SdqError::Config("noise must be non-negative".into()));
        }
        if self.generator == Generator::TwoBlobs && self.classes != 2 {
            return Err(SdqError::Config("two-blobs generates exactly 2 classes".into()));
        }
        Ok(())
    }
}

/// Generates the full sample set and splits it into `(train, test)`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, k) = (spec.samples, spec.dim, spec.classes);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let mut point = vec![0.0; d];
        match spec.generator {
            Generator::TwoBlobs => {
                point[0] = if c == 0 { -2.0 } else { 2.0 };
            }
            Generator::GaussianMixture => {
                let a = 2.0 * PI * c as f64 / k as f64;
                point[0] = 3.0 * a.cos();
                point[1] = 3.0 * a.sin();
            }
            Generator::Ring => {
                let a: f64 = rng.random::<f64>() * 2.0 * PI;
                let r = 1.0 + 1.5 * c as f64;
                point[0] = r * a.cos();
                point[1] = r * a.sin();
            }
        }
        for p in point.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += spec.noise * z;
        }
        x.extend(point);
        y.push(c);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64) * spec.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, n - 1);
    let all = Dataset {
        x: Tensor::new(x, vec![n, d])?,
        y,
        classes: k,
    };
    let test_idx = &order[..n_test];
    let train_idx = &order[n_test..];
    let (tx, ty) = all.batch(train_idx);
    let (vx, vy) = all.batch(test_idx);
    Ok((
        Dataset {
            x: tx,
            y: ty,
            classes: k,
        },
        Dataset {
            x: vx,
            y: vy,
            classes: k,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_is_deterministic() {
        let spec = DatasetSpec::default();
        let (a, b) = gen_dataset(&spec).unwrap();
        let (c, d) = gen_dataset(&spec).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x), bits(&c.x));
        assert_eq!(bits(&b.x), bits(&d.x));
        assert_eq!(a.y, c.y);
        assert_eq!(a.len() + b.len(), 2000);
        assert_eq!(b.len(), 500);
    }

    #[test]
    fn seeds_differ() {
        let spec = DatasetSpec::default();
        let other = DatasetSpec { seed: 8, ..spec.clone() };
        assert_ne!(gen_dataset(&spec).unwrap().0.x, gen_dataset(&other).unwrap().0.x);
    }

    #[test]
    fn every_generator_builds() {
        for (g, k) in [
            (Generator::TwoBlobs, 2),
            (Generator::Ring, 3),
            (Generator::GaussianMixture, 5),
        ] {
            let spec = DatasetSpec {
                generator: g,
                classes: k,
                dim: 3,
                samples: 300,
                ..DatasetSpec::default()
            };
            let (tr, te) = gen_dataset(&spec).unwrap();
            assert_eq!(tr.dim(), 3);
            assert!(tr.y.iter().chain(&te.y).all(|&c| c < k));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = DatasetSpec {
            test_fraction: 1.0,
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&bad).is_err());
        let bad = DatasetSpec {
            generator: Generator::TwoBlobs,
            classes: 3,
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = DatasetSpec {
            samples: 40,
            ..DatasetSpec::default()
        };
        let (tr, _) = gen_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        tr.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn csv_bad_label_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x0,x1,label\n0.1,0.2,a\n").unwrap();
        assert!(matches!(Dataset::read_csv(&p), Err(SdqError::Parse { line: 2, .. })));
    }
}
