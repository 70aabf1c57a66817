//! Toy dataset generation and CSV file I/O.
//!
//! CSV files carry a `x0,...,x{D-1}` header and 17-significant-digit
//! decimal floats, which round-trip f64 values bit-exactly.

use crate::error::{Result, SgnError};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// How a dataset was produced; echoed into logs and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        scales: Vec<f64>,
        n: usize,
        seed: u64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points: Vec<Vec<f64>>,
    pub generator: GeneratorSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.len())
    }

    fn validate(points: &[Vec<f64>]) -> Result<()> {
        if let Some(first) = points.first() {
            let d = first.len();
            for (i, p) in points.iter().enumerate() {
                if p.len() != d {
                    return Err(SgnError::dim(format!("dataset point {i}"), d, p.len()));
                }
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(SgnError::NonFinite(format!("dataset point {i}")));
                }
            }
        }
        Ok(())
    }
}

/// n points from a k-component isotropic Gaussian mixture; components are
/// chosen uniformly.
pub fn gen_gaussian_mixture(
    centers: &[Vec<f64>],
    scales: &[f64],
    n: usize,
    rng: &mut Rng,
    seed: u64,
) -> Result<Dataset> {
    if centers.is_empty() || centers.len() != scales.len() {
        return Err(SgnError::invalid(
            "mixture needs matching non-empty centers and scales",
        ));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(SgnError::invalid("mixture centers must share a positive dimension"));
    }
    if scales.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(SgnError::invalid("mixture scales must be non-negative"));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let comp = rng.index(centers.len());
        let point: Vec<f64> = centers[comp]
            .iter()
            .map(|&c| c + scales[comp] * rng.standard_normal())
            .collect();
        points.push(point);
    }
    Dataset::validate(&points)?;
    Ok(Dataset {
        name: "gaussian_mixture".into(),
        points,
        generator: GeneratorSpec::GaussianMixture {
            centers: centers.to_vec(),
            scales: scales.to_vec(),
            n,
            seed,
        },
    })
}

/// Two interleaved half circles of radius 1: the first ⌈n/2⌉ points lie on
/// the upper arc (cos t, sin t), the rest on (1 − cos t, 0.5 − sin t), with
/// isotropic Gaussian jitter of standard deviation `noise`.
pub fn gen_two_moons(n: usize, noise: f64, rng: &mut Rng, seed: u64) -> Result<Dataset> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(SgnError::invalid("noise must be non-negative"));
    }
    let n_outer = n.div_ceil(2);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.uniform_range(0.0, std::f64::consts::PI);
        let (mut x, mut y) = if i < n_outer {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise * rng.standard_normal();
        y += noise * rng.standard_normal();
        points.push(vec![x, y]);
    }
    Dataset::validate(&points)?;
    Ok(Dataset {
        name: "two_moons".into(),
        points,
        generator: GeneratorSpec::TwoMoons { n, noise, seed },
    })
}

/// Write with header `x0,...,x{D-1}` and 17-significant-digit floats.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let dim = ds.dim().unwrap_or(0);
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in &ds.points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV produced by `write_csv` (or hand-written in the same shape).
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(SgnError::Csv {
                line: 1,
                message: "missing header row".into(),
            })
        }
    };
    let dim = header.split(',').filter(|s| !s.is_empty()).count();
    let mut points = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(SgnError::Csv {
                line: line_no,
                message: format!("expected {dim} fields, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|e| SgnError::Csv {
                line: line_no,
                message: format!("bad float {f:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(SgnError::Csv {
                    line: line_no,
                    message: format!("non-finite value {v}"),
                });
            }
            row.push(v);
        }
        points.push(row);
    }
    Dataset::validate(&points)?;
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        points,
        generator: GeneratorSpec::Csv {
            path: path.to_string_lossy().into_owned(),
        },
    })
}
