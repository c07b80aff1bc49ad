//! Labelled datasets: synthetic easy/hard mixtures and CSV ingestion.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::{seeded_rng, Tensor};
use crate::{Error, Result};

/// Schema line written at the top of every CSV the crate emits.
pub fn schema_comment(kind: &str) -> String {
    format!("# schema: multiexit/{kind} v1")
}

/// Writes a CSV body behind its schema comment line.
pub(crate) fn write_with_schema(path: &Path, kind: &str, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut out = schema_comment(kind);
    out.push('\n');
    out.push_str(&String::from_utf8(body).expect("csv is utf-8"));
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub easy_fraction: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    /// Per-sample difficulty flag for generated data.
    pub easy: Option<Vec<bool>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::dim("dataset", format!("{} rows", y.len()), format!("{:?}", x.shape())));
        }
        if let Some((i, &c)) = y.iter().enumerate().find(|(_, &c)| c >= classes) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("label {c} not below class count {classes}"),
            });
        }
        Ok(Self {
            x,
            y,
            classes,
            easy: None,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.last_dim()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            easy: self.easy.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
            meta: self.meta.clone(),
        }
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    /// Shuffles with `seed`, then cuts train/validation/test at 70/15/15.
    pub fn split_70_15_15(&self, seed: u64) -> Split {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(seed));
        let n_train = (n as f64 * 0.70).round() as usize;
        let n_val = (n as f64 * 0.15).round() as usize;
        let n_val = n_val.min(n - n_train);
        Split {
            train: self.subset(&order[..n_train]),
            validation: self.subset(&order[n_train..n_train + n_val]),
            test: self.subset(&order[n_train + n_val..]),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&schema_comment("dataset"));
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv is utf-8"));
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Radius of the easy class blobs.
const EASY_RADIUS: f64 = 6.0;
const EASY_SIGMA: f64 = 0.5;
const RING_INNER: f64 = 0.5;
const RING_SPACING: f64 = 0.6;
const RING_SIGMA: f64 = 0.1;

/// Two-dimensional mixture of easy and hard samples.
///
/// Easy samples of class `c` come from an isotropic Gaussian centred at
/// radius 6 and angle `2πc/C`; the classes are linearly separable. Hard
/// samples lie on concentric rings near the origin, one ring per class, so
/// a linear model cannot separate them. Labels are assigned round-robin
/// (balanced to within one sample per class), and the sample order is
/// shuffled.
pub fn generate_mixture_dataset(n: usize, easy_fraction: f64, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("mixture needs at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&easy_fraction) {
        return Err(Error::Config(format!("easy_fraction {easy_fraction} outside [0, 1]")));
    }
    if n < classes {
        return Err(Error::Config(format!("n = {n} is smaller than the class count {classes}")));
    }
    let mut rng = seeded_rng(seed);
    let n_easy = (n as f64 * easy_fraction).round() as usize;
    let easy_noise = Normal::new(0.0, EASY_SIGMA).expect("valid sigma");
    let ring_noise = Normal::new(0.0, RING_SIGMA).expect("valid sigma");

    // Round-robin labels: the first n_easy indices cover every class evenly,
    // and so do the remaining hard ones.
    let labels: Vec<usize> = (0..n).map(|k| k % classes).collect();
    let easy_flags: Vec<bool> = (0..n).map(|k| k < n_easy).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let labels: Vec<usize> = order.iter().map(|&k| labels[k]).collect();
    let easy_flags: Vec<bool> = order.iter().map(|&k| easy_flags[k]).collect();

    let mut data = Vec::with_capacity(2 * n);
    for (&c, &easy) in labels.iter().zip(&easy_flags) {
        if easy {
            let angle = 2.0 * PI * c as f64 / classes as f64;
            data.push(EASY_RADIUS * angle.cos() + easy_noise.sample(&mut rng));
            data.push(EASY_RADIUS * angle.sin() + easy_noise.sample(&mut rng));
        } else {
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            let r = RING_INNER + RING_SPACING * c as f64 + ring_noise.sample(&mut rng);
            data.push(r * theta.cos());
            data.push(r * theta.sin());
        }
    }
    let mut ds = Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        classes,
        DatasetMeta {
            generator: "mixture".into(),
            easy_fraction: Some(easy_fraction),
            seed,
        },
    )?;
    ds.easy = Some(easy_flags);
    Ok(ds)
}

/// Reads a CSV with a header row whose last column is an integer label.
/// Lines starting with `#` are skipped. When `classes` is `None` it is
/// taken as `max label + 1`.
pub fn read_tabular<R: Read>(reader: R, classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let width = rdr.headers()?.len();
    if width < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need at least one feature column and a label column".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().take(width - 1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {j}: {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {j}: non-finite value"),
                });
            }
            data.push(v);
        }
        let raw = rec[width - 1].trim();
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("label {raw:?} is not a nonnegative integer"),
        })?;
        if let Some(c) = classes {
            if label >= c {
                return Err(Error::Parse {
                    line,
                    message: format!("label {label} not below class count {c}"),
                });
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1)).max(2);
    Dataset::new(
        Tensor::new(vec![labels.len(), width - 1], data)?,
        labels,
        classes,
        DatasetMeta {
            generator: "tabular".into(),
            easy_fraction: None,
            seed: 0,
        },
    )
}

/// Loads a tabular CSV and splits it 70/15/15 after a seeded shuffle.
pub fn load_tabular_dataset(path: &Path, classes: Option<usize>, seed: u64) -> Result<Split> {
    let file = std::fs::File::open(path)?;
    let mut ds = read_tabular(file, classes)?;
    ds.meta.seed = seed;
    Ok(ds.split_70_15_15(seed))
}
