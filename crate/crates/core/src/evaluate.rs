//! Accuracy measurement, cross-evaluation matrices, relative rate of change
//! and the additive-noise sweep.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modelzoo::{Classifier, Preprocessor};
use crate::tensor::{ImageBatch, Tensor};

pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_NOISE_GRID: [f64; 7] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

/// True when `label` ranks within the first `k` entries of `row`, ordering
/// by logit descending and then by class index ascending.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let v = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &x)| x > v || (x == v && c < label))
        .count();
    ahead < k
}

fn hits(logits: &Tensor, labels: &[usize], k: usize) -> Result<usize> {
    let (n, classes) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut count = 0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::contract(format!("label {label} outside {classes} classes")));
        }
        count += in_top_k(row, label, k) as usize;
    }
    Ok(count)
}

/// Fraction of samples whose label is among the `k` largest logits of
/// `classifier(preprocessor(x))`.
pub fn top_k_accuracy(
    classifier: &dyn Classifier,
    data: &Dataset,
    preprocessor: &dyn Preprocessor,
    k: usize,
    batch_size: usize,
) -> Result<f64> {
    let m = cross_matrix(&[preprocessor], &[classifier], data, k, batch_size)?;
    Ok(if k == 1 { m.top1[0][0] } else { m.topk[0][0] })
}

/// Top-1 and top-k accuracies for every (preprocessor, classifier) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub top1: Vec<Vec<f64>>,
    pub k: usize,
    pub topk: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_top1(rows: Vec<String>, cols: Vec<String>, top1: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { k: 1, topk: top1.clone(), rows, cols, top1 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for table in [&self.top1, &self.topk] {
            if table.len() != self.rows.len() || table.iter().any(|r| r.len() != self.cols.len()) {
                return Err(Error::shape(format!("matrix is not {}x{}", self.rows.len(), self.cols.len())));
            }
            if let Some(v) = table.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!("accuracy {v} outside [0,1]")));
            }
        }
        check_unique(&self.rows, "row")?;
        check_unique(&self.cols, "column")
    }

    pub fn row_index(&self, key: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == key)
    }

    pub fn col_index(&self, key: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == key)
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        Some(self.top1[self.row_index(row)?][self.col_index(col)?])
    }

    /// `acc(row -> col) - acc(baseline -> col)`.
    pub fn diff(&self, row: &str, baseline: &str, col: &str) -> Option<f64> {
        Some(self.get(row, col)? - self.get(baseline, col)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::orchestrator::write_atomic(path, &matrix_csv(&self.rows, &self.cols, &self.top1, |v| format!("{v}"))?)
    }

    pub fn write_topk_csv(&self, path: &Path) -> Result<()> {
        crate::orchestrator::write_atomic(path, &matrix_csv(&self.rows, &self.cols, &self.topk, |v| format!("{v}"))?)
    }

    /// Reads a top-1 matrix written by [`AccuracyMatrix::write_csv`].
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let (rows, cols, cells) = read_matrix_csv(reader)?;
        let top1 = cells
            .into_iter()
            .map(|r| r.into_iter().map(|c| c.ok_or_else(|| Error::Format { what: "accuracy csv", detail: "empty cell".into() })).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::from_top1(rows, cols, top1)
    }
}

fn check_unique(keys: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for k in keys {
        if !seen.insert(k) {
            return Err(Error::contract(format!("duplicate {what} key {k}")));
        }
    }
    Ok(())
}

fn matrix_csv<T>(rows: &[String], cols: &[String], values: &[Vec<T>], fmt: impl Fn(&T) -> String) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (key, row) in rows.iter().zip(values) {
        let mut rec = vec![key.clone()];
        rec.extend(row.iter().map(&fmt));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })
}

type MatrixCells = (Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>);

fn read_matrix_csv(reader: impl Read) -> Result<MatrixCells> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols.len() + 1 {
            return Err(Error::Format { what: "matrix csv", detail: format!("row with {} fields", rec.len()) });
        }
        rows.push(rec[0].to_owned());
        let row = rec
            .iter()
            .skip(1)
            .map(|s| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Format { what: "matrix csv", detail: format!("{s:?}: {e}") })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok((rows, cols, cells))
}

/// Evaluates every preprocessor against every classifier. Each preprocessor
/// runs once per batch and its output is shared by all classifiers, so every
/// pair sees the data in the same order.
pub fn cross_matrix(
    preprocessors: &[&dyn Preprocessor],
    classifiers: &[&dyn Classifier],
    data: &Dataset,
    k: usize,
    batch_size: usize,
) -> Result<AccuracyMatrix> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    if k == 0 || batch_size == 0 {
        return Err(Error::contract("k and batch size must be positive"));
    }
    let mut h1 = vec![vec![0usize; classifiers.len()]; preprocessors.len()];
    let mut hk = h1.clone();
    for (x, labels) in data.batches(batch_size) {
        for (pi, pre) in preprocessors.iter().enumerate() {
            let r = pre.apply(&x)?;
            for (ci, cls) in classifiers.iter().enumerate() {
                let logits = cls.logits(&r)?;
                h1[pi][ci] += hits(&logits, labels, 1)?;
                hk[pi][ci] += hits(&logits, labels, k)?;
            }
        }
    }
    let n = data.len() as f64;
    let frac = |t: Vec<Vec<usize>>| t.into_iter().map(|r| r.into_iter().map(|h| h as f64 / n).collect()).collect();
    Ok(AccuracyMatrix {
        rows: preprocessors.iter().map(|p| p.key().to_owned()).collect(),
        cols: classifiers.iter().map(|c| c.id().to_owned()).collect(),
        top1: frac(h1),
        k,
        topk: frac(hk),
    })
}

/// Key of the autoencoder fine-tuned against classifier `id`.
pub fn finetuned_key(id: &str) -> String {
    format!("A_{id}")
}

/// Source of the reference accuracy acc(i) in the RRC denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RrcConvention {
    /// acc(i) = acc(A_i -> i).
    #[default]
    Diagonal,
    /// acc(i) = acc(identity -> i).
    Standalone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrcMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `None` marks an undefined entry (zero denominator).
    pub values: Vec<Vec<Option<f64>>>,
    pub convention: RrcConvention,
}

pub const IDENTITY_ROW: &str = "identity";

/// RRC(A_i -> j) = acc(A_i -> j) / min(acc(i), acc(j)), over the rows of
/// `matrix` whose key is `A_<column>`.
pub fn rrc(matrix: &AccuracyMatrix, convention: RrcConvention) -> Result<RrcMatrix> {
    let reference: Vec<f64> = match convention {
        RrcConvention::Diagonal => matrix
            .cols
            .iter()
            .map(|c| {
                matrix
                    .get(&finetuned_key(c), c)
                    .ok_or_else(|| Error::contract(format!("missing diagonal entry {} -> {c}", finetuned_key(c))))
            })
            .collect::<Result<_>>()?,
        RrcConvention::Standalone => matrix
            .cols
            .iter()
            .map(|c| matrix.get(IDENTITY_ROW, c).ok_or_else(|| Error::contract(format!("missing stand-alone entry for {c}"))))
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (ri, key) in matrix.rows.iter().enumerate() {
        let Some(i) = matrix.cols.iter().position(|c| finetuned_key(c) == *key) else {
            continue;
        };
        let row = (0..matrix.cols.len())
            .map(|j| {
                let den = reference[i].min(reference[j]);
                (den > 0.0).then(|| matrix.top1[ri][j] / den)
            })
            .collect();
        rows.push(key.clone());
        values.push(row);
    }
    if rows.is_empty() {
        return Err(Error::contract("no fine-tuned autoencoder rows"));
    }
    Ok(RrcMatrix {
        rows,
        cols: matrix.cols.clone(),
        values,
        convention,
    })
}

impl RrcMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        self.values[r][c]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().flatten().flatten().copied().fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let bytes = matrix_csv(&self.rows, &self.cols, &self.values, |v| v.map(|x| format!("{x}")).unwrap_or_default())?;
        crate::orchestrator::write_atomic(path, &bytes)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let (rows, cols, values) = read_matrix_csv(reader)?;
        Ok(Self {
            rows,
            cols,
            values,
            convention: RrcConvention::Diagonal,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrcEntry {
    pub autoencoder: String,
    pub classifier: String,
    pub value: Option<f64>,
}

/// All entries, descending by value; equal values keep row-major order and
/// undefined entries come last.
pub fn sort_rrc(m: &RrcMatrix) -> Vec<RrcEntry> {
    let mut out: Vec<RrcEntry> = m
        .rows
        .iter()
        .zip(&m.values)
        .flat_map(|(r, vals)| {
            m.cols.iter().zip(vals).map(move |(c, v)| RrcEntry {
                autoencoder: r.clone(),
                classifier: c.clone(),
                value: *v,
            })
        })
        .collect();
    out.sort_by(|a, b| match (a.value, b.value) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    });
    out
}

/// Adds independent U[-s, s] noise to every pixel and clamps to [0,1].
pub fn add_uniform_noise(batch: &ImageBatch, s: f64, rng: &mut impl Rng) -> Result<ImageBatch> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::contract(format!("noise strength {s} outside [0,1]")));
    }
    if s == 0.0 {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    for x in out.data_mut() {
        *x = (*x + s * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepCurve {
    pub preprocessor: String,
    pub classifier: String,
    pub top1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub strengths: Vec<f64>,
    pub seed: u64,
    pub curves: Vec<NoiseSweepCurve>,
}

/// Top-1 of every (preprocessor, classifier) pair on noisy inputs. The noise
/// is added to the raw images before any preprocessor and one realization per
/// strength is shared by all pairs. Every strength reuses the same draw
/// scaled by `s`.
pub fn noise_sweep(
    classifiers: &[&dyn Classifier],
    preprocessors: &[&dyn Preprocessor],
    data: &Dataset,
    strengths: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<NoiseSweep> {
    if strengths.is_empty() || strengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("noise grid must be non-empty and strictly ascending"));
    }
    let mut curves: Vec<NoiseSweepCurve> = preprocessors
        .iter()
        .flat_map(|p| {
            classifiers.iter().map(|c| NoiseSweepCurve {
                preprocessor: p.key().to_owned(),
                classifier: c.id().to_owned(),
                top1: Vec::with_capacity(strengths.len()),
            })
        })
        .collect();
    for &s in strengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = Dataset::new(add_uniform_noise(&data.images, s, &mut rng)?, data.labels.clone(), data.class_count)?;
        let m = cross_matrix(preprocessors, classifiers, &noisy, 1, batch_size)?;
        for (curve, v) in curves.iter_mut().zip(m.top1.iter().flatten()) {
            curve.top1.push(*v);
        }
    }
    Ok(NoiseSweep {
        strengths: strengths.to_vec(),
        seed,
        curves,
    })
}

impl NoiseSweep {
    pub fn curve(&self, preprocessor: &str, classifier: &str) -> Option<&NoiseSweepCurve> {
        self.curves.iter().find(|c| c.preprocessor == preprocessor && c.classifier == classifier)
    }

    pub fn at(&self, preprocessor: &str, classifier: &str, s: f64) -> Option<f64> {
        let i = self.strengths.iter().position(|&x| x == s)?;
        Some(self.curve(preprocessor, classifier)?.top1[i])
    }

    /// Long format: preprocessor, classifier, s, top1, seed.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        sweeps_to_csv(std::slice::from_ref(self))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::orchestrator::write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut all = sweeps_from_csv(reader)?;
        if all.len() != 1 {
            return Err(Error::Format { what: "sweep csv", detail: format!("{} seeds, expected one", all.len()) });
        }
        Ok(all.remove(0))
    }

    /// Curve values averaged over several sweeps sharing the same grid.
    pub fn mean_of(sweeps: &[NoiseSweep]) -> Result<NoiseSweep> {
        let first = sweeps.first().ok_or_else(|| Error::contract("no sweeps to average"))?;
        let mut out = first.clone();
        for other in &sweeps[1..] {
            if other.strengths != first.strengths {
                return Err(Error::contract("sweeps use different grids"));
            }
            for c in &mut out.curves {
                let o = other
                    .curve(&c.preprocessor, &c.classifier)
                    .ok_or_else(|| Error::contract(format!("curve {} -> {} missing", c.preprocessor, c.classifier)))?;
                for (a, b) in c.top1.iter_mut().zip(&o.top1) {
                    *a += b;
                }
            }
        }
        let n = sweeps.len() as f64;
        for c in &mut out.curves {
            c.top1.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

/// One long-format table for several sweeps.
pub fn sweeps_to_csv(sweeps: &[NoiseSweep]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["preprocessor", "classifier", "s", "top1", "seed"])?;
    for sweep in sweeps {
        for c in &sweep.curves {
            for (s, v) in sweep.strengths.iter().zip(&c.top1) {
                w.write_record([c.preprocessor.clone(), c.classifier.clone(), s.to_string(), v.to_string(), sweep.seed.to_string()])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })
}

/// Groups long-format rows into one sweep per seed, in order of appearance.
pub fn sweeps_from_csv(reader: impl Read) -> Result<Vec<NoiseSweep>> {
    #[derive(Deserialize)]
    struct Row {
        preprocessor: String,
        classifier: String,
        s: f64,
        top1: f64,
        seed: u64,
    }
    let mut sweeps: Vec<NoiseSweep> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
        let row = row?;
        let idx = match sweeps.iter().position(|s| s.seed == row.seed) {
            Some(i) => i,
            None => {
                sweeps.push(NoiseSweep { strengths: Vec::new(), seed: row.seed, curves: Vec::new() });
                sweeps.len() - 1
            }
        };
        let sweep = &mut sweeps[idx];
        if !sweep.strengths.contains(&row.s) {
            sweep.strengths.push(row.s);
        }
        match sweep.curves.iter_mut().find(|c| c.preprocessor == row.preprocessor && c.classifier == row.classifier) {
            Some(c) => c.top1.push(row.top1),
            None => sweep.curves.push(NoiseSweepCurve {
                preprocessor: row.preprocessor,
                classifier: row.classifier,
                top1: vec![row.top1],
            }),
        }
    }
    Ok(sweeps)
}

/// Writes a sorted RRC list as `autoencoder,classifier,rrc`.
pub fn write_sorted_rrc(entries: &[RrcEntry], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["autoencoder", "classifier", "rrc"])?;
    for e in entries {
        w.write_record([e.autoencoder.as_str(), e.classifier.as_str(), &e.value.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}
