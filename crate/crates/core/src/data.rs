//! Datasets: unit-sphere regression data for the theory checks, planted-module
//! tasks for selection experiments, CSV input/output and train/valid splits.
//!
//! A dataset stores one example per column of `x` (`d×n`) and labels in an
//! `n×1` column. Modular-network examples are flattened token matrices.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Family, LowRankAdapter};
use crate::error::{Error, Result};
use crate::models::{modular_forward, AdapterSlot, ModularNet};
use crate::numerics::{gaussian_matrix, Matrix, SeededRng};

/// Largest `|cos|` tolerated between two theory inputs.
pub const MAX_ABS_COSINE: f64 = 1.0 - 1e-6;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Descriptor {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl Descriptor {
    pub fn new(generator: &str, seed: u64) -> Self {
        Self {
            generator: generator.to_string(),
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    /// Single-line `key=value` rendering used in CSV comment headers.
    pub fn to_line(&self) -> String {
        let mut s = format!("generator={} seed={}", self.generator, self.seed);
        for (k, v) in &self.params {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub descriptor: Descriptor,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, descriptor: Descriptor) -> Result<Self> {
        if y.shape() != (x.cols(), 1) {
            return Err(Error::Dimension(format!(
                "{} examples but labels are {}x{}",
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        Ok(Self { x, y, descriptor })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("index {bad} out of range for {n} examples")));
        }
        let x = Matrix::from_fn(self.dim(), indices.len(), |r, c| self.x[(r, indices[c])]);
        let y = Matrix::from_fn(indices.len(), 1, |r, _| self.y[(indices[r], 0)]);
        Dataset::new(x, y, self.descriptor.clone())
    }

    /// Checks the theory premises: unit columns, pairwise non-parallel, `|y_i| ≤ c_label`.
    pub fn validate_theory(&self, c_label: f64) -> Result<()> {
        crate::models::check_unit_columns(&self.x)?;
        if let Some((i, j, c)) = most_parallel_pair(&self.x).filter(|&(_, _, c)| c >= MAX_ABS_COSINE) {
            return Err(Error::Data(format!("inputs {i} and {j} are parallel (|cos| = {c})")));
        }
        if let Some(v) = self.y.data().iter().find(|v| v.abs() > c_label) {
            return Err(Error::Data(format!("label {v} exceeds bound {c_label}")));
        }
        Ok(())
    }
}

fn normalize_columns(x: &mut Matrix) {
    for j in 0..x.cols() {
        let c = x.column(j);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            x.set_column(j, &c.iter().map(|v| v / norm).collect::<Vec<_>>());
        }
    }
}

/// `(i, j, |cos|)` of the pair with the largest absolute cosine.
fn most_parallel_pair(x: &Matrix) -> Option<(usize, usize, f64)> {
    let xt = x.transpose();
    let norms: Vec<f64> = (0..xt.rows()).map(|i| xt.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..xt.rows() {
        for j in (i + 1)..xt.rows() {
            let dot: f64 = xt.row(i).iter().zip(xt.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).abs();
            if best.is_none_or(|b| c > b.2) {
                best = Some((i, j, c));
            }
        }
    }
    best
}

/// `n` unit vectors in `ℝ^d`, pairwise non-parallel, labels uniform in `[-c_label, c_label]`.
pub fn gen_sphere(n: usize, d: usize, c_label: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if n == 0 || d < 2 {
        return Err(Error::Config(format!("sphere data needs n >= 1 and d >= 2 (got n={n}, d={d})")));
    }
    let seed = rng.seed();
    let mut x = gaussian_matrix(d, n, rng)?;
    normalize_columns(&mut x);

    let mut attempts = 0;
    while let Some((_, j, _)) = most_parallel_pair(&x).filter(|&(_, _, c)| c >= MAX_ABS_COSINE) {
        attempts += 1;
        if attempts > 100 * n {
            return Err(Error::Feasibility(format!(
                "could not draw {n} non-parallel unit vectors in dimension {d}"
            )));
        }
        let mut fresh = gaussian_matrix(d, 1, rng)?;
        normalize_columns(&mut fresh);
        x.set_column(j, fresh.data());
    }

    let y = Matrix::from_fn(n, 1, |_, _| (2.0 * rng.uniform() - 1.0) * c_label);
    let descriptor = Descriptor::new("sphere", seed)
        .with("n", n)
        .with("d", d)
        .with("c_label", c_label);
    let ds = Dataset::new(x, y, descriptor)?;
    ds.validate_theory(c_label)?;
    Ok(ds)
}

/// Generator settings for a planted-module task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedOptions {
    pub n: usize,
    pub noise: f64,
    pub teacher_rank: usize,
    /// Standard deviation of teacher increments relative to base weights.
    pub teacher_scale: f64,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        Self {
            n: 96,
            noise: 0.01,
            teacher_rank: 2,
            teacher_scale: 0.3,
        }
    }
}

/// `L×6` mask with exactly `k` random ones per row.
pub fn random_module_mask(layers: usize, k: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if k == 0 || k > Family::COUNT {
        return Err(Error::Config(format!("cannot plant {k} of {} modules per layer", Family::COUNT)));
    }
    let mut mask = Matrix::zeros(layers, Family::COUNT);
    for l in 0..layers {
        for &j in rng.permutation(Family::COUNT).iter().take(k) {
            mask[(l, j)] = 1.0;
        }
    }
    Ok(mask)
}

/// Token inputs for a modular net: i.i.d. standard normal entries.
pub fn sample_token_inputs(base: &ModularNet, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
    gaussian_matrix(base.shape().input_len(), n, rng)
}

/// Builds a teacher from `base` with nonzero adapters exactly on the `planted`
/// modules (`L×6`, binary, same count per row) and labels `n` random inputs
/// with its outputs plus Gaussian noise.
pub fn gen_planted(
    base: &ModularNet,
    planted: &Matrix,
    opts: &PlantedOptions,
    rng: &mut SeededRng,
) -> Result<(Dataset, ModularNet)> {
    let layers = base.num_layers();
    if planted.shape() != (layers, Family::COUNT) {
        return Err(Error::Config(format!(
            "planted set must be {layers}x6, got {}x{}",
            planted.rows(),
            planted.cols()
        )));
    }
    if planted.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config("planted set must be binary".into()));
    }
    let per_row: Vec<usize> = (0..layers).map(|l| planted.row(l).iter().filter(|&&v| v == 1.0).count()).collect();
    if per_row.iter().all(|&c| c == 0) {
        return Err(Error::Config("planted set is empty".into()));
    }
    if per_row.iter().any(|&c| c != per_row[0]) {
        return Err(Error::Config(format!("planted modules per layer differ: {per_row:?}")));
    }
    if opts.n == 0 {
        return Err(Error::Config("planted task needs n >= 1".into()));
    }

    let seed = rng.seed();
    let dim = base.shape().dim;
    let r = opts.teacher_rank.clamp(1, dim);
    let mut teacher = base.clone();
    teacher.detach_all();
    let mut weights_rng = rng.derive(0);
    for l in 0..layers {
        for fam in Family::ALL {
            if planted[(l, fam.index())] == 1.0 {
                // With alpha = r the increment has entries of variance scale²/dim.
                let a = gaussian_matrix(r, dim, &mut weights_rng)?.scale(1.0 / (r as f64).sqrt());
                let b = gaussian_matrix(dim, r, &mut weights_rng)?.scale(opts.teacher_scale / (dim as f64).sqrt());
                teacher.set_slot(l, fam, AdapterSlot::Own(LowRankAdapter::from_parts(a, b, r as f64)?))?;
            }
        }
    }

    let mut input_rng = rng.derive(1);
    let x = sample_token_inputs(base, opts.n, &mut input_rng)?;
    let clean = modular_forward(&teacher, &Matrix::filled(layers, Family::COUNT, 1.0), &x)?;
    let mut noise_rng = rng.derive(2);
    let y = clean.add(&Matrix::from_fn(opts.n, 1, |_, _| opts.noise * noise_rng.gaussian()))?;

    let descriptor = Descriptor::new("planted", seed)
        .with("n", opts.n)
        .with("noise", opts.noise)
        .with("teacher_rank", r)
        .with("teacher_scale", opts.teacher_scale)
        .with("per_layer", per_row[0]);
    Ok((Dataset::new(x, y, descriptor)?, teacher))
}

/// Reads a headered numeric CSV: every column except `label_column` becomes a
/// feature row of `x`. Lines starting with `#` are comments.
pub fn ingest_csv(path: impl AsRef<Path>, label_column: &str, normalize: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut ds = read_csv(file, label_column, normalize)?;
    ds.descriptor = Descriptor::new("csv", 0).with("path", path.display());
    Ok(ds)
}

pub fn read_csv<R: Read>(reader: R, label_column: &str, normalize: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let header_line = headers.position().map_or(1, |p| p.line());
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| Error::Parse {
        line: header_line,
        message: format!("no label column named {label_column:?}"),
    })?;
    let d = headers.len() - 1;

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(d);
        for (i, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric cell {cell:?} in column {:?}", &headers[i]),
            })?;
            if i == label_idx {
                labels.push(v);
            } else {
                row.push(v);
            }
        }
        features.push(row);
    }
    let n = features.len();
    let mut x = Matrix::from_fn(d, n, |r, c| features[c][r]);
    if normalize {
        normalize_columns(&mut x);
    }
    Dataset::new(x, Matrix::column_vector(&labels), Descriptor::new("csv", 0))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            message: format!("row has {len} fields, expected {expected_len}"),
        },
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        _ => Error::Parse {
            line,
            message: e.to_string(),
        },
    }
}

/// Writes `# <descriptor>`, a header `f1..fd,y`, then one example per row with
/// 17 significant digits so that [`read_csv`] restores the values bitwise.
pub fn write_csv<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "# {}", ds.descriptor.to_line())?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=ds.dim()).map(|i| format!("f{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_error)?;
    for j in 0..ds.len() {
        let mut row: Vec<String> = (0..ds.dim()).map(|i| format_f64(ds.x[(i, j)])).collect();
        row.push(format_f64(ds.y[(j, 0)]));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits, scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Seeded partition of example indices into train and validation parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Fraction of the data drawn before splitting, in per-mille.
    pub subsample_permille: u32,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` and cuts at `⌊fraction·n⌋`; both parts must be non-empty.
pub fn make_split(n: usize, fraction: f64, rng: &mut SeededRng) -> Result<SplitPlan> {
    make_split_subsampled(n, 1.0, fraction, rng)
}

/// As [`make_split`], after first keeping a random `⌊subsample·n⌋` of the examples.
pub fn make_split_subsampled(n: usize, subsample: f64, fraction: f64, rng: &mut SeededRng) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::Config(format!("subsample {subsample} must lie in (0, 1]")));
    }
    let seed = rng.seed();
    let kept = (subsample * n as f64).floor() as usize;
    let perm = rng.permutation(n);
    let cut = (fraction * kept as f64).floor() as usize;
    if cut == 0 || cut == kept {
        return Err(Error::Config(format!(
            "split of {kept} examples at fraction {fraction} leaves an empty part"
        )));
    }
    let mut train = perm[..cut].to_vec();
    let mut valid = perm[cut..kept].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    Ok(SplitPlan {
        subsample_permille: (subsample * 1000.0).round() as u32,
        train,
        valid,
        seed,
    })
}
