//! Sample containers, UCI-HAR ingestion, signal filtering, windowing,
//! synthetic blobs and client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Input;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `channels × length`.
    pub window: Matrix,
    pub label: usize,
    pub subject_id: u32,
}

/// Samples sharing one window shape and label space.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    channels: usize,
    length: usize,
}

impl Dataset {
    /// `num_classes` of `None` takes `max label + 1`.
    pub fn new(samples: Vec<Sample>, num_classes: Option<usize>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::domain("dataset is empty"))?;
        let (channels, length) = (first.window.rows(), first.window.cols());
        let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0);
        let num_classes = num_classes.unwrap_or(max_label + 1);
        for (i, s) in samples.iter().enumerate() {
            if (s.window.rows(), s.window.cols()) != (channels, length) {
                return Err(Error::shape(
                    format!("sample {i}"),
                    format!("{channels}x{length}"),
                    format!("{}x{}", s.window.rows(), s.window.cols()),
                ));
            }
            if s.label >= num_classes {
                return Err(Error::domain(format!(
                    "sample {i} has label {} >= {num_classes}",
                    s.label
                )));
            }
            if !s.window.is_finite() {
                return Err(Error::domain(format!("sample {i} has non-finite values")));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            channels,
            length,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Stacks the selected samples into a network input.
    pub fn batch(&self, indices: &[usize]) -> Result<(Input, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.length);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::domain(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.window.data());
        }
        Ok((
            Input::new(indices.len(), self.channels, self.length, data)?,
            self.labels(indices),
        ))
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }
}

/// Channel files in load order.
pub const UCIHAR_SIGNALS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| load_err(path, format!("line {}: cannot parse `{tok}`", i + 1)))
                })
                .collect()
        })
        .collect()
}

fn read_ints(path: &Path) -> Result<Vec<u32>> {
    read_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u32),
            _ => Err(load_err(
                path,
                format!("line {}: expected one non-negative integer", i + 1),
            )),
        })
        .collect()
}

/// Finds the directory holding `train/` and `test/`, accepting either the
/// archive's top folder or its parent.
fn ucihar_base(root: &Path) -> PathBuf {
    let nested = root.join("UCI HAR Dataset");
    if !root.join("train").is_dir() && nested.join("train").is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn load_split(base: &Path, split: &str) -> Result<Vec<Sample>> {
    let dir = base.join(split);
    let signals: Vec<Vec<Vec<f64>>> = UCIHAR_SIGNALS
        .par_iter()
        .map(|sig| read_rows(&dir.join("Inertial Signals").join(format!("{sig}_{split}.txt"))))
        .collect::<Result<_>>()?;
    let labels_path = dir.join(format!("y_{split}.txt"));
    let subjects_path = dir.join(format!("subject_{split}.txt"));
    let labels = read_ints(&labels_path)?;
    let subjects = read_ints(&subjects_path)?;
    let n = labels.len();
    for (sig, rows) in UCIHAR_SIGNALS.iter().zip(&signals) {
        let path = dir.join("Inertial Signals").join(format!("{sig}_{split}.txt"));
        if rows.len() != n {
            return Err(load_err(&path, format!("{} rows but {n} labels", rows.len())));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != signals[0][0].len()) {
            return Err(load_err(&path, format!("row {} has {} columns", i + 1, rows[i].len())));
        }
    }
    if subjects.len() != n {
        return Err(load_err(
            &subjects_path,
            format!("{} rows but {n} labels", subjects.len()),
        ));
    }
    let length = signals[0].first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            if labels[i] == 0 {
                return Err(load_err(&labels_path, format!("line {}: labels are 1-based", i + 1)));
            }
            let mut data = Vec::with_capacity(UCIHAR_SIGNALS.len() * length);
            for ch in &signals {
                data.extend_from_slice(&ch[i]);
            }
            Ok(Sample {
                window: Matrix::new(UCIHAR_SIGNALS.len(), length, data)?,
                label: labels[i] as usize - 1,
                subject_id: subjects[i],
            })
        })
        .collect()
}

/// Reads the raw inertial windows of both archive splits, train first.
/// Labels become 0-based; subject ids are kept.
pub fn load_ucihar(root: &Path) -> Result<Dataset> {
    let base = ucihar_base(root);
    let mut samples = load_split(&base, "train")?;
    samples.extend(load_split(&base, "test")?);
    Dataset::new(samples, None)
}

/// Running median with edge replication; `width` must be odd.
pub fn median_filter(x: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(Error::domain(format!("median width must be odd, got {width}")));
    }
    let half = width / 2;
    let n = x.len();
    let mut buf = vec![0.0; width];
    Ok((0..n)
        .map(|i| {
            for (k, slot) in buf.iter_mut().enumerate() {
                let j = (i + k).saturating_sub(half).min(n - 1);
                *slot = x[j];
            }
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect())
}

/// One normalized IIR section `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Direct form II transposed, started in the steady state of `x[0]` so a
    /// constant input passes unchanged.
    fn apply(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let mut s2 = (b2 - a2) * x0;
        let mut s1 = (1.0 - b0) * x0;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + s1;
            s1 = b1 * input - a1 * y + s2;
            s2 = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass as cascaded sections, via the bilinear
/// transform with frequency prewarping.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Biquad>,
}

impl Butterworth {
    pub fn lowpass(order: usize, cutoff_hz: f64, fs_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::domain("Butterworth order must be at least 1"));
        }
        if !(fs_hz > 0.0 && cutoff_hz > 0.0 && cutoff_hz < fs_hz / 2.0) {
            return Err(Error::domain(format!(
                "cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({} Hz)",
                fs_hz / 2.0
            )));
        }
        let k = (std::f64::consts::PI * cutoff_hz / fs_hz).tan();
        let k2 = k * k;
        let mut sections = Vec::new();
        for j in 1..=order / 2 {
            // s² + 2 sin(θ_j) s + 1 for the j-th conjugate pole pair.
            let c = 2.0 * (std::f64::consts::PI * (2 * j - 1) as f64 / (2 * order) as f64).sin();
            let a0 = 1.0 + c * k + k2;
            sections.push(Biquad {
                b: [k2 / a0, 2.0 * k2 / a0, k2 / a0],
                a: [(2.0 * k2 - 2.0) / a0, (1.0 - c * k + k2) / a0],
            });
        }
        if order % 2 == 1 {
            let a0 = 1.0 + k;
            sections.push(Biquad {
                b: [k / a0, k / a0, 0.0],
                a: [(k - 1.0) / a0, 0.0],
            });
        }
        Ok(Self { sections })
    }

    /// Causal forward filtering.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.apply(&mut y);
        }
        y
    }
}

pub const GRAVITY_CUTOFF_HZ: f64 = 0.3;

fn map_rows(x: &Matrix, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        data.extend(f(x.row(r))?);
    }
    Matrix::new(x.rows(), x.cols(), data)
}

/// Per-channel median filter followed by a Butterworth low-pass, on a
/// `channels × T` signal.
pub fn preprocess_stream(
    signal: &Matrix,
    median_width: usize,
    butter_order: usize,
    cutoff_hz: f64,
    fs_hz: f64,
) -> Result<Matrix> {
    if signal.cols() <= median_width {
        return Err(Error::domain(format!(
            "signal length {} must exceed median width {median_width}",
            signal.cols()
        )));
    }
    let lp = Butterworth::lowpass(butter_order, cutoff_hz, fs_hz)?;
    map_rows(signal, |row| Ok(lp.filter(&median_filter(row, median_width)?)))
}

/// `(body, gravity)` where gravity is the low-passed signal at
/// [`GRAVITY_CUTOFF_HZ`] and body is the remainder.
pub fn split_gravity(signal: &Matrix, butter_order: usize, fs_hz: f64) -> Result<(Matrix, Matrix)> {
    let lp = Butterworth::lowpass(butter_order, GRAVITY_CUTOFF_HZ, fs_hz)?;
    let gravity = map_rows(signal, |row| Ok(lp.filter(row)))?;
    let body = signal.sub(&gravity)?;
    Ok((body, gravity))
}

/// Window starts for a stream of length `t`.
pub fn window_starts(t: usize, win: usize, overlap_fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::domain(format!(
            "overlap must lie in [0, 1), got {overlap_fraction}"
        )));
    }
    if win == 0 {
        return Err(Error::domain("window length must be positive"));
    }
    if win > t {
        return Ok(Vec::new());
    }
    let stride = ((win as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    Ok((0..=(t - win) / stride).map(|k| k * stride).collect())
}

/// Cuts `channels × T` into `channels × win` windows; the trailing remainder
/// is dropped.
pub fn sliding_windows(stream: &Matrix, win: usize, overlap_fraction: f64) -> Result<Vec<Matrix>> {
    window_starts(stream.cols(), win, overlap_fraction)?
        .into_iter()
        .map(|s| Ok(Matrix::from_fn(stream.rows(), win, |r, c| stream.get(r, s + c))))
        .collect()
}

/// Class centres at pairwise distance `separation`: scaled basis vectors
/// when `dims ≥ C`, otherwise a regular polygon in the first two axes (a
/// line for `dims = 1`).
pub fn synthetic_means(num_classes: usize, dims: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; dims];
            if dims >= num_classes {
                m[c] = separation / std::f64::consts::SQRT_2;
            } else if dims == 1 || num_classes <= 2 {
                m[0] = c as f64 * separation;
            } else {
                let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// Unit-variance Gaussian blobs around [`synthetic_means`], emitted as
/// `1 × dims` windows, class-interleaved.
pub fn make_synthetic(
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || samples_per_class == 0 {
        return Err(Error::domain(
            "synthetic data needs at least one class, dimension and sample",
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::domain(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let means = synthetic_means(num_classes, dims, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (label, mean) in means.iter().enumerate() {
            let v: Vec<f64> = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            samples.push(Sample {
                window: Matrix::new(1, dims, v)?,
                label,
                subject_id: 0,
            });
        }
    }
    Dataset::new(samples, Some(num_classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    BySubject,
    IidShuffle,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub num_clients: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_train_fraction() -> f64 {
    0.8
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            errs.push(format!("partition.alpha must be positive, got {}", self.alpha));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push(format!(
                "partition.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.num_clients == 0 {
            errs.push("partition.num_clients must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Sample indices held by one client.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.test.is_empty()
    }
}

pub const DIRICHLET_MAX_RETRIES: usize = 100;

fn equal_slices(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (indices.len() / k, indices.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        out.push(indices[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Client proportions from `Dirichlet(alpha·1)`, drawn as normalized gammas.
fn dirichlet_draw(k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::domain(e.to_string()))?;
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        // Tiny shapes can underflow every draw to zero.
        if s > 0.0 && s.is_finite() {
            return Ok(g.into_iter().map(|x| x / s).collect());
        }
    }
}

fn dirichlet_assignment(ds: &Dataset, k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }
    for _ in 0..DIRICHLET_MAX_RETRIES {
        let mut clients = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let p = dirichlet_draw(k, alpha, rng)?;
            let n = members.len() as f64;
            let mut cum = 0.0;
            let mut start = 0;
            for (c, pc) in p.iter().enumerate() {
                cum += pc;
                let end = if c + 1 == k {
                    members.len()
                } else {
                    ((cum * n).round() as usize).min(members.len())
                };
                clients[c].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            return Ok(clients);
        }
    }
    Err(Error::Partition(format!(
        "Dirichlet(alpha={alpha}) left a client empty after {DIRICHLET_MAX_RETRIES} draws"
    )))
}

/// Splits one client's indices into train/test, per class by largest
/// remainder so class proportions are kept where sizes permit.
fn stratified_split(ds: &Dataset, mut indices: Vec<usize>, train_fraction: f64, rng: &mut impl Rng) -> ClientShard {
    indices.shuffle(rng);
    let n = indices.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), n);
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for &i in &indices {
        by_class[ds.samples()[i].label].push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|m| m.len() as f64 * n_train as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = n_train - quota.iter().sum::<usize>();
    for c in order {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut shard = ClientShard::default();
    for (members, q) in by_class.iter().zip(quota) {
        shard.train.extend_from_slice(&members[..q]);
        shard.test.extend_from_slice(&members[q..]);
    }
    shard.train.sort_unstable();
    shard.test.sort_unstable();
    shard
}

/// Assigns every sample to exactly one client and splits each client's
/// holdings into train and test.
pub fn partition(ds: &Dataset, spec: &PartitionSpec, rng: &mut impl Rng) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let k = spec.num_clients;
    let n = ds.len();
    let groups = match spec.mode {
        PartitionMode::IidShuffle => {
            if k > n {
                return Err(Error::Partition(format!("{k} clients but only {n} samples")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            equal_slices(&idx, k)
        }
        PartitionMode::BySubject => {
            let mut subjects: Vec<u32> = ds.samples().iter().map(|s| s.subject_id).collect();
            subjects.sort_unstable();
            subjects.dedup();
            if subjects.len() < k {
                return Err(Error::Partition(format!(
                    "{k} clients but only {} distinct subjects",
                    subjects.len()
                )));
            }
            let mut groups = vec![Vec::new(); k];
            for (i, s) in ds.samples().iter().enumerate() {
                let pos = subjects.binary_search(&s.subject_id).expect("subject listed");
                groups[pos % k].push(i);
            }
            groups
        }
        PartitionMode::Dirichlet => {
            if k > n {
                return Err(Error::Partition(format!("{k} clients but only {n} samples")));
            }
            dirichlet_assignment(ds, k, spec.alpha, rng)?
        }
    };
    Ok(groups
        .into_iter()
        .map(|g| stratified_split(ds, g, spec.train_fraction, rng))
        .collect())
}

/// Per-client class counts over train and test together.
pub fn class_count_table(ds: &Dataset, shards: &[ClientShard]) -> Vec<Vec<usize>> {
    shards
        .iter()
        .map(|s| {
            let mut c = ds.class_counts(&s.train);
            for (a, b) in c.iter_mut().zip(ds.class_counts(&s.test)) {
                *a += b;
            }
            c
        })
        .collect()
}
