//! Domain-adaptation datasets: a labeled source domain plus an unlabeled
//! target domain, with optional held-back target labels that only the
//! evaluation path may read. Includes two synthetic shift generators, CSV
//! import/export, and seeded minibatch schedules.

use crate::hashing::derive_seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {reason}")]
    Invalid { reason: String },
    #[error("csv {path}: header must be f0..f{{d-1}} with optional trailing 'label', got {found:?}")]
    BadHeader { path: String, found: Vec<String> },
    #[error("csv {path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    BadValue {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("csv {path}: row {row}: label {label} is outside [0, {class_count})")]
    CsvLabelOutOfRange {
        path: String,
        row: usize,
        label: usize,
        class_count: usize,
    },
    #[error("csv {path}: row {row}: has {got} fields, header has {expected}")]
    WidthMismatch {
        path: String,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("csv {path}: no data rows")]
    EmptyCsv { path: String },
    #[error("source csv {path} must carry a 'label' column")]
    SourceLabelsMissing { path: String },
    #[error("this dataset holds no target evaluation labels")]
    NoEvalLabels,
    #[error("io {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

pub type DataResult<T> = Result<T, DataError>;

/// A source/target pair for unsupervised adaptation. Target labels, when
/// present, exist purely for evaluation and are reachable only through
/// [`DomainDataset::eval_labels`].
#[derive(Debug, Clone)]
pub struct DomainDataset {
    source_features: Tensor,
    source_labels: Vec<usize>,
    target_features: Tensor,
    target_labels_eval: Option<Vec<usize>>,
    class_count: usize,
    feature_bounds: Vec<(f64, f64)>,
}

impl DomainDataset {
    pub fn new(
        source_features: Tensor,
        source_labels: Vec<usize>,
        target_features: Tensor,
        target_labels_eval: Option<Vec<usize>>,
        class_count: usize,
    ) -> DataResult<Self> {
        if class_count < 2 {
            return Err(DataError::Invalid {
                reason: format!("class_count must be at least 2, got {class_count}"),
            });
        }
        if source_features.cols() != target_features.cols() {
            return Err(DataError::Invalid {
                reason: format!(
                    "source feature dim {} differs from target feature dim {}",
                    source_features.cols(),
                    target_features.cols()
                ),
            });
        }
        if source_labels.len() != source_features.rows() {
            return Err(DataError::Invalid {
                reason: format!(
                    "{} source labels for {} source rows",
                    source_labels.len(),
                    source_features.rows()
                ),
            });
        }
        if let Some(labels) = &target_labels_eval {
            if labels.len() != target_features.rows() {
                return Err(DataError::Invalid {
                    reason: format!(
                        "{} target labels for {} target rows",
                        labels.len(),
                        target_features.rows()
                    ),
                });
            }
        }
        for (i, &l) in source_labels
            .iter()
            .chain(target_labels_eval.iter().flatten())
            .enumerate()
        {
            if l >= class_count {
                return Err(DataError::Invalid {
                    reason: format!("label {l} at position {i} is outside [0, {class_count})"),
                });
            }
        }
        let feature_bounds = compute_bounds(&source_features, &target_features);
        Ok(Self {
            source_features,
            source_labels,
            target_features,
            target_labels_eval,
            class_count,
            feature_bounds,
        })
    }

    /// A dataset holding only target-domain data, for robustification runs
    /// where no source files exist. The source side is empty; pretraining
    /// on such a dataset fails, but the target view works as usual.
    pub fn target_only(
        target_features: Tensor,
        target_labels_eval: Option<Vec<usize>>,
        class_count: usize,
    ) -> DataResult<Self> {
        let dim = target_features.cols();
        Self::new(
            Tensor::zeros(0, dim),
            Vec::new(),
            target_features,
            target_labels_eval,
            class_count,
        )
    }

    pub fn source_features(&self) -> &Tensor {
        &self.source_features
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    pub fn target_features(&self) -> &Tensor {
        &self.target_features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.source_features.cols()
    }

    /// Per-feature (min, max) over the union of both domains.
    pub fn feature_bounds(&self) -> &[(f64, f64)] {
        &self.feature_bounds
    }

    pub fn n_source(&self) -> usize {
        self.source_features.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_features.rows()
    }

    pub fn has_eval_labels(&self) -> bool {
        self.target_labels_eval.is_some()
    }

    /// Held-back target labels. Evaluation and auditing call this; training
    /// code works through the views below, which cannot reach it.
    pub fn eval_labels(&self) -> DataResult<&[usize]> {
        self.target_labels_eval
            .as_deref()
            .ok_or(DataError::NoEvalLabels)
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView { ds: self }
    }

    pub fn target_view(&self) -> TargetView<'_> {
        TargetView { ds: self }
    }
}

/// What pretraining may see: labeled source, unlabeled target.
#[derive(Clone, Copy)]
pub struct TrainView<'a> {
    ds: &'a DomainDataset,
}

impl<'a> TrainView<'a> {
    pub fn source_features(&self) -> &'a Tensor {
        &self.ds.source_features
    }

    pub fn source_labels(&self) -> &'a [usize] {
        &self.ds.source_labels
    }

    pub fn target_features(&self) -> &'a Tensor {
        &self.ds.target_features
    }

    pub fn class_count(&self) -> usize {
        self.ds.class_count
    }

    pub fn feature_bounds(&self) -> &'a [(f64, f64)] {
        &self.ds.feature_bounds
    }
}

/// What robustification may see: the unlabeled target domain only.
#[derive(Clone, Copy)]
pub struct TargetView<'a> {
    ds: &'a DomainDataset,
}

impl<'a> TargetView<'a> {
    pub fn target_features(&self) -> &'a Tensor {
        &self.ds.target_features
    }

    pub fn class_count(&self) -> usize {
        self.ds.class_count
    }

    pub fn feature_bounds(&self) -> &'a [(f64, f64)] {
        &self.ds.feature_bounds
    }
}

fn compute_bounds(a: &Tensor, b: &Tensor) -> Vec<(f64, f64)> {
    let d = a.cols();
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for t in [a, b] {
        for i in 0..t.rows() {
            for (j, bound) in bounds.iter_mut().enumerate() {
                let v = t.get(i, j);
                bound.0 = bound.0.min(v);
                bound.1 = bound.1.max(v);
            }
        }
    }
    bounds
}

/// Synthetic dataset recipes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Two interleaved moons; the target domain is an independent draw
    /// rotated about the origin by `angle_degrees`.
    TwoMoonsRotate {
        n_source: usize,
        n_target: usize,
        noise: f64,
        angle_degrees: f64,
    },
    /// Gaussian blobs on a circle; the target domain translates every mean
    /// by `shift` and scales the noise by `cov_scale`.
    GaussianMixtureShift {
        n_source: usize,
        n_target: usize,
        class_count: usize,
        radius: f64,
        noise: f64,
        shift: (f64, f64),
        cov_scale: f64,
    },
}

impl DatasetSpec {
    pub fn class_count(&self) -> usize {
        match self {
            DatasetSpec::TwoMoonsRotate { .. } => 2,
            DatasetSpec::GaussianMixtureShift { class_count, .. } => *class_count,
        }
    }

    /// Feature dimension the recipe generates.
    pub fn feature_dim(&self) -> usize {
        GENERATED_DIM
    }

    pub fn generate(&self, seed: u64) -> DataResult<DomainDataset> {
        match *self {
            DatasetSpec::TwoMoonsRotate {
                n_source,
                n_target,
                noise,
                angle_degrees,
            } => two_moons_rotate(n_source, n_target, noise, angle_degrees, seed),
            DatasetSpec::GaussianMixtureShift {
                n_source,
                n_target,
                class_count,
                radius,
                noise,
                shift,
                cov_scale,
            } => gaussian_mixture_shift(
                n_source,
                n_target,
                class_count,
                radius,
                noise,
                shift,
                cov_scale,
                seed,
            ),
        }
    }
}

/// Box-Muller standard normal; consumes exactly two draws per sample.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Label-independent distractor coordinates appended to every generated
/// sample. Unregularized fits lean on their finite-sample correlations,
/// which is exactly the slack a bounded perturbation exploits; robust
/// training has to learn to ignore them. Identical law in both domains.
/// Many narrow coordinates keep that slack large relative to the noise
/// they add to clean predictions: sign perturbations stack linearly in
/// the dimension while the clean variance only grows with its square
/// root.
pub const DISTRACTOR_DIMS: usize = 40;
/// Standard deviation of the distractor coordinates.
pub const DISTRACTOR_SD: f64 = 0.07;
/// Feature dimension produced by both built-in generators: the planar
/// class geometry plus the distractors.
pub const GENERATED_DIM: usize = 2 + DISTRACTOR_DIMS;

fn push_distractors(data: &mut Vec<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for _ in 0..DISTRACTOR_DIMS {
        data.push(scale * DISTRACTOR_SD * normal(rng));
    }
}

fn moon_point(class: usize, t: f64, noise: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Moons centered on the origin so rotation shifts class geometry
    // without translating the cloud. The 0.4 vertical offset leaves a 0.2
    // gap between the noiseless arcs, keeping margins comparable to the
    // perturbation budgets this toolkit studies.
    let (mut x, mut y) = if class == 0 {
        (t.cos() - 0.5, t.sin() - 0.4)
    } else {
        (0.5 - t.cos(), 0.4 - t.sin())
    };
    x += noise * normal(rng);
    y += noise * normal(rng);
    (x, y)
}

fn sample_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut data = Vec::with_capacity(n * GENERATED_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (x, y) = moon_point(class, t, noise, rng);
        data.push(x);
        data.push(y);
        push_distractors(&mut data, 1.0, rng);
        labels.push(class);
    }
    (data, labels)
}

pub fn two_moons_rotate(
    n_source: usize,
    n_target: usize,
    noise: f64,
    angle_degrees: f64,
    seed: u64,
) -> DataResult<DomainDataset> {
    if n_source == 0 || n_target == 0 {
        return Err(DataError::Invalid {
            reason: "both domains need at least one sample".into(),
        });
    }
    if noise < 0.0 {
        return Err(DataError::Invalid {
            reason: format!("noise must be nonnegative, got {noise}"),
        });
    }
    let mut src_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "moons-source", 0));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "moons-target", 0));
    let (src_data, src_labels) = sample_moons(n_source, noise, &mut src_rng);
    // The rotation happens after sampling, so the RNG consumption and the
    // underlying draw are identical across angles.
    let (mut tgt_data, tgt_labels) = sample_moons(n_target, noise, &mut tgt_rng);
    // The rotation acts on the class-geometry plane; distractor
    // coordinates shift identically in both domains regardless of angle.
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    for i in 0..n_target {
        let x = tgt_data[GENERATED_DIM * i];
        let y = tgt_data[GENERATED_DIM * i + 1];
        tgt_data[GENERATED_DIM * i] = cos * x - sin * y;
        tgt_data[GENERATED_DIM * i + 1] = sin * x + cos * y;
    }
    DomainDataset::new(
        Tensor::new(n_source, GENERATED_DIM, src_data).expect("shape by construction"),
        src_labels,
        Tensor::new(n_target, GENERATED_DIM, tgt_data).expect("shape by construction"),
        Some(tgt_labels),
        2,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn gaussian_mixture_shift(
    n_source: usize,
    n_target: usize,
    class_count: usize,
    radius: f64,
    noise: f64,
    shift: (f64, f64),
    cov_scale: f64,
    seed: u64,
) -> DataResult<DomainDataset> {
    if n_source == 0 || n_target == 0 {
        return Err(DataError::Invalid {
            reason: "both domains need at least one sample".into(),
        });
    }
    if class_count < 2 {
        return Err(DataError::Invalid {
            reason: format!("class_count must be at least 2, got {class_count}"),
        });
    }
    if noise < 0.0 || cov_scale < 0.0 || radius <= 0.0 {
        return Err(DataError::Invalid {
            reason: format!(
                "radius must be positive and noise/cov_scale nonnegative, got radius {radius}, noise {noise}, cov_scale {cov_scale}"
            ),
        });
    }
    let mean = |class: usize| {
        let phi = std::f64::consts::TAU * class as f64 / class_count as f64;
        (radius * phi.cos(), radius * phi.sin())
    };
    let sample = |n: usize, offset: (f64, f64), scale: f64, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(n * GENERATED_DIM);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % class_count;
            let (mx, my) = mean(class);
            data.push(mx + offset.0 + scale * noise * normal(rng));
            data.push(my + offset.1 + scale * noise * normal(rng));
            // cov_scale widens only the class-plane covariance; the
            // distractor law stays identical across domains.
            push_distractors(&mut data, 1.0, rng);
            labels.push(class);
        }
        (data, labels)
    };
    let mut src_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gmm-source", 0));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gmm-target", 0));
    let (src_data, src_labels) = sample(n_source, (0.0, 0.0), 1.0, &mut src_rng);
    let (tgt_data, tgt_labels) = sample(n_target, shift, cov_scale, &mut tgt_rng);
    DomainDataset::new(
        Tensor::new(n_source, GENERATED_DIM, src_data).expect("shape by construction"),
        src_labels,
        Tensor::new(n_target, GENERATED_DIM, tgt_data).expect("shape by construction"),
        Some(tgt_labels),
        class_count,
    )
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one domain to CSV with header `f0..f{d-1}` plus `label` when
/// labels are given. Values use the shortest decimal form that parses back
/// to the identical f64.
pub fn save_csv(features: &Tensor, labels: Option<&[usize]>, path: &Path) -> DataResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("f{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    let wrap = |e: csv::Error| DataError::Csv {
        path: path.display().to_string(),
        source: e,
    };
    writer.write_record(&header).map_err(wrap)?;
    for i in 0..features.rows() {
        let mut record: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(labels) = labels {
            record.push(labels[i].to_string());
        }
        writer.write_record(&record).map_err(wrap)?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads one domain from CSV. The header must be `f0..f{d-1}` with an
/// optional trailing `label` column.
pub fn load_csv(path: &Path) -> DataResult<(Tensor, Option<Vec<usize>>)> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Csv {
        path: display.clone(),
        source: e,
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: display.clone(),
            source: e,
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let has_label = headers.last().map(|s| s == "label").unwrap_or(false);
    let d = headers.len() - usize::from(has_label);
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if d == 0 || headers[..d] != expected[..] {
        return Err(DataError::BadHeader {
            path: display,
            found: headers,
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after the header line
        let record = record.map_err(|e| DataError::Csv {
            path: display.clone(),
            source: e,
        })?;
        if record.len() != headers.len() {
            return Err(DataError::WidthMismatch {
                path: display,
                row,
                got: record.len(),
                expected: headers.len(),
            });
        }
        for j in 0..d {
            let field = &record[j];
            let v: f64 = field.parse().map_err(|_| DataError::BadValue {
                path: display.clone(),
                row,
                column: format!("f{j}"),
                value: field.to_string(),
            })?;
            data.push(v);
        }
        if has_label {
            let field = &record[d];
            let l: usize = field.parse().map_err(|_| DataError::BadValue {
                path: display.clone(),
                row,
                column: "label".into(),
                value: field.to_string(),
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::EmptyCsv { path: display });
    }
    let features = Tensor::new(rows, d, data).expect("rows*d elements by construction");
    Ok((features, has_label.then_some(labels)))
}

/// Builds a [`DomainDataset`] from a labeled source CSV and a target CSV
/// whose labels, if present, become evaluation labels. `class_count` is
/// inferred from the labels when not given.
pub fn load_domain_csv(
    source_path: &Path,
    target_path: &Path,
    class_count: Option<usize>,
) -> DataResult<DomainDataset> {
    let (src_features, src_labels) = load_csv(source_path)?;
    let src_labels = src_labels.ok_or_else(|| DataError::SourceLabelsMissing {
        path: source_path.display().to_string(),
    })?;
    let (tgt_features, tgt_labels) = load_csv(target_path)?;
    let inferred = src_labels
        .iter()
        .chain(tgt_labels.iter().flatten())
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0);
    let class_count = class_count.unwrap_or(inferred).max(2);
    DomainDataset::new(src_features, src_labels, tgt_features, tgt_labels, class_count)
}

/// Writes `source.csv` (with labels) and `target.csv` (with labels when the
/// dataset holds evaluation labels) into `dir`.
pub fn save_domain_csv(ds: &DomainDataset, dir: &Path) -> DataResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_csv(
        &ds.source_features,
        Some(&ds.source_labels),
        &dir.join("source.csv"),
    )?;
    save_csv(
        &ds.target_features,
        ds.target_labels_eval.as_deref(),
        &dir.join("target.csv"),
    )
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One epoch of single-stream batches: a fresh permutation per
/// (seed, epoch), chunked; the final batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(n > 0 && batch_size > 0, "need data and a positive batch size");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "minibatch", epoch));
    shuffled(n, &mut rng)
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// One epoch of paired source/target batches. The longer stream is permuted
/// once and chunked, defining the epoch; the shorter stream cycles through
/// fresh permutations to fill each batch to the same size.
pub fn paired_epoch_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(
        n_source > 0 && n_target > 0 && batch_size > 0,
        "need data and a positive batch size"
    );
    let mut long_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "minibatch-long", epoch));
    let mut short_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "minibatch-short", epoch));
    let source_longer = n_source >= n_target;
    let (n_long, n_short) = if source_longer {
        (n_source, n_target)
    } else {
        (n_target, n_source)
    };
    let long_perm = shuffled(n_long, &mut long_rng);
    let mut short_pool: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for chunk in long_perm.chunks(batch_size) {
        let mut short_batch = Vec::with_capacity(chunk.len());
        for _ in 0..chunk.len() {
            if short_pool.is_empty() {
                short_pool = shuffled(n_short, &mut short_rng);
            }
            short_batch.push(short_pool.pop().expect("refilled above"));
        }
        let long_batch = chunk.to_vec();
        if source_longer {
            out.push((long_batch, short_batch));
        } else {
            out.push((short_batch, long_batch));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn moons_are_seed_deterministic() {
        let a = two_moons_rotate(40, 30, 0.1, 30.0, 5).unwrap();
        let b = two_moons_rotate(40, 30, 0.1, 30.0, 5).unwrap();
        let c = two_moons_rotate(40, 30, 0.1, 30.0, 6).unwrap();
        assert_eq!(a.source_features(), b.source_features());
        assert_eq!(a.target_features(), b.target_features());
        assert_ne!(a.source_features(), c.source_features());
    }

    #[test]
    fn moons_rotation_only_rotates_the_target() {
        let flat = two_moons_rotate(50, 50, 0.05, 0.0, 9).unwrap();
        let rot = two_moons_rotate(50, 50, 0.05, 30.0, 9).unwrap();
        // Source untouched by the angle, bitwise.
        assert_eq!(flat.source_features(), rot.source_features());
        // Target rows keep their plane norms under rotation about the
        // origin, and the distractor coordinates are bitwise identical.
        for i in 0..50 {
            let a = flat.target_features().row(i);
            let b = rot.target_features().row(i);
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() <= 1e-12);
            assert_eq!(a[2..], b[2..]);
        }
        assert_ne!(flat.target_features(), rot.target_features());
        // Labels match the common underlying draw.
        assert_eq!(flat.eval_labels().unwrap(), rot.eval_labels().unwrap());
    }

    #[test]
    fn distractor_coordinates_are_label_independent() {
        let ds = two_moons_rotate(600, 10, 0.1, 0.0, 21).unwrap();
        assert_eq!(ds.feature_dim(), GENERATED_DIM);
        for class in 0..2 {
            for j in 2..GENERATED_DIM {
                let mut acc = 0.0;
                let mut count = 0.0;
                for i in 0..600 {
                    if ds.source_labels()[i] == class {
                        acc += ds.source_features().get(i, j);
                        count += 1.0;
                    }
                }
                // Zero-mean regardless of class; 0.3/sqrt(300) puts the
                // standard error near 0.017.
                assert!((acc / count).abs() < 0.08);
            }
        }
    }

    #[test]
    fn moons_labels_are_balanced_binary() {
        let ds = two_moons_rotate(41, 20, 0.1, 15.0, 3).unwrap();
        assert_eq!(ds.class_count(), 2);
        let ones = ds.source_labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 20);
        assert!(ds.source_labels().iter().all(|&l| l < 2));
    }

    #[test]
    fn gaussian_mixture_means_shift_as_configured() {
        let shift = (1.5, -0.5);
        let ds = gaussian_mixture_shift(600, 600, 3, 2.0, 0.3, shift, 1.0, 11).unwrap();
        let labels_src = ds.source_labels();
        let labels_tgt = ds.eval_labels().unwrap();
        for class in 0..3 {
            let phi = std::f64::consts::TAU * class as f64 / 3.0;
            let mu = (2.0 * phi.cos(), 2.0 * phi.sin());
            let mut acc = (0.0, 0.0);
            let mut count = 0.0;
            for i in 0..600 {
                if labels_src[i] == class {
                    acc.0 += ds.source_features().get(i, 0);
                    acc.1 += ds.source_features().get(i, 1);
                    count += 1.0;
                }
            }
            assert!((acc.0 / count - mu.0).abs() < 0.12);
            assert!((acc.1 / count - mu.1).abs() < 0.12);

            let mut acc = (0.0, 0.0);
            let mut count = 0.0;
            for i in 0..600 {
                if labels_tgt[i] == class {
                    acc.0 += ds.target_features().get(i, 0);
                    acc.1 += ds.target_features().get(i, 1);
                    count += 1.0;
                }
            }
            assert!((acc.0 / count - mu.0 - shift.0).abs() < 0.12);
            assert!((acc.1 / count - mu.1 - shift.1).abs() < 0.12);
        }
    }

    #[test]
    fn bounds_match_brute_force_union() {
        let ds = two_moons_rotate(30, 25, 0.2, 45.0, 7).unwrap();
        for j in 0..GENERATED_DIM {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..30 {
                lo = lo.min(ds.source_features().get(i, j));
                hi = hi.max(ds.source_features().get(i, j));
            }
            for i in 0..25 {
                lo = lo.min(ds.target_features().get(i, j));
                hi = hi.max(ds.target_features().get(i, j));
            }
            assert_eq!(ds.feature_bounds()[j], (lo, hi));
        }
    }

    #[test]
    fn csv_roundtrip_is_bitwise_exact() {
        let dir = tempdir().unwrap();
        let ds = two_moons_rotate(23, 17, 0.1, 30.0, 13).unwrap();
        save_domain_csv(&ds, dir.path()).unwrap();
        let loaded = load_domain_csv(
            &dir.path().join("source.csv"),
            &dir.path().join("target.csv"),
            None,
        )
        .unwrap();
        assert_eq!(loaded.source_features(), ds.source_features());
        assert_eq!(loaded.target_features(), ds.target_features());
        assert_eq!(loaded.source_labels(), ds.source_labels());
        assert_eq!(loaded.eval_labels().unwrap(), ds.eval_labels().unwrap());
        assert_eq!(loaded.class_count(), 2);
    }

    #[test]
    fn csv_errors_carry_row_and_column() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,f1,label\n0.5,oops,1\n").unwrap();
        let err = load_csv(&bad).unwrap_err();
        match err {
            DataError::BadValue { row, column, value, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "f1");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error {other:?}"),
        }

        let headerless = dir.path().join("h.csv");
        std::fs::write(&headerless, "x,y\n1,2\n").unwrap();
        assert!(matches!(
            load_csv(&headerless).unwrap_err(),
            DataError::BadHeader { .. }
        ));
    }

    #[test]
    fn source_csv_without_labels_is_rejected() {
        let dir = tempdir().unwrap();
        let src = dir.path().join("s.csv");
        let tgt = dir.path().join("t.csv");
        std::fs::write(&src, "f0,f1\n0.1,0.2\n").unwrap();
        std::fs::write(&tgt, "f0,f1\n0.3,0.4\n").unwrap();
        assert!(matches!(
            load_domain_csv(&src, &tgt, None).unwrap_err(),
            DataError::SourceLabelsMissing { .. }
        ));
    }

    #[test]
    fn dataset_without_eval_labels_says_so() {
        let feats = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let ds = DomainDataset::new(feats.clone(), vec![0, 1], feats, None, 2).unwrap();
        assert!(!ds.has_eval_labels());
        assert!(matches!(ds.eval_labels(), Err(DataError::NoEvalLabels)));
    }

    #[test]
    fn epoch_batches_cover_each_index_once() {
        let batches = epoch_batches(103, 16, 3, 2);
        let mut seen = vec![0usize; 103];
        for b in &batches {
            assert!(b.len() <= 16);
            for &i in b {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batches.last().unwrap().len(), 103 % 16);
    }

    #[test]
    fn paired_batches_cover_long_stream_and_balance_short() {
        let (n_src, n_tgt, bs) = (100usize, 30usize, 16usize);
        let batches = paired_epoch_batches(n_src, n_tgt, bs, 5, 1);
        let mut src_seen = vec![0usize; n_src];
        let mut tgt_seen = vec![0usize; n_tgt];
        for (s, t) in &batches {
            assert_eq!(s.len(), t.len());
            for &i in s {
                src_seen[i] += 1;
            }
            for &i in t {
                tgt_seen[i] += 1;
            }
        }
        assert!(src_seen.iter().all(|&c| c == 1));
        // 100 draws over 30 indices: each appears 3 or 4 times.
        assert!(tgt_seen.iter().all(|&c| c == 3 || c == 4));
        assert_eq!(tgt_seen.iter().sum::<usize>(), n_src);
    }

    #[test]
    fn batch_schedules_are_per_epoch_deterministic() {
        let a = paired_epoch_batches(50, 20, 8, 7, 0);
        let b = paired_epoch_batches(50, 20, 8, 7, 0);
        let c = paired_epoch_batches(50, 20, 8, 7, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_spec_roundtrips_through_serde() {
        let spec = DatasetSpec::GaussianMixtureShift {
            n_source: 10,
            n_target: 12,
            class_count: 3,
            radius: 2.0,
            noise: 0.25,
            shift: (1.0, 0.0),
            cov_scale: 1.5,
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: DatasetSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
