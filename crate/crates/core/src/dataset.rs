//! The user distribution: ingestion, preprocessing, noise, splitting and
//! i.i.d. streaming.
//!
//! Every randomized operation here is a pure function of its inputs and an
//! explicit seed.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One user: a query and its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    n_classes: usize,
    dim: usize,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    /// Builds a dataset, checking that every example has dimension `dim`,
    /// finite features and a label below `n_classes`.
    pub fn new(
        name: impl Into<String>,
        n_classes: usize,
        dim: usize,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::SingleClass(n_classes));
        }
        for ex in &examples {
            if ex.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: ex.features.len(),
                });
            }
            if ex.label >= n_classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    ex.label, n_classes
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite feature value"));
            }
        }
        Ok(Self {
            name: name.into(),
            n_classes,
            dim,
            examples,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Same metadata, different examples. Used by the transforms below, whose
    /// outputs keep shape by construction.
    fn with_examples(&self, examples: Vec<LabeledExample>) -> Self {
        Self {
            name: self.name.clone(),
            n_classes: self.n_classes,
            dim: self.dim,
            examples,
        }
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        self.with_examples(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Reads a comma-separated file. Labels are re-indexed densely to
/// `0..K` in order of first appearance; every other column must parse as a
/// real number.
pub fn load_csv(path: &Path, label_column: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;

    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let label_idx = match (label_column, &header) {
        (LabelColumn::Index(i), _) => Some(*i),
        (LabelColumn::Name(name), Some(h)) => {
            Some(h.iter().position(|c| c == name).ok_or_else(|| {
                Error::UnknownLabelColumn(name.clone())
            })?)
        }
        (LabelColumn::Name(name), None) => return Err(Error::UnknownLabelColumn(name.clone())),
    };

    let mut arity = header.as_ref().map(Vec::len);
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // Blank lines come through as a single empty field.
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *arity.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                row,
                expected,
                found: record.len(),
            });
        }
        let label_idx = label_idx.unwrap();
        if label_idx >= expected {
            return Err(Error::UnknownLabelColumn(label_idx.to_string()));
        }

        let mut features = Vec::with_capacity(expected - 1);
        for (column, cell) in record.iter().enumerate() {
            if column == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericFeature {
                row,
                column,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericFeature {
                    row,
                    column,
                    value: cell.to_string(),
                });
            }
            features.push(v);
        }
        let next = label_ids.len();
        let label = *label_ids.entry(record[label_idx].to_string()).or_insert(next);
        examples.push(LabeledExample { features, label });
    }

    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if label_ids.len() < 2 {
        return Err(Error::SingleClass(label_ids.len()));
    }
    let dim = examples[0].features.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, label_ids.len(), dim, examples)
}

/// Centres every feature column to mean 0 and scales it to (population)
/// standard deviation 1. Zero-variance columns are only centred.
pub fn standardize(d: &Dataset) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = d.len() as f64;
    let mut mean = vec![0.0; d.dim];
    for ex in &d.examples {
        for (m, v) in mean.iter_mut().zip(&ex.features) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = vec![0.0; d.dim];
    for ex in &d.examples {
        for ((s, v), m) in var.iter_mut().zip(&ex.features).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let sd: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();

    let examples = d
        .examples
        .iter()
        .map(|ex| {
            let features = ex
                .features
                .iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
                .collect();
            LabeledExample::new(features, ex.label)
        })
        .collect();
    Ok(d.with_examples(examples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub flip_probability: f64,
    pub rng_seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// With probability `flip_probability` per example, replaces the label by a
/// uniform draw over all K classes (which may be the original label).
pub fn inject_label_noise(d: &Dataset, cfg: &NoiseConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.rng_seed);
    let k = d.n_classes;
    let examples = d
        .examples
        .iter()
        .map(|ex| {
            // Two draws per example regardless of outcome, so example i's
            // fate does not depend on earlier ones.
            let u: f64 = rng.random();
            let replacement = rng.random_range(0..k);
            let label = if u < cfg.flip_probability {
                replacement
            } else {
                ex.label
            };
            LabeledExample::new(ex.features.clone(), label)
        })
        .collect();
    Ok(d.with_examples(examples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub competition: Dataset,
    pub evaluation: Dataset,
}

/// Index sets of a split: `(competition, evaluation)`, each ascending.
pub fn split_indices(n: usize, eval_count: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if eval_count == 0 || eval_count >= n {
        return Err(Error::invalid(format!(
            "eval_count {eval_count} must lie strictly between 0 and {n}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut in_eval = vec![false; n];
    for i in index::sample(&mut rng, n, eval_count) {
        in_eval[i] = true;
    }
    let (eval, comp): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_eval[i]);
    Ok((comp, eval))
}

/// Holds out `eval_count` uniformly sampled examples for evaluation.
pub fn split(d: &Dataset, eval_count: usize, seed: u64) -> Result<SplitPair> {
    let (comp, eval) = split_indices(d.len(), eval_count, seed)?;
    Ok(SplitPair {
        competition: d.select(&comp),
        evaluation: d.select(&eval),
    })
}

/// Parameters for a synthetic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    /// One mean vector per class; its length fixes the dimension.
    pub means: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic noise around each mean.
    #[serde(default = "unit")]
    pub cov_scale: f64,
    pub n: usize,
}

fn unit() -> f64 {
    1.0
}

/// Draws `n` examples with (exactly) balanced classes: example `i` has label
/// `i mod K` before a final shuffle, and features `mean[label] + cov_scale * N(0, I)`.
pub fn synth_gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    let k = spec.means.len();
    if k < 2 {
        return Err(Error::SingleClass(k));
    }
    let dim = spec.means[0].len();
    if dim == 0 || spec.means.iter().any(|m| m.len() != dim) {
        return Err(Error::invalid("class means must be non-empty and share one dimension"));
    }
    if spec.n < k {
        return Err(Error::invalid(format!("n = {} is smaller than K = {k}", spec.n)));
    }
    if !(spec.cov_scale > 0.0) {
        return Err(Error::invalid("cov_scale must be positive"));
    }

    let mut rng = seed::rng(seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % k).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let examples = labels
        .into_iter()
        .map(|label| {
            let features = spec.means[label]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.cov_scale * z
                })
                .collect();
            LabeledExample::new(features, label)
        })
        .collect();
    Dataset::new(format!("gmm-k{k}-d{dim}"), k, dim, examples)
}

/// i.i.d. user stream over a (competition) dataset: uniform sampling with
/// replacement, where draw `t` depends only on `(seed, t)`.
#[derive(Debug, Clone, Copy)]
pub struct UserStream<'a> {
    source: &'a Dataset,
    seed: u64,
}

impl<'a> UserStream<'a> {
    pub fn new(source: &'a Dataset, seed: u64) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { source, seed })
    }

    pub fn source(&self) -> &'a Dataset {
        self.source
    }

    pub fn index_at(&self, t: u64) -> usize {
        let mut rng = seed::rng(seed::derive(self.seed, t));
        rng.random_range(0..self.source.len())
    }

    pub fn draw(&self, t: u64) -> &'a LabeledExample {
        self.source.get(self.index_at(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn column(d: &Dataset, j: usize) -> Vec<f64> {
        d.examples().iter().map(|e| e.features[j]).collect()
    }

    fn toy(labels: &[usize], k: usize) -> Dataset {
        let ex = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| LabeledExample::new(vec![i as f64], l))
            .collect();
        Dataset::new("toy", k, 1, ex).unwrap()
    }

    #[test]
    fn load_reindexes_labels_in_first_appearance_order() {
        let f = write_tmp("x1,x2,y\n1.0,2.0,a\n3.0,4.0,b\n5.0,6.0,a\n");
        let d = load_csv(f.path(), &LabelColumn::Name("y".into()), true).unwrap();
        assert_eq!(d.n_classes(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels().collect::<Vec<_>>(), vec![0, 1, 0]);
        assert_eq!(d.get(1).features, vec![3.0, 4.0]);
    }

    #[test]
    fn load_by_index_without_header() {
        let f = write_tmp("b,1,2\na,3,4\n");
        let d = load_csv(f.path(), &LabelColumn::Index(0), false).unwrap();
        assert_eq!(d.labels().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(d.get(0).features, vec![1.0, 2.0]);
    }

    #[test]
    fn load_rejects_ragged_rows() {
        let f = write_tmp("1.0,2.0,a\n3.0,b\n5.0,6.0,a\n");
        let err = load_csv(f.path(), &LabelColumn::Index(2), false).unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 1, .. }), "{err}");
    }

    #[test]
    fn load_rejects_single_class() {
        let f = write_tmp("1,a\n2,a\n3,a\n");
        let err = load_csv(f.path(), &LabelColumn::Index(1), false).unwrap_err();
        assert!(matches!(err, Error::SingleClass(1)));
    }

    #[test]
    fn load_rejects_non_numeric_and_missing_file() {
        let f = write_tmp("1,a\nfoo,b\n");
        let err = load_csv(f.path(), &LabelColumn::Index(1), false).unwrap_err();
        assert!(matches!(err, Error::NonNumericFeature { row: 1, column: 0, .. }));

        let err = load_csv(Path::new("/nonexistent/x.csv"), &LabelColumn::Index(0), false)
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn standardize_two_points_and_constant_column() {
        let ex = vec![
            LabeledExample::new(vec![1.0, 5.0], 0),
            LabeledExample::new(vec![3.0, 5.0], 1),
        ];
        let d = standardize(&Dataset::new("t", 2, 2, ex).unwrap()).unwrap();
        assert_eq!(column(&d, 0), vec![-1.0, 1.0]);
        assert_eq!(column(&d, 1), vec![0.0, 0.0]);
        assert_eq!(d.labels().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn standardize_moments_and_idempotence() {
        let ex = (0..4)
            .map(|i| LabeledExample::new(vec![i as f64], i % 2))
            .collect();
        let d = standardize(&Dataset::new("t", 2, 1, ex).unwrap()).unwrap();
        let col = column(&d, 0);
        let mean = col.iter().sum::<f64>() / 4.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);

        let again = standardize(&d).unwrap();
        for (a, b) in column(&again, 0).iter().zip(&col) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            standardize(&Dataset::new("e", 2, 1, vec![]).unwrap()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_noise_is_identity_and_seeded_noise_is_deterministic() {
        let d = toy(&[0, 1, 1, 0, 1], 2);
        let same = inject_label_noise(&d, &NoiseConfig { flip_probability: 0.0, rng_seed: 9 }).unwrap();
        assert_eq!(same, d);

        let cfg = NoiseConfig { flip_probability: 0.3, rng_seed: 9 };
        assert_eq!(
            inject_label_noise(&d, &cfg).unwrap(),
            inject_label_noise(&d, &cfg).unwrap()
        );
        assert!(inject_label_noise(&d, &NoiseConfig { flip_probability: 1.5, rng_seed: 0 }).is_err());
    }

    #[test]
    fn full_noise_is_uniform_over_classes() {
        let d = toy(&vec![0; 100_000], 2);
        let noisy = inject_label_noise(&d, &NoiseConfig { flip_probability: 1.0, rng_seed: 3 }).unwrap();
        let ones = noisy.labels().filter(|&l| l == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() < 0.01, "{ones}");
        assert_eq!(noisy.len(), d.len());
        assert_eq!(noisy.n_classes(), 2);
    }

    #[test]
    fn split_counts_disjoint_and_deterministic() {
        let d = toy(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2);
        let s = split(&d, 4, 11).unwrap();
        assert_eq!(s.competition.len(), 6);
        assert_eq!(s.evaluation.len(), 4);
        let mut ids: Vec<i64> = s
            .competition
            .examples()
            .iter()
            .chain(s.evaluation.examples())
            .map(|e| e.features[0] as i64)
            .collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split(&d, 4, 11).unwrap());

        assert!(split(&d, 10, 0).is_err());
        assert!(split(&d, 0, 0).is_err());
    }

    #[test]
    fn mixture_shapes_and_counts() {
        let spec = MixtureSpec {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            cov_scale: 1.0,
            n: 10,
        };
        let d = synth_gaussian_mixture(&spec, 1).unwrap();
        assert_eq!(d.len(), 10);
        let ones = d.labels().filter(|&l| l == 1).count();
        assert_eq!(ones + d.labels().filter(|&l| l == 0).count(), 10);
        assert_eq!(ones, 5);

        let bad = MixtureSpec {
            means: vec![vec![0.0, 0.0], vec![1.0]],
            ..spec.clone()
        };
        assert!(synth_gaussian_mixture(&bad, 1).is_err());
        let bad = MixtureSpec { cov_scale: 0.0, ..spec };
        assert!(synth_gaussian_mixture(&bad, 1).is_err());
    }

    #[test]
    fn stream_singleton_determinism_and_uniformity() {
        let one = toy(&[1], 2);
        let s = UserStream::new(&one, 5).unwrap();
        assert!((0..50).all(|t| s.draw(t) == one.get(0)));

        let four = toy(&[0, 1, 0, 1], 2);
        let s = UserStream::new(&four, 77).unwrap();
        assert_eq!(s.index_at(123), s.index_at(123));
        let mut counts = [0usize; 4];
        for t in 0..100_000 {
            counts[s.index_at(t)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
        }

        let empty = Dataset::new("e", 2, 1, vec![]).unwrap();
        assert!(UserStream::new(&empty, 0).is_err());
    }
}
