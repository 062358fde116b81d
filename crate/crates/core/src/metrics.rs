//! Population-level evaluation of a market on held-out data.
//!
//! Nothing here buys data or touches budgets: predictors are only asked for
//! labels. All reductions are sequential sums in evaluation-set order, so
//! results are bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::environment::selection_probabilities;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::strategy::shannon_entropy;

/// Similarity between the true label and a prediction. Always non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QualityFunction {
    /// 1 if the prediction equals the label, else 0.
    #[default]
    Correctness,
    /// `table[label][prediction]`.
    Custom { table: Vec<Vec<f64>> },
}

impl QualityFunction {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self {
            QualityFunction::Correctness => Ok(()),
            QualityFunction::Custom { table } => {
                if table.len() != n_classes || table.iter().any(|r| r.len() != n_classes) {
                    return Err(Error::invalid("custom quality table must be K x K"));
                }
                if table.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::invalid("quality values must be finite and non-negative"));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, label: usize, prediction: usize) -> f64 {
        match self {
            QualityFunction::Correctness => (label == prediction) as u8 as f64,
            QualityFunction::Custom { table } => table[label][prediction],
        }
    }
}

/// Per-point view: each predictor's quality, their mean `Z` and the
/// resulting user-choice probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPointSummary {
    pub per_predictor_quality: Vec<f64>,
    pub z: f64,
    pub selection_probs: Vec<f64>,
}

/// Labels of every predictor on every evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    labels: Vec<usize>,
    /// `predictions[point][predictor]`
    predictions: Vec<Vec<usize>>,
    n_classes: usize,
    n_predictors: usize,
}

impl PredictionTable {
    pub fn build<C: Classifier>(models: &[C], eval_set: &Dataset) -> Result<Self> {
        if eval_set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if models.is_empty() {
            return Err(Error::invalid("no predictors to evaluate"));
        }
        let predictions = eval_set
            .examples()
            .iter()
            .map(|ex| models.iter().map(|m| m.predict_label(&ex.features)).collect())
            .collect::<Result<Vec<Vec<usize>>>>()?;
        Ok(Self {
            labels: eval_set.labels().collect(),
            predictions,
            n_classes: eval_set.n_classes(),
            n_predictors: models.len(),
        })
    }

    /// Direct construction, e.g. from recorded predictions.
    pub fn from_parts(labels: Vec<usize>, predictions: Vec<Vec<usize>>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != predictions.len() {
            return Err(Error::invalid("one prediction row per label required"));
        }
        let m = predictions[0].len();
        if m == 0 || predictions.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("prediction rows must share a non-zero length"));
        }
        if labels.iter().chain(predictions.iter().flatten()).any(|&c| c >= n_classes) {
            return Err(Error::invalid("class index out of range"));
        }
        Ok(Self {
            labels,
            predictions,
            n_classes,
            n_predictors: m,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_predictors(&self) -> usize {
        self.n_predictors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn predictions(&self) -> &[Vec<usize>] {
        &self.predictions
    }

    pub fn point_qualities(&self, q: &QualityFunction, i: usize) -> Vec<f64> {
        self.predictions[i]
            .iter()
            .map(|&p| q.eval(self.labels[i], p))
            .collect()
    }

    /// `qualities[point][predictor]`
    pub fn qualities(&self, q: &QualityFunction) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point_qualities(q, i)).collect()
    }

    pub fn point_summary(&self, q: &QualityFunction, alpha: f64, i: usize) -> EvalPointSummary {
        let qs = self.point_qualities(q, i);
        let z = mean(&qs);
        let selection_probs = selection_probabilities(&qs, alpha);
        EvalPointSummary {
            per_predictor_quality: qs,
            z,
            selection_probs,
        }
    }

    /// Per-point average quality `Z`.
    pub fn z_values(&self, q: &QualityFunction) -> Vec<f64> {
        (0..self.len()).map(|i| mean(&self.point_qualities(q, i))).collect()
    }

    pub fn overall_quality(&self, q: &QualityFunction) -> f64 {
        mean(&self.z_values(q))
    }

    /// Mean over points of the exact expected quality of the user's choice,
    /// `sum_j p_j(alpha) q_j`.
    pub fn qoe(&self, q: &QualityFunction, alpha: f64) -> f64 {
        let per_point: Vec<f64> = (0..self.len())
            .map(|i| {
                let qs = self.point_qualities(q, i);
                let p = selection_probabilities(&qs, alpha);
                p.iter().zip(&qs).map(|(a, b)| a * b).sum()
            })
            .collect();
        mean(&per_point)
    }

    /// Monte Carlo QoE: samples the user's choice `draws_per_point` times
    /// per point instead of taking the expectation.
    pub fn qoe_sampled<R: Rng>(&self, q: &QualityFunction, alpha: f64, draws_per_point: usize, rng: &mut R) -> f64 {
        let mut total = 0.0;
        for i in 0..self.len() {
            let qs = self.point_qualities(q, i);
            let p = selection_probabilities(&qs, alpha);
            for _ in 0..draws_per_point {
                total += qs[sample_index(&p, rng)];
            }
        }
        total / (self.len() * draws_per_point.max(1)) as f64
    }

    /// Mean entropy (nats) of the predicted-class distribution across
    /// predictors.
    pub fn diversity(&self) -> f64 {
        let m = self.n_predictors as f64;
        let per_point: Vec<f64> = self
            .predictions
            .iter()
            .map(|row| {
                let mut counts = vec![0usize; self.n_classes];
                row.iter().for_each(|&c| counts[c] += 1);
                let p: Vec<f64> = counts.iter().map(|&c| c as f64 / m).collect();
                shannon_entropy(&p)
            })
            .collect();
        mean(&per_point)
    }

    pub fn class_specific_quality(&self, q: &QualityFunction) -> Result<ClassQuality> {
        let (m, k) = (self.n_predictors, self.n_classes);
        let mut sums = vec![vec![0.0; k]; m];
        let mut counts = vec![0usize; k];
        for (i, &y) in self.labels.iter().enumerate() {
            counts[y] += 1;
            for (j, &p) in self.predictions[i].iter().enumerate() {
                sums[j][y] += q.eval(y, p);
            }
        }
        if let Some(y) = counts.iter().position(|&c| c == 0) {
            return Err(Error::AbsentClass(y));
        }
        let matrix: Vec<Vec<f64>> = sums
            .into_iter()
            .map(|row| row.into_iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
            .collect();
        let avg: Vec<f64> = (0..k)
            .map(|y| matrix.iter().map(|row| row[y]).sum::<f64>() / m as f64)
            .collect();
        let centered = matrix
            .iter()
            .map(|row| row.iter().zip(&avg).map(|(a, b)| a - b).collect())
            .collect();
        Ok(ClassQuality {
            matrix,
            avg,
            centered,
            class_counts: counts,
        })
    }

    pub fn z_histogram(&self, q: &QualityFunction, bins: usize) -> Result<DensityHistogram> {
        DensityHistogram::from_values(&self.z_values(q), bins)
    }

    /// Fraction of points whose average quality is at most `threshold`.
    pub fn z_mass_at_most(&self, q: &QualityFunction, threshold: f64) -> f64 {
        let z = self.z_values(q);
        z.iter().filter(|&&v| v <= threshold).count() as f64 / z.len() as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the final partial sum
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// `Q(j, y)`: predictor `j`'s mean quality on points of class `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    /// `matrix[j][y]`
    pub matrix: Vec<Vec<f64>>,
    /// `avg[y] = mean_j matrix[j][y]`
    pub avg: Vec<f64>,
    /// `matrix[j][y] - avg[y]`
    pub centered: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

/// Histogram over `[0, 1]` with uniform bins, normalized as a density.
/// Bin `b` covers `[b/bins, (b+1)/bins)`; the last bin also holds 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

impl DensityHistogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let width = 1.0 / bins as f64;
        let n = values.len() as f64;
        Ok(Self {
            edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
            densities: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        })
    }

    pub fn bin_width(&self, b: usize) -> f64 {
        self.edges[b + 1] - self.edges[b]
    }

    /// Probability mass of bins whose upper edge is at most `upper`.
    pub fn mass_below(&self, upper: f64) -> f64 {
        (0..self.densities.len())
            .filter(|&b| self.edges[b + 1] <= upper + 1e-12)
            .map(|b| self.densities[b] * self.bin_width(b))
            .sum()
    }
}

pub const DEFAULT_BINS: usize = 50;

/// Everything measured on one market after a competition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_quality: f64,
    pub qoe: f64,
    pub diversity: f64,
    /// `None` when some class is missing from the evaluation set.
    pub class_quality: Option<ClassQuality>,
    pub z_histogram: DensityHistogram,
    /// Fraction of points with `Z <= 0.1`.
    pub z_low_mass: f64,
    pub n_eval: usize,
}

impl MetricReport {
    pub fn from_table(table: &PredictionTable, q: &QualityFunction, alpha: f64, bins: usize) -> Result<Self> {
        Ok(Self {
            overall_quality: table.overall_quality(q),
            qoe: table.qoe(q, alpha),
            diversity: table.diversity(),
            class_quality: table.class_specific_quality(q).ok(),
            z_histogram: table.z_histogram(q, bins)?,
            z_low_mass: table.z_mass_at_most(q, 0.1),
            n_eval: table.len(),
        })
    }
}

pub fn evaluate<C: Classifier>(
    models: &[C],
    eval_set: &Dataset,
    q: &QualityFunction,
    alpha: f64,
    bins: usize,
) -> Result<MetricReport> {
    MetricReport::from_table(&PredictionTable::build(models, eval_set)?, q, alpha, bins)
}

pub fn overall_quality<C: Classifier>(models: &[C], eval_set: &Dataset, q: &QualityFunction) -> Result<f64> {
    Ok(PredictionTable::build(models, eval_set)?.overall_quality(q))
}

pub fn qoe<C: Classifier>(models: &[C], eval_set: &Dataset, q: &QualityFunction, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    Ok(PredictionTable::build(models, eval_set)?.qoe(q, alpha))
}

pub fn diversity<C: Classifier>(models: &[C], eval_set: &Dataset) -> Result<f64> {
    Ok(PredictionTable::build(models, eval_set)?.diversity())
}

pub fn class_specific_quality<C: Classifier>(
    models: &[C],
    eval_set: &Dataset,
    q: &QualityFunction,
) -> Result<ClassQuality> {
    PredictionTable::build(models, eval_set)?.class_specific_quality(q)
}

pub fn z_histogram<C: Classifier>(
    models: &[C],
    eval_set: &Dataset,
    q: &QualityFunction,
    bins: usize,
) -> Result<DensityHistogram> {
    PredictionTable::build(models, eval_set)?.z_histogram(q, bins)
}
