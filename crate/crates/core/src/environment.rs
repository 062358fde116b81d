//! Competition dynamics.
//!
//! Each round a user arrives; every predictor with budget left and a desire
//! to buy becomes a buyer. If there are buyers the user picks one uniformly
//! at random and that buyer pays one unit of budget. Otherwise the user
//! picks predictor `i` with probability proportional to
//! `exp(alpha * q(y, f_i(x)))`. Either way the chosen predictor receives
//! the label and updates its model; nobody else changes.
//!
//! RNG discipline: one market RNG, consuming exactly one uniform draw per
//! round, used for the buyer choice when there are buyers and for the
//! quality-based choice otherwise. User draws and seed data come from
//! separate derived streams (see [`crate::seed`]).

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledExample, UserStream};
use crate::error::{Error, Result};
use crate::metrics::{sample_index, QualityFunction};
use crate::models::{ModelSpec, ModelState, ProbabilityEstimate, TrainConfig};
use crate::seed::{self, streams};
use crate::strategy::{Budget, BuyingStrategy};

/// User-choice probabilities `softmax(alpha * qualities)`, shifted by the
/// maximum quality before exponentiation.
pub fn selection_probabilities(qualities: &[f64], alpha: f64) -> Vec<f64> {
    let max = qualities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = qualities.iter().map(|q| (alpha * (q - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Uniform choice among buyers.
pub fn select_among_buyers<R: Rng>(buyers: &[usize], rng: &mut R) -> Result<usize> {
    if buyers.is_empty() {
        return Err(Error::NoBuyers);
    }
    Ok(buyers[rng.random_range(0..buyers.len())])
}

/// Softmax choice given every predictor's label for this user.
pub fn select_by_quality<R: Rng>(
    predictions: &[usize],
    label: usize,
    q: &QualityFunction,
    alpha: f64,
    rng: &mut R,
) -> usize {
    let qualities: Vec<f64> = predictions.iter().map(|&p| q.eval(label, p)).collect();
    sample_index(&selection_probabilities(&qualities, alpha), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub id: usize,
    pub model: ModelState,
    pub strategy: BuyingStrategy,
    pub budget: Budget,
    pub train_cfg: TrainConfig,
}

impl PredictorState {
    fn shows_purchase_intent(&self, p: &ProbabilityEstimate) -> bool {
        self.budget.shows_purchase_intent(self.strategy.wants_to_buy(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Purchase,
    Quality,
}

/// Audit of one round. Serialized as one JSON object per line:
///
/// `{"t", "buyer_ids", "winner", "mode", "predictions", "user_index",
/// "user_label", "changed"}`; `user_index` is the position of the user in
/// the competition set (null when the user did not come from a stream) and
/// `changed` is only present in audited runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    pub buyer_ids: Vec<usize>,
    pub winner: usize,
    pub mode: SelectionMode,
    pub predictions: Vec<usize>,
    pub user_index: Option<usize>,
    pub user_label: usize,
    /// Predictors whose model fingerprint changed during the round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changed: Option<Vec<usize>>,
}

pub struct MarketState {
    pub predictors: Vec<PredictorState>,
    pub round: u64,
    pub alpha: f64,
    pub quality: QualityFunction,
    rng: ChaCha8Rng,
    audit: bool,
}

impl MarketState {
    pub fn new(
        predictors: Vec<PredictorState>,
        alpha: f64,
        quality: QualityFunction,
        rng_seed: u64,
    ) -> Result<Self> {
        if predictors.len() < 2 {
            return Err(Error::invalid("a market needs at least two predictors"));
        }
        if !(alpha >= 0.0) || alpha.is_infinite() {
            return Err(Error::invalid(format!("alpha = {alpha} must be finite and >= 0")));
        }
        for (i, p) in predictors.iter().enumerate() {
            if p.id != i {
                return Err(Error::invalid("predictor ids must be 0..M in order"));
            }
        }
        Ok(Self {
            predictors,
            round: 0,
            alpha,
            quality,
            rng: seed::rng(rng_seed),
            audit: false,
        })
    }

    /// Record which models changed in every round (costs one fingerprint of
    /// every model per round).
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<ProbabilityEstimate>> {
        self.predictors.iter().map(|p| p.model.predict_proba(x)).collect()
    }

    /// Ids (ascending) of predictors showing purchase intent for `x`.
    pub fn collect_buyers(&self, x: &[f64]) -> Result<Vec<usize>> {
        let probs = self.probabilities(x)?;
        Ok(buyers_from(&self.predictors, &probs))
    }

    pub fn run_round(&mut self, user: &LabeledExample) -> Result<RoundRecord> {
        let probs = self.probabilities(&user.features)?;
        let predictions: Vec<usize> = probs.iter().map(ProbabilityEstimate::argmax).collect();
        let buyer_ids = buyers_from(&self.predictors, &probs);

        let (winner, mode) = if buyer_ids.is_empty() {
            let w = select_by_quality(&predictions, user.label, &self.quality, self.alpha, &mut self.rng);
            (w, SelectionMode::Quality)
        } else {
            let w = select_among_buyers(&buyer_ids, &mut self.rng)?;
            self.predictors[w].budget.charge()?;
            (w, SelectionMode::Purchase)
        };

        let before: Option<Vec<u64>> = self
            .audit
            .then(|| self.predictors.iter().map(|p| p.model.fingerprint()).collect());

        let p = &mut self.predictors[winner];
        p.model.absorb_datum(user.clone(), &p.train_cfg)?;

        let changed = before.map(|b| {
            self.predictors
                .iter()
                .zip(b)
                .filter(|(p, fp)| p.model.fingerprint() != *fp)
                .map(|(p, _)| p.id)
                .collect()
        });

        let record = RoundRecord {
            t: self.round,
            buyer_ids,
            winner,
            mode,
            predictions,
            user_index: None,
            user_label: user.label,
            changed,
        };
        self.round += 1;
        Ok(record)
    }
}

fn buyers_from(predictors: &[PredictorState], probs: &[ProbabilityEstimate]) -> Vec<usize> {
    predictors
        .iter()
        .zip(probs)
        .filter(|(p, pe)| p.shows_purchase_intent(pe))
        .map(|(p, _)| p.id)
        .collect()
}

/// Model architecture without data-dependent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelChoice {
    pub kind: crate::models::ModelKind,
    #[serde(default)]
    pub hidden_nodes: usize,
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self {
            kind: crate::models::ModelKind::Logistic,
            hidden_nodes: 0,
        }
    }
}

impl ModelChoice {
    pub fn spec(&self, input_dim: usize, n_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            hidden_nodes: self.hidden_nodes,
            input_dim,
            n_classes,
        }
    }
}

/// One predictor's setup before seed training.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub n_seed: usize,
    pub budget: u64,
    pub model: ModelChoice,
    pub strategy: BuyingStrategy,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketConfig {
    pub predictors: Vec<PredictorConfig>,
    pub alpha: f64,
    pub quality: QualityFunction,
    /// Run seed: seed data, model initialization and the market RNG derive
    /// from it.
    pub seed: u64,
    pub audit: bool,
}

/// Seed-trains every predictor on its own i.i.d. sample of the stream's
/// source. Predictor `i` draws its `n_seed` examples with replacement from a
/// stream derived from `(seed, i)`, and its `init_seed` is likewise derived,
/// so predictors are independent of each other and of `M`.
pub fn seed_market(cfg: &MarketConfig, stream: &UserStream<'_>) -> Result<MarketState> {
    let source = stream.source();
    let predictors = cfg
        .predictors
        .iter()
        .enumerate()
        .map(|(i, pc)| {
            cfg.quality.validate(source.n_classes())?;
            pc.strategy.validate()?;
            let mut rng = seed::rng(seed::derive_path(cfg.seed, &[streams::SEED_DATA, i as u64]));
            let seed_data = (0..pc.n_seed)
                .map(|_| source.get(rng.random_range(0..source.len())).clone())
                .collect();
            let train = TrainConfig {
                init_seed: seed::derive_path(cfg.seed, &[streams::MODEL_INIT, i as u64]),
                ..pc.train.clone()
            };
            let spec = pc.model.spec(source.dim(), source.n_classes());
            Ok(PredictorState {
                id: i,
                model: ModelState::init_and_seed_train(spec, seed_data, &train)?,
                strategy: pc.strategy,
                budget: Budget::new(pc.budget),
                train_cfg: train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut market = MarketState::new(
        predictors,
        cfg.alpha,
        cfg.quality.clone(),
        seed::derive(cfg.seed, streams::MARKET),
    )?;
    market.set_audit(cfg.audit);
    Ok(market)
}

/// Seed-trains the market and plays `rounds` rounds against `stream`.
pub fn run_competition(
    cfg: &MarketConfig,
    stream: &UserStream<'_>,
    rounds: u64,
) -> Result<(MarketState, Vec<RoundRecord>)> {
    let mut market = seed_market(cfg, stream)?;
    let mut history = Vec::with_capacity(rounds as usize);
    for t in 0..rounds {
        let idx = stream.index_at(t);
        let mut record = market.run_round(stream.source().get(idx))?;
        record.user_index = Some(idx);
        history.push(record);
    }
    Ok((market, history))
}

/// Writes `records` as newline-delimited JSON.
pub fn write_round_log<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<round log>", e))?;
    }
    Ok(())
}

pub fn read_round_log(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::models::ModelSpec;

    /// A predictor with zero weights whose bias makes it predict `class`
    /// with probability `conf`.
    fn biased(id: usize, class: usize, conf: f64, budget: u64, c_ent: f64) -> PredictorState {
        let mut model = ModelState::zeros(ModelSpec::logistic(1, 2)).unwrap();
        let logit = (conf / (1.0 - conf)).ln();
        model.params[2 + class] = logit;
        PredictorState {
            id,
            model,
            strategy: BuyingStrategy::entropy(c_ent).unwrap(),
            budget: Budget::new(budget),
            train_cfg: TrainConfig::default(),
        }
    }

    #[test]
    fn selection_probability_values() {
        let p = selection_probabilities(&[0.3, 1.0, 0.0, 0.7], 0.0);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let p = selection_probabilities(&[1.0, 0.0], 1.0);
        let e = 1f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.731_059).abs() < 1e-6);
        assert!((p[1] - 0.268_941).abs() < 1e-6);

        let p = selection_probabilities(&[0.4; 5], 7.0);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let huge = selection_probabilities(&[1.0, 0.0, 1.0], 1e6);
        assert!((huge.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn buyer_choice() {
        let mut rng = seed::rng(0);
        assert_eq!(select_among_buyers(&[3], &mut rng).unwrap(), 3);
        assert!(matches!(select_among_buyers(&[], &mut rng), Err(Error::NoBuyers)));
        let ones = (0..100_000)
            .filter(|_| select_among_buyers(&[1, 2], &mut rng).unwrap() == 1)
            .count();
        assert!((ones as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn quality_choice_limits() {
        let q = QualityFunction::Correctness;
        let mut rng = seed::rng(1);
        let hits = (0..10_000)
            .filter(|_| select_by_quality(&[0, 1, 0], 1, &q, 1e3, &mut rng) == 1)
            .count();
        assert!(hits as f64 / 1e4 > 0.999);

        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[select_by_quality(&[0, 1, 1, 0], 1, &q, 0.0, &mut rng)] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 1e5 - 0.25).abs() < 0.01));

        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[select_by_quality(&[1, 1, 1], 1, &q, 5.0, &mut rng)] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 1e5 - 1.0 / 3.0).abs() < 0.01));
    }

    #[test]
    fn buyer_collection() {
        let q = QualityFunction::Correctness;
        let broke = vec![biased(0, 0, 0.6, 0, 0.0), biased(1, 1, 0.6, 0, 0.0)];
        let m = MarketState::new(broke, 1.0, q.clone(), 0).unwrap();
        assert!(m.collect_buyers(&[0.0]).unwrap().is_empty());

        let eager = vec![biased(0, 0, 0.99, 2, 0.0), biased(1, 1, 0.99, 1, 0.0)];
        let m = MarketState::new(eager, 1.0, q.clone(), 0).unwrap();
        assert_eq!(m.collect_buyers(&[0.0]).unwrap(), vec![0, 1]);

        // c_ent = 0.5: threshold 0.3466 nats. entropy(0.6) = 0.673 (buys),
        // entropy(0.95) = 0.199 (does not); predictor 2 is over threshold
        // but broke.
        let mixed = vec![
            biased(0, 0, 0.6, 5, 0.5),
            biased(1, 1, 0.95, 5, 0.5),
            biased(2, 0, 0.6, 0, 0.5),
        ];
        let m = MarketState::new(mixed, 1.0, q, 0).unwrap();
        assert_eq!(m.collect_buyers(&[0.0]).unwrap(), vec![0]);
    }

    #[test]
    fn single_eligible_buyer_wins_and_pays() {
        let preds = vec![biased(0, 0, 0.6, 1, 0.0), biased(1, 1, 0.6, 0, 0.0)];
        let mut m = MarketState::new(preds, 4.0, QualityFunction::Correctness, 3).unwrap();
        m.set_audit(true);
        let untouched = m.predictors[1].model.clone();
        let rec = m.run_round(&LabeledExample::new(vec![0.5], 1)).unwrap();
        assert_eq!(rec.winner, 0);
        assert_eq!(rec.mode, SelectionMode::Purchase);
        assert_eq!(rec.buyer_ids, vec![0]);
        assert_eq!(m.predictors[0].budget.remaining(), 0);
        assert_eq!(m.predictors[1].model, untouched);
        assert_eq!(rec.changed, Some(vec![0]));
        assert_eq!(m.predictors[0].model.owned_data.len(), 1);

        // the next round has no buyers
        let rec = m.run_round(&LabeledExample::new(vec![0.5], 1)).unwrap();
        assert_eq!(rec.mode, SelectionMode::Quality);
        assert!(rec.buyer_ids.is_empty());
    }

    #[test]
    fn no_buyers_and_zero_alpha_is_a_fair_coin() {
        let mut wins = 0;
        let n = 20_000;
        let preds = vec![biased(0, 0, 0.9, 0, 0.0), biased(1, 1, 0.9, 0, 0.0)];
        let mut m = MarketState::new(preds, 0.0, QualityFunction::Correctness, 11).unwrap();
        for _ in 0..n {
            // retrain_period is 50; keep models small by resetting data
            let rec = m.run_round(&LabeledExample::new(vec![0.0], 0)).unwrap();
            wins += (rec.winner == 0) as usize;
            for p in &mut m.predictors {
                p.model.owned_data.clear();
            }
        }
        assert!((wins as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn market_validation() {
        let q = QualityFunction::Correctness;
        assert!(MarketState::new(vec![biased(0, 0, 0.6, 0, 0.0)], 1.0, q.clone(), 0).is_err());
        let two = vec![biased(0, 0, 0.6, 0, 0.0), biased(1, 0, 0.6, 0, 0.0)];
        assert!(MarketState::new(two.clone(), -1.0, q.clone(), 0).is_err());
        let swapped = vec![two[1].clone(), two[0].clone()];
        assert!(MarketState::new(swapped, 1.0, q, 0).is_err());
    }

    fn small_config(budget: u64, seed: u64) -> MarketConfig {
        let pc = PredictorConfig {
            n_seed: 10,
            budget,
            model: ModelChoice::default(),
            strategy: BuyingStrategy::entropy(0.3).unwrap(),
            train: TrainConfig {
                epochs: 2,
                retrain_period: 5,
                ..TrainConfig::default()
            },
        };
        MarketConfig {
            predictors: vec![pc; 3],
            alpha: 2.0,
            quality: QualityFunction::Correctness,
            seed,
            audit: true,
        }
    }

    fn source() -> Dataset {
        let spec = crate::dataset::MixtureSpec {
            means: vec![vec![-0.5, 0.0], vec![0.5, 0.0]],
            cov_scale: 1.0,
            n: 200,
        };
        crate::dataset::synth_gaussian_mixture(&spec, 4).unwrap()
    }

    #[test]
    fn empty_run_returns_seed_trained_market() {
        let data = source();
        let stream = UserStream::new(&data, 1).unwrap();
        let cfg = small_config(3, 9);
        let (m, hist) = run_competition(&cfg, &stream, 0).unwrap();
        assert!(hist.is_empty());
        let fresh = seed_market(&cfg, &stream).unwrap();
        for (a, b) in m.predictors.iter().zip(&fresh.predictors) {
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn competition_is_replayable_and_conserves_budget() {
        let data = source();
        let stream = UserStream::new(&data, 1).unwrap();
        let cfg = small_config(4, 9);
        let (m1, h1) = run_competition(&cfg, &stream, 60).unwrap();
        let (_, h2) = run_competition(&cfg, &stream, 60).unwrap();
        assert_eq!(h1, h2);

        for p in &m1.predictors {
            let bought = h1
                .iter()
                .filter(|r| r.mode == SelectionMode::Purchase && r.winner == p.id)
                .count() as u64;
            assert!(bought <= 4);
            assert_eq!(bought, p.budget.spent());
        }
        for r in &h1 {
            assert_eq!(r.changed.as_deref(), Some(&[r.winner][..]));
            assert_eq!(r.mode == SelectionMode::Purchase, !r.buyer_ids.is_empty());
            if r.mode == SelectionMode::Purchase {
                assert!(r.buyer_ids.contains(&r.winner));
            }
        }

        let mut buf = Vec::new();
        write_round_log(&h1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 60);
        assert_eq!(read_round_log(&text).unwrap(), h1);
    }

    #[test]
    fn zero_budget_market_never_purchases() {
        let data = source();
        let stream = UserStream::new(&data, 2).unwrap();
        let (_, hist) = run_competition(&small_config(0, 5), &stream, 40).unwrap();
        assert!(hist.iter().all(|r| r.mode == SelectionMode::Quality));
    }
}
