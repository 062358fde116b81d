//! Closed-form QoE under the correctness quality, its bounds, and a
//! sufficient condition for "higher average quality, lower QoE".
//!
//! With 0/1 quality and `M` predictors, the expected quality of the user's
//! softmax choice at a point depends only on `Z = N_correct / M`:
//!
//! ```text
//! k(z, alpha) = z e^alpha / (z e^alpha + 1 - z)
//! ```
//!
//! so the QoE of a market is `E[k(Z, alpha)]` and everything in this module
//! works on the distribution of `Z`. Distributions are kept as integer
//! counts on the lattice `{0, 1/M, ..., 1}`; moments are computed from
//! integer sums and rounded to `f64` once.

use rand::Rng;
use serde::{Serialize, Serializer};

use crate::environment::selection_probabilities;
use crate::error::{Error, Result};
use crate::seed;

/// `z e^alpha / (z e^alpha + 1 - z)`, evaluated as
/// `z / (z + (1 - z) e^-alpha)` so large `alpha` does not overflow.
pub fn k_closed_form(z: f64, alpha: f64) -> f64 {
    if alpha == 0.0 || z <= 0.0 || z >= 1.0 {
        return z.clamp(0.0, 1.0);
    }
    z / (z + (1.0 - z) * (-alpha).exp())
}

/// Expected quality of the softmax choice for one 0/1 correctness vector,
/// summed directly over predictors. Independent of [`k_closed_form`].
pub fn softmax_expectation(qualities: &[f64], alpha: f64) -> f64 {
    selection_probabilities(qualities, alpha)
        .iter()
        .zip(qualities)
        .map(|(p, q)| p * q)
        .sum()
}

/// Distribution of the average quality `Z` over the lattice
/// `{0, 1/M, ..., 1}` for a market of `M` predictors under temperature
/// `alpha`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DynamicsSummary {
    pub m: usize,
    #[serde(skip)]
    alpha_bits: u64,
    /// `counts[j]` = number of points with `Z = j / M`.
    pub counts: Vec<u64>,
}

impl DynamicsSummary {
    pub fn from_counts(m: usize, alpha: f64, counts: Vec<u64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("M must be at least 2"));
        }
        if !(alpha >= 0.0) || alpha.is_infinite() {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        if counts.len() != m + 1 {
            return Err(Error::invalid(format!("expected {} lattice counts, got {}", m + 1, counts.len())));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid("distribution has no mass"));
        }
        Ok(Self {
            m,
            alpha_bits: alpha.to_bits(),
            counts,
        })
    }

    /// Snaps each sample to the nearest multiple of `1/M`; samples further
    /// than 1e-9 from the lattice are rejected.
    pub fn from_z_samples(m: usize, alpha: f64, z: &[f64]) -> Result<Self> {
        let mut counts = vec![0u64; m + 1];
        for &v in z {
            let j = (v * m as f64).round();
            if !(0.0..=m as f64).contains(&j) || (v - j / m as f64).abs() > 1e-9 {
                return Err(Error::invalid(format!("Z = {v} is not on the 1/{m} lattice")));
            }
            counts[j as usize] += 1;
        }
        Self::from_counts(m, alpha, counts)
    }

    pub fn alpha(&self) -> f64 {
        f64::from_bits(self.alpha_bits)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(z, probability mass)` pairs with non-zero mass.
    pub fn masses(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.total() as f64;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(j, &c)| (j as f64 / self.m as f64, c as f64 / n))
    }

    /// Every sample, expanded from the counts.
    pub fn z_samples(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| std::iter::repeat_n(j as f64 / self.m as f64, c as usize))
            .collect()
    }

    fn sums(&self) -> (u128, u128, u128) {
        let n: u128 = self.counts.iter().map(|&c| c as u128).sum();
        let s1: u128 = self.counts.iter().enumerate().map(|(j, &c)| c as u128 * j as u128).sum();
        let s2: u128 = self
            .counts
            .iter()
            .enumerate()
            .map(|(j, &c)| c as u128 * (j * j) as u128)
            .sum();
        (n, s1, s2)
    }

    pub fn mu(&self) -> f64 {
        let (n, s1, _) = self.sums();
        s1 as f64 / (n as f64 * self.m as f64)
    }

    /// Population variance `E[Z^2] - E[Z]^2`, from exact integer sums.
    pub fn var(&self) -> f64 {
        let (n, s1, s2) = self.sums();
        let num = n * s2 - s1 * s1;
        let m = self.m as f64;
        num as f64 / ((n as f64) * (n as f64) * m * m)
    }
}

/// `E[k(Z, alpha)]`.
pub fn qoe_from_lemma(s: &DynamicsSummary) -> f64 {
    let alpha = s.alpha();
    s.masses().map(|(z, w)| w * k_closed_form(z, alpha)).sum()
}

/// QoE of a lattice distribution computed by building, for each lattice
/// point, a correctness vector with `j` ones and summing the softmax
/// expectation directly.
pub fn qoe_brute_force(s: &DynamicsSummary) -> f64 {
    let alpha = s.alpha();
    let n = s.total() as f64;
    s.counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| {
            let q: Vec<f64> = (0..s.m).map(|i| (i < j) as u8 as f64).collect();
            c as f64 / n * softmax_expectation(&q, alpha)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem3Bounds {
    /// Mean over points of the average quality across predictors.
    pub lower: f64,
    /// Mean over points of the softmax-choice expected quality.
    pub value: f64,
    /// Mean over points of the best predictor's quality.
    pub upper: f64,
}

/// Bounds on QoE for an arbitrary non-negative quality.
/// `qualities[point][predictor]`.
pub fn theorem3_bounds(qualities: &[Vec<f64>], alpha: f64) -> Result<Theorem3Bounds> {
    if qualities.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if qualities.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("every point needs at least one predictor"));
    }
    if qualities.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("qualities must be finite and non-negative"));
    }
    let n = qualities.len() as f64;
    let (mut lower, mut value, mut upper) = (0.0, 0.0, 0.0);
    for q in qualities {
        lower += q.iter().sum::<f64>() / q.len() as f64;
        value += softmax_expectation(q, alpha);
        upper += q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(Theorem3Bounds {
        lower: lower / n,
        value: value / n,
        upper: upper / n,
    })
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremOneConstants {
    pub c_low: f64,
    pub c_upp: f64,
    /// `c_low / c_upp`
    pub c1: f64,
    pub c2: f64,
    /// Minimum temperature; `+inf` when no temperature qualifies.
    #[serde(serialize_with = "ser_extended")]
    pub c_alpha: f64,
}

pub fn theorem1_constants(m: usize, alpha: f64, mu1: f64, mu2: f64) -> Result<TheoremOneConstants> {
    if m < 2 {
        return Err(Error::invalid("M must be at least 2"));
    }
    if !(alpha > 0.0) || alpha.is_infinite() {
        return Err(Error::invalid("alpha must be finite and positive"));
    }
    for mu in [mu1, mu2] {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::invalid(format!("mean {mu} must lie strictly inside (0, 1)")));
        }
    }
    let mf = m as f64;
    let ea = alpha.exp();
    let em1 = alpha.exp_m1();
    let c_low = mf * em1 / ((mf - 1.0) * ea + 1.0);
    let c_upp = mf * em1 / (ea + mf - 1.0);
    let c1 = (ea + mf - 1.0) / ((mf - 1.0) * ea + 1.0);
    let (v1, v2) = (mu1 * (1.0 - mu1), mu2 * (1.0 - mu2));
    let c2 = -c1 * v1 + (mu2 - mu1) / c_upp + v2;

    let num = (mf - 1.0) * v1 - v2;
    let den = (mf - 1.0) * v2 - v1;
    let c_alpha = if den <= 0.0 {
        f64::INFINITY
    } else if num / den <= 1.0 {
        0.0
    } else {
        (num / den).ln()
    };
    Ok(TheoremOneConstants {
        c_low,
        c_upp,
        c1,
        c2,
        c_alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremOneVerdict {
    pub constants: TheoremOneConstants,
    /// `alpha >= c_alpha` and `Var[Z2] >= c1 Var[Z1] + c2`. When true,
    /// `QoE(Z2) <= QoE(Z1)`.
    pub verdict: bool,
    /// The shorter form `alpha >= c_alpha` and `Var[Z2] >= c1 Var[Z1]`.
    pub statement_form: bool,
    /// `Var[Z2] >= c1 Var[Z1] + c2` alone, ignoring `c_alpha`.
    pub variance_condition: bool,
    pub mu1: f64,
    pub mu2: f64,
    pub var1: f64,
    pub var2: f64,
    pub qoe1: f64,
    pub qoe2: f64,
}

/// Checks the sufficient condition for `QoE(s2) <= QoE(s1)` given
/// `E[Z2] >= E[Z1]`.
pub fn theorem1_condition(s1: &DynamicsSummary, s2: &DynamicsSummary) -> Result<TheoremOneVerdict> {
    if s1.m != s2.m || s1.alpha_bits != s2.alpha_bits {
        return Err(Error::invalid("both dynamics must share M and alpha"));
    }
    let (mu1, mu2) = (s1.mu(), s2.mu());
    if mu2 < mu1 {
        return Err(Error::invalid(format!(
            "expected E[Z2] >= E[Z1], got {mu2} < {mu1}; swap the arguments"
        )));
    }
    let alpha = s1.alpha();
    let c = theorem1_constants(s1.m, alpha, mu1, mu2)?;
    let (var1, var2) = (s1.var(), s2.var());
    let variance_condition = var2 >= c.c1 * var1 + c.c2;
    let temp_ok = alpha >= c.c_alpha;
    Ok(TheoremOneVerdict {
        constants: c,
        verdict: temp_ok && variance_condition,
        statement_form: temp_ok && var2 >= c.c1 * var1,
        variance_condition,
        mu1,
        mu2,
        var1,
        var2,
        qoe1: qoe_from_lemma(s1),
        qoe2: qoe_from_lemma(s2),
    })
}

/// A random lattice distribution with mass on a random subset of points.
/// Supports are often small so that low- and high-variance shapes both
/// show up.
pub fn random_distribution<R: Rng>(m: usize, alpha: f64, rng: &mut R) -> DynamicsSummary {
    loop {
        let support = rng.random_range(1..=m + 1);
        let mut counts = vec![0u64; m + 1];
        for _ in 0..support {
            let j = rng.random_range(0..=m);
            counts[j] += rng.random_range(1..=20);
        }
        if let Ok(s) = DynamicsSummary::from_counts(m, alpha, counts) {
            return s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SoundnessSweep {
    pub m: usize,
    /// Pairs with both means strictly inside (0, 1).
    pub pairs_checked: u64,
    pub verdict_true: u64,
    /// `verdict = true` yet `QoE(Z2) > QoE(Z1) + tol`.
    pub violations: u64,
    /// Largest `QoE(Z2) - QoE(Z1)` among `verdict = true` pairs.
    pub worst_margin: f64,
    pub false_with_drop: u64,
    pub false_with_rise: u64,
}

/// Random soundness check of [`theorem1_condition`] against the
/// brute-force QoE.
pub fn soundness_sweep(m: usize, pairs: u64, seed_value: u64, tol: f64) -> Result<SoundnessSweep> {
    let mut rng = seed::rng(seed::derive(seed_value, m as u64));
    let alphas = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut out = SoundnessSweep {
        m,
        pairs_checked: 0,
        verdict_true: 0,
        violations: 0,
        worst_margin: f64::NEG_INFINITY,
        false_with_drop: 0,
        false_with_rise: 0,
    };
    while out.pairs_checked < pairs {
        let alpha = if rng.random_bool(0.5) {
            alphas[rng.random_range(0..alphas.len())]
        } else {
            rng.random_range(0.01..10.0)
        };
        let a = random_distribution(m, alpha, &mut rng);
        let b = random_distribution(m, alpha, &mut rng);
        let (s1, s2) = if a.mu() <= b.mu() { (a, b) } else { (b, a) };
        let Ok(v) = theorem1_condition(&s1, &s2) else {
            continue;
        };
        out.pairs_checked += 1;
        let diff = qoe_brute_force(&s2) - qoe_brute_force(&s1);
        if v.verdict {
            out.verdict_true += 1;
            out.worst_margin = out.worst_margin.max(diff);
            if diff > tol {
                out.violations += 1;
            }
        } else if diff > 0.0 {
            out.false_with_rise += 1;
        } else {
            out.false_with_drop += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_identities() {
        for z in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            assert_eq!(k_closed_form(z, 0.0), z);
        }
        for a in [0.1, 1.0, 50.0, 1e4] {
            assert_eq!(k_closed_form(0.0, a), 0.0);
            assert_eq!(k_closed_form(1.0, a), 1.0);
        }
        // correctness (1, 1, 0), alpha = 1: 2e / (2e + 1)
        let e = 1f64.exp();
        let brute = softmax_expectation(&[1.0, 1.0, 0.0], 1.0);
        assert!((brute - 2.0 * e / (2.0 * e + 1.0)).abs() < 1e-15);
        assert!((brute - 0.844_638).abs() < 1e-6);
        assert!((k_closed_form(2.0 / 3.0, 1.0) - brute).abs() < 1e-15);
    }

    #[test]
    fn summary_moments() {
        // Z in {0, 1/2, 1} with counts (1, 2, 1): mean 1/2, var 1/8
        let s = DynamicsSummary::from_counts(2, 1.0, vec![1, 2, 1]).unwrap();
        assert_eq!(s.mu(), 0.5);
        assert_eq!(s.var(), 0.125);
        assert_eq!(s.z_samples(), vec![0.0, 0.5, 0.5, 1.0]);

        let z = [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0];
        let s = DynamicsSummary::from_z_samples(3, 0.5, &z).unwrap();
        assert_eq!(s.counts, vec![1, 2, 0, 1]);
        assert!(DynamicsSummary::from_z_samples(3, 0.5, &[0.5]).is_err());
        assert!(DynamicsSummary::from_counts(3, 0.5, vec![0; 4]).is_err());
    }

    #[test]
    fn lemma_qoe_special_cases() {
        let s = DynamicsSummary::from_counts(4, 0.0, vec![3, 1, 0, 5, 2]).unwrap();
        assert!((qoe_from_lemma(&s) - s.mu()).abs() < 1e-15);
        let perfect = DynamicsSummary::from_counts(4, 3.0, vec![0, 0, 0, 0, 7]).unwrap();
        assert_eq!(qoe_from_lemma(&perfect), 1.0);
    }

    #[test]
    fn theorem3_degenerate_cases() {
        let q = vec![vec![0.2, 0.9, 0.4], vec![1.5, 0.0, 0.3]];
        let b = theorem3_bounds(&q, 0.0).unwrap();
        assert!((b.value - b.lower).abs() < 1e-15);
        let flat = vec![vec![0.7; 4], vec![0.2; 4]];
        let b = theorem3_bounds(&flat, 3.0).unwrap();
        assert!((b.lower - b.value).abs() < 1e-15 && (b.value - b.upper).abs() < 1e-15);
        assert!(theorem3_bounds(&[vec![-1.0]], 1.0).is_err());
    }

    #[test]
    fn constants_known_values() {
        for a in [0.1, 1.0, 3.0] {
            let c = theorem1_constants(2, a, 0.3, 0.6).unwrap();
            assert!((c.c1 - 1.0).abs() < 1e-15);
        }
        let c = theorem1_constants(3, 2f64.ln(), 0.4, 0.7).unwrap();
        assert!((c.c1 - 0.8).abs() < 1e-15);
        assert!((c.c1 - c.c_low / c.c_upp).abs() < 1e-15);
        assert!(c.c_low <= c.c_upp);

        let c = theorem1_constants(5, 1.0, 0.35, 0.35).unwrap();
        assert_eq!(c.c_alpha, 0.0);

        assert!(theorem1_constants(3, 1.0, 0.0, 0.5).is_err());
        assert!(theorem1_constants(3, 1.0, 0.5, 1.0).is_err());
        assert!(theorem1_constants(3, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn c_alpha_sentinels() {
        // den = (M-1) v2 - v1 <= 0 when v2 is tiny
        let c = theorem1_constants(3, 1.0, 0.5, 0.99).unwrap();
        assert_eq!(c.c_alpha, f64::INFINITY);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains(r#""c_alpha":"inf""#));
        // v2 > v1: num / den < 1
        let c = theorem1_constants(4, 1.0, 0.9, 0.5).unwrap();
        assert_eq!(c.c_alpha, 0.0);
        // num / den > 1
        let c = theorem1_constants(3, 1.0, 0.5, 0.2).unwrap();
        let v1: f64 = 0.25;
        let v2: f64 = 0.16;
        assert!((c.c_alpha - ((2.0 * v1 - v2) / (2.0 * v2 - v1)).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_dynamics() {
        for m in [2, 3, 5] {
            let mut counts = vec![1u64; m + 1];
            counts[1] = 4;
            let s = DynamicsSummary::from_counts(m, 2.0, counts).unwrap();
            let v = theorem1_condition(&s, &s).unwrap();
            // c2 = (1 - c1) mu (1 - mu) >= 0 at equal means
            assert!(v.constants.c2 >= -1e-15);
            assert_eq!(v.qoe1, v.qoe2);
            if v.verdict {
                assert!(v.qoe2 <= v.qoe1);
            }
            if m > 2 {
                assert!(!v.verdict);
            }
        }
    }

    #[test]
    fn condition_rejects_mismatch() {
        let a = DynamicsSummary::from_counts(3, 1.0, vec![1, 1, 1, 1]).unwrap();
        let b = DynamicsSummary::from_counts(4, 1.0, vec![1, 1, 1, 1, 1]).unwrap();
        assert!(theorem1_condition(&a, &b).is_err());
        let c = DynamicsSummary::from_counts(3, 2.0, vec![1, 1, 1, 1]).unwrap();
        assert!(theorem1_condition(&a, &c).is_err());
        let low = DynamicsSummary::from_counts(3, 1.0, vec![5, 1, 0, 0]).unwrap();
        assert!(theorem1_condition(&a, &low).is_err());
    }

    #[test]
    fn sandwich_by_enumeration() {
        for m in 2..=12 {
            for alpha in [0.01, 0.5, 1.0, 3.0, 10.0] {
                let c = theorem1_constants(m, alpha, 0.5, 0.5).unwrap();
                for j in 1..m {
                    let z = j as f64 / m as f64;
                    let mid = alpha.exp_m1() / (z * alpha.exp() + 1.0 - z);
                    assert!(c.c_low <= mid * (1.0 + 1e-12), "m={m} a={alpha} j={j}");
                    assert!(mid <= c.c_upp * (1.0 + 1e-12), "m={m} a={alpha} j={j}");
                }
            }
        }
    }

    #[test]
    fn small_sweep_is_sound_and_not_necessary() {
        for m in [3, 4, 5] {
            let r = soundness_sweep(m, 3000, 7, 1e-12).unwrap();
            assert_eq!(r.violations, 0, "{r:?}");
            assert!(r.verdict_true > 0, "{r:?}");
            assert!(r.false_with_drop > 0 && r.false_with_rise > 0, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn k_strictly_increasing(z in 0.01f64..0.99, dz in 0.001f64..0.5, a in 0.01f64..20.0, da in 0.01f64..5.0) {
            let z2 = (z + dz).min(0.995);
            prop_assume!(z2 > z);
            prop_assert!(k_closed_form(z2, a) > k_closed_form(z, a));
            prop_assert!(k_closed_form(z, a + da) > k_closed_form(z, a));
        }

        #[test]
        fn lemma_matches_brute_force(counts in prop::collection::vec(0u64..10, 6), a in 0.0f64..8.0) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let s = DynamicsSummary::from_counts(5, a, counts).unwrap();
            prop_assert!((qoe_from_lemma(&s) - qoe_brute_force(&s)).abs() < 1e-12);
        }
    }
}
