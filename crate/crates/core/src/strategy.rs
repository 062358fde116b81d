//! Buying strategies and budget accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ProbabilityEstimate;

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Buying strategy, as written in the config:
/// `strategy = { type = "entropy", c_ent = 0.3 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BuyingStrategy {
    /// Buy when the prediction entropy is at least `c_ent * ln K`.
    Entropy { c_ent: f64 },
}

impl BuyingStrategy {
    pub fn entropy(c_ent: f64) -> Result<Self> {
        let s = BuyingStrategy::Entropy { c_ent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BuyingStrategy::Entropy { c_ent } if (0.0..=1.0).contains(&c_ent) => Ok(()),
            BuyingStrategy::Entropy { c_ent } => {
                Err(Error::invalid(format!("c_ent = {c_ent} outside [0, 1]")))
            }
        }
    }

    pub fn wants_to_buy(&self, p: &ProbabilityEstimate) -> bool {
        match *self {
            BuyingStrategy::Entropy { c_ent } => {
                let k = p.n_classes() as f64;
                shannon_entropy(p.probs()) >= c_ent * k.ln()
            }
        }
    }
}

impl Default for BuyingStrategy {
    fn default() -> Self {
        BuyingStrategy::Entropy { c_ent: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    remaining: u64,
    initial: u64,
}

impl Budget {
    pub fn new(initial: u64) -> Self {
        Self {
            remaining: initial,
            initial,
        }
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn initial(&self) -> u64 {
        self.initial
    }

    pub fn spent(&self) -> u64 {
        self.initial - self.remaining
    }

    pub fn shows_purchase_intent(&self, wants: bool) -> bool {
        self.remaining >= 1 && wants
    }

    pub fn charge(&mut self) -> Result<()> {
        if self.remaining == 0 {
            return Err(Error::BudgetExhausted);
        }
        self.remaining -= 1;
        Ok(())
    }
}
