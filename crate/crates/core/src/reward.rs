//! Shaped reward: `R = λ·fuzzy + (1 − λ)·(cos + 1)/2`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{cosine, EmbedError, Embedder};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 0.4 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(RewardError::Lambda(self.lambda))
        }
    }
}

/// `1 − levenshtein(a, b) / max(|a|, |b|)` over Unicode scalar values; two
/// empty strings score 1.
pub fn fuzzy_sim(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

/// Cosine of the two embeddings rescaled to `[0, 1]`; a zero vector gives 0.5.
pub fn embed_sim(a: &str, b: &str, embedder: &dyn Embedder) -> Result<f64, RewardError> {
    let c = cosine(&embedder.embed_text(a)?, &embedder.embed_text(b)?)?;
    Ok((c + 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub fuzzy: f64,
    pub embed: f64,
    pub reward: f64,
}

pub fn blend(lambda: f64, fuzzy: f64, embed: f64) -> f64 {
    lambda * fuzzy + (1.0 - lambda) * embed
}

#[derive(Clone)]
pub struct Rewarder {
    config: RewardConfig,
    embedder: Arc<dyn Embedder>,
}

impl Rewarder {
    pub fn new(config: RewardConfig, embedder: Arc<dyn Embedder>) -> Result<Self, RewardError> {
        config.validate()?;
        Ok(Self { config, embedder })
    }

    pub fn config(&self) -> RewardConfig {
        self.config
    }

    /// Scores the generated `a_hat` against the expected `a`.
    pub fn score(&self, a: &str, a_hat: &str) -> Result<RewardBreakdown, RewardError> {
        let fuzzy = fuzzy_sim(a, a_hat);
        let embed = embed_sim(a, a_hat, self.embedder.as_ref())?;
        let reward = blend(self.config.lambda, fuzzy, embed).clamp(0.0, 1.0);
        Ok(RewardBreakdown { fuzzy, embed, reward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashEmbedder;
    use proptest::prelude::*;

    fn rewarder(lambda: f64) -> Rewarder {
        Rewarder::new(RewardConfig { lambda }, Arc::new(HashEmbedder::new(32, 0))).unwrap()
    }

    #[test]
    fn fuzzy_examples() {
        assert_eq!(fuzzy_sim("same", "same"), 1.0);
        assert_eq!(fuzzy_sim("abc", ""), 0.0);
        assert_eq!(fuzzy_sim("", ""), 1.0);
        // frozen from tests/oracles/text_oracles.py
        assert!((fuzzy_sim("kitten", "sitting") - 0.5714285714285714).abs() < 1e-12);
        assert!((fuzzy_sim("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        // scalar values, not bytes
        assert!((fuzzy_sim("é", "e") - 0.0).abs() < 1e-12);
    }

    #[test]
    fn embed_examples() {
        let e = HashEmbedder::new(32, 0);
        assert!((embed_sim("hello there", "hello there", &e).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(embed_sim("", "x", &e).unwrap(), 0.5);
        // single tokens landing in different buckets are orthogonal
        let (a, b) = ("apple", "zebra");
        assert_ne!(e.embed_text(a).unwrap(), e.embed_text(b).unwrap());
        assert_eq!(embed_sim(a, b, &e).unwrap(), 0.5);
    }

    #[test]
    fn blend_arithmetic() {
        assert!((blend(0.4, 0.5, 1.0) - 0.8).abs() < 1e-15);
        for lambda in [0.0, 0.3, 1.0] {
            assert!((rewarder(lambda).score("a b c", "a b c").unwrap().reward - 1.0).abs() < 1e-12);
        }
        assert_eq!(RewardConfig::default().lambda, 0.4);
        assert!(Rewarder::new(RewardConfig { lambda: 1.5 }, Arc::new(HashEmbedder::new(8, 0))).is_err());
    }

    proptest! {
        #[test]
        fn reward_bounded_and_linear(a in "[a-z ]{0,20}", b in "[a-z ]{0,20}", lambda in 0.0f64..=1.0) {
            let r = rewarder(lambda).score(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.reward));
            let r0 = rewarder(0.0).score(&a, &b).unwrap().reward;
            prop_assert!((r.reward - r0 - lambda * (r.fuzzy - r.embed)).abs() < 1e-12);
        }

        #[test]
        fn fuzzy_symmetric(a in "\\PC{0,12}", b in "\\PC{0,12}") {
            prop_assert_eq!(fuzzy_sim(&a, &b), fuzzy_sim(&b, &a));
        }

        #[test]
        fn one_more_edit_never_helps(a in "[a-d]{0,10}", b in "[a-d]{1,10}", pos in 0usize..10, ch in "[a-e]") {
            // b' is b with its char at `pos` replaced; lev(a, b') ≥ lev(a, b) − 1
            let chars: Vec<char> = b.chars().collect();
            let i = pos % chars.len();
            let mut edited = chars.clone();
            edited[i] = ch.chars().next().unwrap();
            let edited: String = edited.into_iter().collect();
            if b == a {
                prop_assert!(fuzzy_sim(&a, &edited) <= fuzzy_sim(&a, &b));
            }
            let lev = |x: &str, y: &str| strsim::levenshtein(x, y);
            prop_assert!(lev(&a, &edited) + 1 >= lev(&a, &b));
        }
    }
}
