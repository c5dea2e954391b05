use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::table::l2_normalize;
use crate::error::{ElmError, Result};
use crate::rng::{fnv1a64, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticEncoderConfig {
    /// Hash buckets for bigram counts.
    pub buckets: usize,
    /// Output dimension.
    pub dim: usize,
    pub seed: u64,
}

impl Default for SemanticEncoderConfig {
    fn default() -> Self {
        SemanticEncoderConfig {
            buckets: 256,
            dim: 64,
            seed: 7,
        }
    }
}

/// Hashed token-bigram counts, projected by a fixed Gaussian matrix and
/// L2-normalized. Tokens are the lowercase whitespace-separated words; a
/// bigram is hashed as the two tokens joined by one space. A single-token
/// text contributes its unigram instead.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEncoder {
    config: SemanticEncoderConfig,
    projection: Vec<f64>,
}

/// Bucket index of every bigram feature of `text`, in order of occurrence.
pub fn bigram_features(text: &str, buckets: usize) -> Vec<usize> {
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    let bucket = |s: &str| (fnv1a64(s.as_bytes()) % buckets as u64) as usize;
    match tokens.len() {
        0 => Vec::new(),
        1 => vec![bucket(tokens[0])],
        _ => tokens
            .windows(2)
            .map(|w| bucket(&format!("{} {}", w[0], w[1])))
            .collect(),
    }
}

impl SemanticEncoder {
    pub fn new(config: SemanticEncoderConfig) -> Result<Self> {
        if config.dim < 2 || config.buckets < config.dim {
            return Err(ElmError::config(format!(
                "semantic encoder needs buckets >= dim >= 2, got {} and {}",
                config.buckets, config.dim
            )));
        }
        let mut rng = SplitMix64::stream(config.seed, "semantic/projection");
        let projection = (0..config.buckets * config.dim)
            .map(|_| rng.normal())
            .collect();
        Ok(SemanticEncoder { config, projection })
    }

    pub fn config(&self) -> &SemanticEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Digest of the configuration, recorded in evaluation reports.
    pub fn digest(&self) -> String {
        let c = &self.config;
        let mut h = Sha256::new();
        h.update(format!("hashed-bigram/{}/{}/{}", c.buckets, c.dim, c.seed));
        hex::encode(&h.finalize()[..8])
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let feats = bigram_features(text, self.config.buckets);
        if feats.is_empty() {
            return Err(ElmError::degenerate("cannot encode empty text"));
        }
        let mut counts = vec![0u32; self.config.buckets];
        for f in feats {
            counts[f] += 1;
        }
        let n = self.config.dim;
        let mut v = vec![0.0; n];
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let row = &self.projection[b * n..(b + 1) * n];
            for (o, &g) in v.iter_mut().zip(row) {
                *o += f64::from(c) * g;
            }
        }
        l2_normalize(&mut v)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;

    fn enc() -> SemanticEncoder {
        SemanticEncoder::new(SemanticEncoderConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_unit_vectors() {
        let e = enc();
        let a = e.encode("hilarious ; gentle ; tender .").unwrap();
        let b = e.encode("hilarious ; gentle ; tender .").unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bigram_bucket_matches_independent_fnv() {
        // FNV-1a written out again here from its definition.
        fn fnv(s: &str) -> u64 {
            let mut h: u64 = 14695981039346656037;
            for b in s.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            h
        }
        assert_eq!(
            bigram_features("The Cat", 256),
            vec![(fnv("the cat") % 256) as usize]
        );
    }

    #[test]
    fn empty_text_is_degenerate() {
        assert!(matches!(
            enc().encode("   \n"),
            Err(ElmError::Degenerate(_))
        ));
        assert!(enc().encode("word").is_ok());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SemanticEncoderConfig {
            buckets: 8,
            dim: 16,
            seed: 1,
        };
        assert!(SemanticEncoder::new(bad).is_err());
    }
}
