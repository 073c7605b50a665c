//! Corruptions for the denoising pretext task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Infilling,
    Masking,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub scheme: Scheme,
    /// Target fraction of covered tokens (infilling) or per-token rate.
    pub span_prob: f64,
    pub span_lambda: f64,
    pub mask_token: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn infilling(mask_token: u32, seed: u64) -> Self {
        CorruptionSpec {
            scheme: Scheme::Infilling,
            span_prob: 0.5,
            span_lambda: 5.0,
            mask_token,
            seed,
        }
    }

    pub fn validate(&self, vocab: Option<&Vocabulary>) -> Result<()> {
        if !(self.span_prob > 0.0 && self.span_prob <= 1.0) {
            return Err(Error::CorruptionSpec(format!(
                "span_prob {} outside (0, 1]",
                self.span_prob
            )));
        }
        if !(self.span_lambda > 0.0 && self.span_lambda.is_finite()) {
            return Err(Error::CorruptionSpec(format!(
                "span_lambda {} must be positive",
                self.span_lambda
            )));
        }
        if let Some(v) = vocab {
            if v.mask() != Some(self.mask_token) {
                return Err(Error::CorruptionSpec(format!(
                    "mask_token {} is not the vocabulary's reserved mask id",
                    self.mask_token
                )));
            }
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// A corrupted sequence plus the spans that produced it (infilling only).
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub tokens: Vec<u32>,
    /// `(start, len)` in original coordinates, sorted by start.
    pub spans: Vec<(usize, usize)>,
}

impl Corruption {
    pub fn covered(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }
}

/// Corrupts `seq` with a generator derived from `spec.seed`.
pub fn corrupt_seeded(seq: &TokenSequence, spec: &CorruptionSpec) -> Result<TokenSequence> {
    corrupt(seq, spec, &mut spec.rng())
}

pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<TokenSequence> {
    let c = corrupt_detailed(&seq.tokens, spec, rng).map_err(|e| match e {
        Error::ReservedInInput { token, .. } => Error::ReservedInInput {
            utt_id: seq.utt_id.clone(),
            token,
        },
        Error::EmptyInput(_) => Error::EmptyInput(format!("utterance {:?}", seq.utt_id)),
        other => other,
    })?;
    Ok(TokenSequence::new(seq.utt_id.clone(), c.tokens))
}

pub fn corrupt_detailed<R: Rng + ?Sized>(
    tokens: &[u32],
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<Corruption> {
    spec.validate(None)?;
    if tokens.is_empty() {
        return Err(Error::EmptyInput("cannot corrupt an empty sequence".into()));
    }
    // Reserved ids sit at or above the mask id in every vocabulary built here.
    if let Some(&t) = tokens.iter().find(|&&t| t >= spec.mask_token) {
        return Err(Error::ReservedInInput {
            utt_id: String::new(),
            token: t,
        });
    }
    Ok(match spec.scheme {
        Scheme::Infilling => {
            let spans = sample_spans(tokens.len(), spec, rng);
            Corruption {
                tokens: apply_spans(tokens, &spans, spec.mask_token),
                spans,
            }
        }
        Scheme::Masking => Corruption {
            tokens: tokens
                .iter()
                .map(|&t| {
                    if rng.random_bool(spec.span_prob) {
                        spec.mask_token
                    } else {
                        t
                    }
                })
                .collect(),
            spans: Vec::new(),
        },
        Scheme::Deletion => Corruption {
            tokens: tokens
                .iter()
                .copied()
                .filter(|_| !rng.random_bool(spec.span_prob))
                .collect(),
            spans: Vec::new(),
        },
    })
}

/// Samples disjoint spans with Poisson lengths until `span_prob * len`
/// tokens are covered or `10 * len` placement attempts have been spent.
/// Each length is kept across rejected placements so rejection does not
/// bias the length distribution.
pub fn sample_spans<R: Rng + ?Sized>(
    len: usize,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let poisson = Poisson::new(spec.span_lambda).expect("validated lambda");
    let target = spec.span_prob * len as f64;
    let mut covered = vec![false; len];
    let mut starts = vec![false; len + 1];
    let mut spans = Vec::new();
    let mut n_covered = 0usize;
    let mut attempts = 0usize;
    let budget = 10 * len;
    'outer: while (n_covered as f64) < target && attempts < budget {
        let want = poisson.sample(rng) as usize;
        // A handful of placements per drawn length before drawing another.
        for _ in 0..8 {
            if attempts >= budget {
                break 'outer;
            }
            attempts += 1;
            let start = if want == 0 {
                rng.random_range(0..=len)
            } else {
                rng.random_range(0..len)
            };
            let end = (start + want).min(len);
            let clash = if end == start {
                starts[start] || (start < len && covered[start])
            } else {
                starts[start..end].iter().any(|&s| s) || covered[start..end].iter().any(|&c| c)
            };
            if clash {
                continue;
            }
            starts[start] = true;
            covered[start..end].iter_mut().for_each(|c| *c = true);
            n_covered += end - start;
            spans.push((start, end - start));
            break;
        }
    }
    spans.sort_unstable();
    spans
}

/// Replaces each span by one mask token; zero-length spans insert one.
pub fn apply_spans(tokens: &[u32], spans: &[(usize, usize)], mask: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + spans.len());
    let mut pos = 0;
    for &(start, len) in spans {
        out.extend_from_slice(&tokens[pos..start]);
        out.push(mask);
        pos = start + len;
    }
    out.extend_from_slice(&tokens[pos..]);
    out
}
