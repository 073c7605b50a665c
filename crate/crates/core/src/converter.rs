//! Stage one: token-to-token conversion with a decoder-only model.
//!
//! Every example is laid out as `[condition][sep][target][eos]` and scored on
//! the `[target][eos]` segment. Pre-training conditions on a corrupted copy of
//! the target; fine-tuning conditions on the source-accent sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruptor::{corrupt_detailed, CorruptionSpec};
use crate::error::{Error, Result};
use crate::neural::{
    batch_loss, forward_cached, sample_top_k_filtered, train, Example, KvCache, ModelConfig, Params, Slot, TrainOpts,
    TrainReport,
};
use crate::tokens::{hypothesis_lcsr, TokenSequence, Vocabulary};

/// Weakly parallel utterance pair: the same content in the source accent
/// (`source`) and the target accent (`target`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

impl ParallelPair {
    pub fn new(source: TokenSequence, target: TokenSequence) -> Self {
        ParallelPair { source, target }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for seq in [&self.source, &self.target] {
            if seq.is_empty() {
                return Err(Error::EmptyUtterance {
                    utt_id: seq.utt_id.clone(),
                });
            }
            vocab.check(seq, false)?;
        }
        Ok(())
    }
}

fn reserved(vocab: &Vocabulary) -> (u32, u32) {
    (
        vocab.separator().expect("semantic vocabulary has a separator"),
        vocab.eos().expect("semantic vocabulary has an eos"),
    )
}

/// `[condition][sep][target][eos]` as a next-token example, or `None` when it
/// exceeds `context_len`.
pub fn layout_example(condition: &[u32], target: &[u32], vocab: &Vocabulary, context_len: usize) -> Option<Example> {
    let (sep, eos) = reserved(vocab);
    let n = condition.len() + 1 + target.len();
    if n > context_len {
        return None;
    }
    let inputs: Vec<Slot> = condition
        .iter()
        .chain(std::iter::once(&sep))
        .chain(target)
        .map(|&t| Slot::Token(t))
        .collect();
    let mut targets = vec![0u32; n];
    let mut loss_mask = vec![false; n];
    for (j, &t) in target.iter().chain(std::iter::once(&eos)).enumerate() {
        targets[condition.len() + j] = t;
        loss_mask[condition.len() + j] = true;
    }
    Some(Example {
        inputs,
        targets,
        loss_mask,
    })
}

fn check_corpus<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>, vocab: &Vocabulary) -> Result<()> {
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::EmptyUtterance {
                utt_id: seq.utt_id.clone(),
            });
        }
        vocab.check(seq, false)?;
    }
    Ok(())
}

/// Fails unless two vocabularies are identical.
pub fn ensure_same_vocab(expected: &Vocabulary, found: &Vocabulary) -> Result<()> {
    if expected != found {
        return Err(Error::VocabularyMismatch(format!(
            "expected {} ids ({:?}), found {} ids ({:?})",
            expected.size(),
            expected.reserved(),
            found.size(),
            found.reserved()
        )));
    }
    Ok(())
}

/// A denoising example with corruption drawn from `rng`.
pub fn pretrain_example<R: Rng + ?Sized>(
    seq: &TokenSequence,
    spec: &CorruptionSpec,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Option<Example>> {
    let corrupted = corrupt_detailed(&seq.tokens, spec, rng)?;
    Ok(layout_example(&corrupted.tokens, &seq.tokens, &config.semantic_vocab, config.context_len))
}

/// Trains `params` to reconstruct target-accent sequences from fresh
/// corruptions drawn at every visit.
pub fn pretrain_params(
    params: &mut Params<f32>,
    corpus: &[TokenSequence],
    spec: &CorruptionSpec,
    opts: &TrainOpts,
) -> Result<TrainReport> {
    let config = params.config.clone();
    spec.validate(Some(&config.semantic_vocab))?;
    check_corpus(corpus, &config.semantic_vocab)?;
    train(params, corpus.len(), opts, |i, rng| pretrain_example(&corpus[i], spec, &config, rng))
}

/// Fresh parameters (seeded from `opts.seed`) pre-trained on `corpus`.
pub fn pretrain(
    corpus: &[TokenSequence],
    spec: &CorruptionSpec,
    config: &ModelConfig,
    opts: &TrainOpts,
) -> Result<(Params<f32>, TrainReport)> {
    config.validate()?;
    if config.is_acoustic() {
        return Err(Error::ModelConfig("the converter is a token model (acoustic_groups = 0)".into()));
    }
    let mut params = Params::init(config, opts.seed);
    let report = pretrain_params(&mut params, corpus, spec, opts)?;
    Ok((params, report))
}

/// Continues training on `[source][sep][target][eos]` pairs. The vocabulary
/// and layout are those of pre-training.
pub fn finetune(params: &mut Params<f32>, pairs: &[ParallelPair], opts: &TrainOpts) -> Result<TrainReport> {
    let config = params.config.clone();
    for p in pairs {
        p.validate(&config.semantic_vocab)?;
    }
    if opts.steps == 0 {
        return Ok(TrainReport {
            steps: 0,
            losses: Vec::new(),
            skipped_steps: 0,
            skipped_examples: 0,
            optimizer: crate::neural::train::OPTIMIZER_NOTE.into(),
        });
    }
    train(params, pairs.len(), opts, |i, _| {
        Ok(layout_example(
            &pairs[i].source.tokens,
            &pairs[i].target.tokens,
            &config.semantic_vocab,
            config.context_len,
        ))
    })
}

/// Mean reconstruction loss on `corpus` with corruption from `seed`.
pub fn reconstruction_loss(params: &Params<f32>, corpus: &[TokenSequence], spec: &CorruptionSpec, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(corpus.len());
    for seq in corpus {
        if let Some(ex) = pretrain_example(seq, spec, &params.config, &mut rng)? {
            batch.push(ex);
        }
    }
    batch_loss(params, &batch)
}

/// Mean teacher-forced loss on parallel pairs.
pub fn pair_loss(params: &Params<f32>, pairs: &[ParallelPair]) -> Result<f64> {
    let c = &params.config;
    let batch: Vec<Example> = pairs
        .iter()
        .filter_map(|p| layout_example(&p.source.tokens, &p.target.tokens, &c.semantic_vocab, c.context_len))
        .collect();
    batch_loss(params, &batch)
}

/// How the best of several sampled candidates is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Evaluation mode: highest LCSR against a known reference.
    ReferenceLcsr(TokenSequence),
    /// Deployment mode: highest mean per-token log-probability.
    AvgLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOpts {
    pub k: usize,
    pub n_candidates: usize,
    pub temperature: f64,
}

impl Default for DecodeOpts {
    fn default() -> Self {
        DecodeOpts {
            k: 2,
            n_candidates: 5,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    /// Sum of sampled log-probabilities, the eos step included.
    pub total_logprob: f64,
    pub avg_logprob: f64,
    pub truncated: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub output: TokenSequence,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    /// Every candidate hit the length cap.
    pub truncated: bool,
}

/// Output length cap for a source of `n` tokens.
pub fn length_cap(n: usize) -> usize {
    2 * n + 16
}

/// One autoregressive decode of `x` with top-k sampling. Reserved ids other
/// than eos are never emitted.
pub fn decode_one<R: Rng + ?Sized>(
    params: &Params<f32>,
    x: &TokenSequence,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Candidate> {
    let vocab = &params.config.semantic_vocab;
    let (sep, eos) = reserved(vocab);
    // The condition may carry mask tokens (denoising) but no layout markers.
    if x.is_empty() {
        return Err(Error::EmptyUtterance { utt_id: x.utt_id.clone() });
    }
    vocab.check(x, true)?;
    if let Some(&t) = x.tokens.iter().find(|&&t| t == sep || t == eos) {
        return Err(Error::ReservedInInput { utt_id: x.utt_id.clone(), token: t });
    }
    let prefix = x.len() + 1;
    let context = params.config.context_len;
    if prefix >= context {
        return Err(Error::ContextOverflow { len: prefix + 1, context });
    }
    let cap = length_cap(x.len()).min(context - prefix);
    let banned: Vec<u32> = vocab.reserved().values().copied().filter(|&id| id != eos).collect();

    let mut cache = KvCache::new(params.config.n_layers);
    let slots: Vec<Slot> = x.tokens.iter().chain(std::iter::once(&sep)).map(|&t| Slot::Token(t)).collect();
    let mut logits = forward_cached(params, &slots, &mut cache)?;
    let mut last = prefix - 1;
    let hv = params.config.head_vocab();
    let mut tokens = Vec::new();
    let mut total = 0.0;
    let mut truncated = true;
    loop {
        let row = &logits[0][last * hv..(last + 1) * hv];
        let s = sample_top_k_filtered(row, k, temperature, &banned, rng)?;
        total += s.logprob;
        if s.id == eos {
            truncated = false;
            break;
        }
        tokens.push(s.id);
        if tokens.len() >= cap {
            break;
        }
        logits = forward_cached(params, &[Slot::Token(s.id)], &mut cache)?;
        last = 0;
    }
    let steps = tokens.len() + usize::from(!truncated);
    Ok(Candidate {
        tokens,
        total_logprob: total,
        avg_logprob: total / steps as f64,
        truncated,
        score: f64::NAN,
    })
}

/// Samples `n_candidates` decodes and keeps the best under `selector`.
/// Candidates that terminated are preferred over capped ones; ties go to
/// the earliest candidate.
pub fn convert<R: Rng + ?Sized>(
    params: &Params<f32>,
    x: &TokenSequence,
    opts: &DecodeOpts,
    selector: &Selector,
    rng: &mut R,
) -> Result<Conversion> {
    if opts.n_candidates == 0 {
        return Err(Error::Config("n_candidates must be positive".into()));
    }
    let mut candidates = Vec::with_capacity(opts.n_candidates);
    for _ in 0..opts.n_candidates {
        let mut c = decode_one(params, x, opts.k, opts.temperature, rng)?;
        c.score = match selector {
            Selector::AvgLoglik => c.avg_logprob,
            Selector::ReferenceLcsr(reference) => {
                hypothesis_lcsr(&TokenSequence::new(x.utt_id.clone(), c.tokens.clone()), reference)?
            }
        };
        candidates.push(c);
    }
    let all_truncated = candidates.iter().all(|c| c.truncated);
    let mut selected: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.truncated && !all_truncated {
            continue;
        }
        match selected {
            Some(j) if candidates[j].score >= c.score => {}
            _ => selected = Some(i),
        }
    }
    let selected = selected.expect("at least one candidate");
    Ok(Conversion {
        output: TokenSequence::new(x.utt_id.clone(), candidates[selected].tokens.clone()),
        candidates,
        selected,
        truncated: all_truncated,
    })
}

/// Per-utterance generator for corpus-level decoding: independent of how
/// many utterances are converted before it.
pub fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Converts every source; `references` switches to reference selection.
pub fn convert_corpus(
    params: &Params<f32>,
    sources: &[TokenSequence],
    references: Option<&[TokenSequence]>,
    opts: &DecodeOpts,
    seed: u64,
) -> Result<Vec<Conversion>> {
    if let Some(r) = references {
        if r.len() != sources.len() {
            return Err(Error::Config(format!(
                "{} sources but {} references",
                sources.len(),
                r.len()
            )));
        }
    }
    sources
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let selector = match references {
                Some(r) => Selector::ReferenceLcsr(r[i].clone()),
                None => Selector::AvgLoglik,
            };
            convert(params, x, opts, &selector, &mut utterance_rng(seed, i))
        })
        .collect()
}

/// Fraction of aligned positions that agree, over the longer length.
pub fn token_accuracy(output: &[u32], reference: &[u32]) -> f64 {
    let n = output.len().max(reference.len());
    if n == 0 {
        return 1.0;
    }
    output.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / n as f64
}
