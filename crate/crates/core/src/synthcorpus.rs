//! Synthetic ground truth: a Markov target language, a rule-based accent,
//! and an invertible frame codec with speaker styles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::converter::ParallelPair;
use crate::error::{Error, Result};
use crate::tokens::{AcousticSequence, TokenSequence};

/// Order-2 transition table. Contexts range over `0..=vocab`, where `vocab`
/// is the start symbol padding the first two positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTable {
    vocab: usize,
    /// `[(vocab + 1)^2, vocab]`, row `(c2 * (vocab + 1) + c1)`.
    probs: Vec<f64>,
}

impl MarkovTable {
    pub fn new(vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::MarkovTable("empty vocabulary".into()));
        }
        let ctx = (vocab + 1) * (vocab + 1);
        if probs.len() != ctx * vocab {
            return Err(Error::MarkovTable(format!(
                "expected {} entries, got {}",
                ctx * vocab,
                probs.len()
            )));
        }
        for (r, row) in probs.chunks_exact(vocab).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::MarkovTable(format!("row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::MarkovTable(format!("row {r} sums to {s}")));
            }
        }
        Ok(MarkovTable { vocab, probs })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        let ctx = (vocab + 1) * (vocab + 1);
        MarkovTable::new(vocab, vec![1.0 / vocab as f64; ctx * vocab])
    }

    /// A sparse language over the first `active` ids of a `vocab`-id space:
    /// every reachable context has `branching` successors with random
    /// weights, never repeating the previous id.
    pub fn sparse(vocab: usize, active: usize, branching: usize, seed: u64) -> Result<Self> {
        if active < 2 || active > vocab || branching == 0 || branching >= active {
            return Err(Error::MarkovTable(format!(
                "need 2 <= active ({active}) <= vocab ({vocab}) and 0 < branching ({branching}) < active"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = vocab + 1;
        let mut probs = vec![0.0; width * width * vocab];
        for c2 in 0..width {
            for c1 in 0..width {
                let row = &mut probs[(c2 * width + c1) * vocab..(c2 * width + c1 + 1) * vocab];
                let reachable = (c1 < active || c1 == vocab) && (c2 < active || c2 == vocab);
                if !reachable {
                    row[..active].iter_mut().for_each(|p| *p = 1.0 / active as f64);
                    continue;
                }
                let mut candidates: Vec<usize> = (0..active).filter(|&t| t != c1).collect();
                candidates.shuffle(&mut rng);
                let weights: Vec<f64> = (0..branching).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (&t, w) in candidates[..branching].iter().zip(&weights) {
                    row[t] = w / total;
                }
                // Renormalize against rounding drift.
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
            }
        }
        MarkovTable::new(vocab, probs)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn start(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, c2: usize, c1: usize) -> &[f64] {
        let r = c2 * (self.vocab + 1) + c1;
        &self.probs[r * self.vocab..(r + 1) * self.vocab]
    }

    fn draw<R: Rng + ?Sized>(&self, c2: usize, c1: usize, rng: &mut R) -> usize {
        let row = self.row(c2, c1);
        let mut u = rng.random::<f64>();
        let mut last = 0;
        for (t, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last = t;
                if u < p {
                    return t;
                }
                u -= p;
            }
        }
        last
    }
}

/// Uniform utterance lengths in `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub min: usize,
    pub max: usize,
}

impl LengthDist {
    pub fn mean(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }
}

pub fn gen_target_corpus(
    table: &MarkovTable,
    n_utts: usize,
    lengths: LengthDist,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<TokenSequence>> {
    if lengths.min == 0 || lengths.min > lengths.max {
        return Err(Error::Config(format!("invalid length range {}..={}", lengths.min, lengths.max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_utts)
        .map(|i| {
            let len = rng.random_range(lengths.min..=lengths.max);
            let (mut c2, mut c1) = (table.start(), table.start());
            let tokens = (0..len)
                .map(|_| {
                    let t = table.draw(c2, c1, &mut rng);
                    c2 = c1;
                    c1 = t;
                    t as u32
                })
                .collect();
            TokenSequence::new(format!("{id_prefix}{i:05}"), tokens)
        })
        .collect())
}

/// Context-frequency-weighted total variation between the empirical
/// next-token distributions of `corpus` and the rows of `table`.
pub fn transition_tv(corpus: &[TokenSequence], table: &MarkovTable) -> f64 {
    let v = table.vocab();
    let mut counts: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut total = 0usize;
    for seq in corpus {
        let (mut c2, mut c1) = (table.start(), table.start());
        for &t in &seq.tokens {
            counts.entry((c2, c1)).or_insert_with(|| vec![0; v])[t as usize] += 1;
            total += 1;
            c2 = c1;
            c1 = t as usize;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut tv = 0.0;
    for ((c2, c1), row) in &counts {
        let n: usize = row.iter().sum();
        let expected = table.row(*c2, *c1);
        let dist: f64 = row
            .iter()
            .zip(expected)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        tv += dist * n as f64 / total as f64;
    }
    tv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub from: u32,
    pub to: u32,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub filler: u32,
    pub prob: f64,
}

/// A synthetic accent: phone substitutions, rhythm (repeat counts) and
/// filler insertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentRuleSet {
    pub substitutions: Vec<Substitution>,
    /// `repeat_counts[i]` is the probability of emitting a token `i + 1` times.
    pub repeat_counts: Vec<f64>,
    pub insertions: Vec<Insertion>,
    pub seed: u64,
}

impl AccentRuleSet {
    pub fn identity(seed: u64) -> Self {
        AccentRuleSet {
            substitutions: Vec::new(),
            repeat_counts: vec![1.0],
            insertions: Vec::new(),
            seed,
        }
    }

    /// Half of the first `active` ids are rewritten (with probability
    /// `sub_prob`) to ids the target language never uses; four filler ids
    /// are inserted occasionally and tokens are sometimes stretched.
    pub fn benchmark(vocab: usize, active: usize, sub_prob: f64, repeat_counts: &[f64], filler_prob: f64, seed: u64) -> Result<Self> {
        let n_subs = active / 2;
        if active + n_subs + 4 > vocab {
            return Err(Error::AccentRules(format!(
                "vocabulary {vocab} too small for {active} phones, {n_subs} accent phones and 4 fillers"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sources: Vec<u32> = (0..active as u32).collect();
        sources.shuffle(&mut rng);
        let substitutions = sources[..n_subs]
            .iter()
            .enumerate()
            .map(|(i, &from)| Substitution {
                from,
                to: (active + i) as u32,
                prob: sub_prob,
            })
            .collect();
        let insertions = (0..4)
            .map(|i| Insertion {
                filler: (active + n_subs + i) as u32,
                prob: filler_prob,
            })
            .collect();
        let rules = AccentRuleSet {
            substitutions,
            repeat_counts: repeat_counts.to_vec(),
            insertions,
            seed,
        };
        rules.validate(vocab)?;
        Ok(rules)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::AccentRules(m));
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        for s in &self.substitutions {
            if !prob_ok(s.prob) {
                return bad(format!("substitution {}->{} has probability {}", s.from, s.to, s.prob));
            }
            if s.from == s.to {
                return bad(format!("substitution {0}->{0} is a no-op", s.from));
            }
            if s.from as usize >= vocab || s.to as usize >= vocab {
                return bad(format!("substitution {}->{} outside vocabulary {vocab}", s.from, s.to));
            }
        }
        for ins in &self.insertions {
            if !prob_ok(ins.prob) || ins.filler as usize >= vocab {
                return bad(format!("invalid insertion of {} with probability {}", ins.filler, ins.prob));
            }
        }
        if self.repeat_counts.is_empty()
            || self.repeat_counts.iter().any(|&p| !prob_ok(p))
            || (self.repeat_counts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("repeat counts must be a probability distribution".into());
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Accented sequence plus the number of inserted fillers.
pub fn apply_accent_detailed<R: Rng + ?Sized>(seq: &TokenSequence, rules: &AccentRuleSet, rng: &mut R) -> (TokenSequence, usize) {
    let subs: BTreeMap<u32, &Substitution> = rules.substitutions.iter().rev().map(|s| (s.from, s)).collect();
    let mut out = Vec::with_capacity(seq.len() * 2);
    let mut inserted = 0;
    for &t in &seq.tokens {
        let t = match subs.get(&t) {
            Some(s) if rng.random_bool(s.prob) => s.to,
            _ => t,
        };
        let repeats = if rules.repeat_counts.len() == 1 {
            1
        } else {
            let mut u = rng.random::<f64>();
            let mut count = rules.repeat_counts.len();
            for (i, &p) in rules.repeat_counts.iter().enumerate() {
                if u < p {
                    count = i + 1;
                    break;
                }
                u -= p;
            }
            count
        };
        out.extend(std::iter::repeat_n(t, repeats));
        for ins in &rules.insertions {
            if rng.random_bool(ins.prob) {
                out.push(ins.filler);
                inserted += 1;
            }
        }
    }
    (TokenSequence::new(seq.utt_id.clone(), out), inserted)
}

pub fn apply_accent<R: Rng + ?Sized>(seq: &TokenSequence, rules: &AccentRuleSet, rng: &mut R) -> TokenSequence {
    apply_accent_detailed(seq, rules, rng).0
}

/// Invertible map from `(semantic id, style)` to a frame of `K` codes.
///
/// Group 0 carries the low five bits of the id, group 1 the remaining id
/// bits together with the style, and the other groups mix id and style the
/// way timbre colours every frame. Each group's codes are scrambled by a
/// seeded permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCodec {
    pub vocab: usize,
    pub groups: usize,
    pub codebook: usize,
    pub styles: usize,
    pub seed: u64,
    /// `[(id * styles + style) * groups + g]`
    table: Vec<u32>,
}

impl SyntheticCodec {
    pub fn new(vocab: usize, groups: usize, codebook: usize, styles: usize, seed: u64) -> Result<Self> {
        if groups < 2 || styles == 0 || vocab == 0 {
            return Err(Error::Config("codec needs at least two groups, one style and one id".into()));
        }
        let low = codebook.min(vocab);
        let high = vocab.div_ceil(low);
        if high * styles > codebook {
            return Err(Error::Config(format!(
                "codebook {codebook} cannot carry {high} id blocks x {styles} styles in one group"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms: Vec<Vec<u32>> = (0..groups)
            .map(|_| {
                let mut p: Vec<u32> = (0..codebook as u32).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut table = Vec::with_capacity(vocab * styles * groups);
        for id in 0..vocab {
            for s in 0..styles {
                for (g, perm) in perms.iter().enumerate() {
                    let raw = match g {
                        0 => id % low,
                        1 => (id / low) * styles + s,
                        _ => (id * (2 * g - 1) + s * (g + 1) * 3) % codebook,
                    };
                    table.push(perm[raw]);
                }
            }
        }
        Ok(SyntheticCodec {
            vocab,
            groups,
            codebook,
            styles,
            seed,
            table,
        })
    }

    pub fn frame(&self, id: u32, style: usize) -> &[u32] {
        let r = (id as usize * self.styles + style) * self.groups;
        &self.table[r..r + self.groups]
    }

    pub fn encode(&self, seq: &TokenSequence, style: usize) -> Result<AcousticSequence> {
        if style >= self.styles {
            return Err(Error::UnknownStyle {
                style,
                count: self.styles,
            });
        }
        let mut out = AcousticSequence::new(seq.utt_id.clone(), self.groups);
        for &t in &seq.tokens {
            if t as usize >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    utt_id: seq.utt_id.clone(),
                    token: t,
                    size: self.vocab,
                });
            }
            out.push(self.frame(t, style))?;
        }
        Ok(out)
    }

    /// Nearest codeword by group-wise Hamming distance (exact for valid
    /// frames; lowest `(id, style)` on ties).
    pub fn decode_frame(&self, frame: &[u32]) -> (u32, usize) {
        let mut best = (usize::MAX, 0u32, 0usize);
        for id in 0..self.vocab {
            for s in 0..self.styles {
                let cw = self.frame(id as u32, s);
                let dist = cw.iter().zip(frame).filter(|(a, b)| a != b).count();
                if dist < best.0 {
                    best = (dist, id as u32, s);
                    if dist == 0 {
                        return (id as u32, s);
                    }
                }
            }
        }
        (best.1, best.2)
    }

    /// Decoded ids and per-style frame votes.
    pub fn decode(&self, frames: &AcousticSequence) -> (TokenSequence, Vec<usize>) {
        let mut votes = vec![0; self.styles];
        let tokens = frames
            .frames()
            .map(|f| {
                let (id, s) = self.decode_frame(f);
                votes[s] += 1;
                id
            })
            .collect();
        (TokenSequence::new(frames.utt_id.clone(), tokens), votes)
    }
}

/// Size and seeds of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Semantic content ids (reserved ids are appended after these).
    pub content_vocab: usize,
    /// Ids the target accent uses; the accent draws on the rest.
    pub target_phones: usize,
    pub branching: usize,
    pub n_target_utts: usize,
    pub lengths: LengthDist,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    pub substitution_prob: f64,
    /// Probability of emitting each token once, twice, ...
    pub repeat_counts: Vec<f64>,
    /// Per-token insertion probability of each of the four fillers.
    pub filler_prob: f64,
    pub groups: usize,
    pub codebook: usize,
    pub styles: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            content_vocab: 64,
            target_phones: 36,
            branching: 3,
            n_target_utts: 2000,
            lengths: LengthDist { min: 60, max: 100 },
            n_train_pairs: 200,
            n_test_pairs: 100,
            substitution_prob: 0.9,
            repeat_counts: vec![0.7, 0.2, 0.1],
            filler_prob: 0.02,
            groups: 4,
            codebook: 32,
            styles: 8,
            seed: 1234,
        }
    }
}

/// Everything a pipeline run needs, regenerated deterministically from its
/// [`BenchmarkConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub table: MarkovTable,
    pub rules: AccentRuleSet,
    pub codec: SyntheticCodec,
    /// Target-accent utterances for pre-training and speaker training.
    pub target_corpus: Vec<TokenSequence>,
    /// Speaker style of each target utterance.
    pub target_styles: Vec<usize>,
    pub train_pairs: Vec<ParallelPair>,
    pub test_pairs: Vec<ParallelPair>,
    /// Speaker style of each held-out source utterance.
    pub test_styles: Vec<usize>,
    /// Speaker style of each training pair's target-accent recording.
    pub train_styles: Vec<usize>,
}

/// The replayable description of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BenchmarkConfig,
    pub table_seed: u64,
    pub rules: AccentRuleSet,
    pub codec_seed: u64,
    pub transition_tv: f64,
    pub source_reference_lcsr: f64,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Benchmark {
    pub fn build(config: &BenchmarkConfig) -> Result<Self> {
        let table = MarkovTable::sparse(
            config.content_vocab,
            config.target_phones,
            config.branching,
            derive_seed(config.seed, 1),
        )?;
        let rules = AccentRuleSet::benchmark(
            config.content_vocab,
            config.target_phones,
            config.substitution_prob,
            &config.repeat_counts,
            config.filler_prob,
            derive_seed(config.seed, 2),
        )?;
        let codec = SyntheticCodec::new(
            config.content_vocab,
            config.groups,
            config.codebook,
            config.styles,
            derive_seed(config.seed, 3),
        )?;
        let target_corpus = gen_target_corpus(
            &table,
            config.n_target_utts,
            config.lengths,
            derive_seed(config.seed, 4),
            "tgt",
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5));
        let target_styles = (0..target_corpus.len()).map(|_| rng.random_range(0..config.styles)).collect();
        let n_pairs = config.n_train_pairs + config.n_test_pairs;
        let references = gen_target_corpus(&table, n_pairs, config.lengths, derive_seed(config.seed, 6), "pair")?;
        let mut accent_rng = rules.rng();
        let mut pairs: Vec<ParallelPair> = references
            .into_iter()
            .map(|y| ParallelPair::new(apply_accent(&y, &rules, &mut accent_rng), y))
            .collect();
        let test_pairs = pairs.split_off(config.n_train_pairs);
        let test_styles = (0..test_pairs.len()).map(|_| rng.random_range(0..config.styles)).collect();
        let train_styles = (0..pairs.len()).map(|_| rng.random_range(0..config.styles)).collect();
        Ok(Benchmark {
            config: config.clone(),
            table,
            rules,
            codec,
            target_corpus,
            target_styles,
            train_pairs: pairs,
            test_pairs,
            test_styles,
            train_styles,
        })
    }

    /// Mean LCSR between held-out sources and their references: the score
    /// of doing nothing.
    pub fn baseline_lcsr(&self) -> Result<f64> {
        crate::tokens::mean_lcsr(self.test_pairs.iter().map(|p| (&p.source, &p.target)))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            config: self.config.clone(),
            table_seed: derive_seed(self.config.seed, 1),
            rules: self.rules.clone(),
            codec_seed: self.codec.seed,
            transition_tv: transition_tv(&self.target_corpus, &self.table),
            source_reference_lcsr: self.baseline_lcsr()?,
        })
    }

    /// Held-out sources in their speakers' styles (the input speech).
    pub fn test_source_acoustic(&self) -> Result<Vec<AcousticSequence>> {
        self.test_pairs
            .iter()
            .zip(&self.test_styles)
            .map(|(p, &s)| self.codec.encode(&p.source, s))
            .collect()
    }

    /// Held-out references in the source speakers' styles (the ideal output).
    pub fn test_reference_acoustic(&self) -> Result<Vec<AcousticSequence>> {
        self.test_pairs
            .iter()
            .zip(&self.test_styles)
            .map(|(p, &s)| self.codec.encode(&p.target, s))
            .collect()
    }

    /// Training-pair targets as recorded by target-accent speakers.
    pub fn train_target_acoustic(&self) -> Result<Vec<AcousticSequence>> {
        self.train_pairs
            .iter()
            .zip(&self.train_styles)
            .map(|(p, &s)| self.codec.encode(&p.target, s))
            .collect()
    }

    /// Target utterances rendered by the codec in their assigned styles.
    pub fn target_acoustic(&self) -> Result<Vec<AcousticSequence>> {
        self.target_corpus
            .iter()
            .zip(&self.target_styles)
            .map(|(y, &s)| self.codec.encode(y, s))
            .collect()
    }
}
