use std::collections::HashMap;

use convert_speak::synthcorpus::{
    apply_accent, gen_target_corpus, transition_tv, AccentRuleSet, Benchmark, BenchmarkConfig, LengthDist, MarkovTable,
    SyntheticCodec,
};
use convert_speak::tokens::{dedup_runs, lcsr, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn uniform_table_gives_uniform_unigrams() {
    let v = 16;
    let table = MarkovTable::uniform(v).unwrap();
    let corpus = gen_target_corpus(&table, 5000, LengthDist { min: 100, max: 100 }, 5, "u").unwrap();
    let mut counts = vec![0usize; v];
    for s in &corpus {
        for &t in &s.tokens {
            counts[t as usize] += 1;
        }
    }
    let expected = 5000.0 * 100.0 / v as f64;
    for (t, &c) in counts.iter().enumerate() {
        let rel = (c as f64 - expected).abs() / expected;
        assert!(rel <= 0.10, "id {t}: {c} vs {expected}");
    }
}

/// Context-weighted total variation, written out independently.
fn weighted_tv(corpus: &[TokenSequence], table: &MarkovTable) -> f64 {
    let v = table.vocab();
    let mut by_context: HashMap<(usize, usize), HashMap<u32, usize>> = HashMap::new();
    let mut n = 0usize;
    for s in corpus {
        let mut ctx = (table.start(), table.start());
        for &t in &s.tokens {
            *by_context.entry(ctx).or_default().entry(t).or_default() += 1;
            n += 1;
            ctx = (ctx.1, t as usize);
        }
    }
    let mut tv = 0.0;
    for ((c2, c1), next) in &by_context {
        let m: usize = next.values().sum();
        let row = table.row(*c2, *c1);
        let dist: f64 = (0..v)
            .map(|t| (next.get(&(t as u32)).copied().unwrap_or(0) as f64 / m as f64 - row[t]).abs())
            .sum::<f64>()
            / 2.0;
        tv += dist * m as f64 / n as f64;
    }
    tv
}

#[test]
fn default_corpus_follows_its_table() {
    let b = Benchmark::build(&BenchmarkConfig::default()).unwrap();
    assert_eq!(b.target_corpus.len(), 2000);
    let tv = transition_tv(&b.target_corpus, &b.table);
    assert!((tv - weighted_tv(&b.target_corpus, &b.table)).abs() < 1e-12);
    assert!(tv <= 0.05, "total variation {tv}");
}

#[test]
fn default_accent_diverges_like_real_accents() {
    let b = Benchmark::build(&BenchmarkConfig::default()).unwrap();
    let corpus = gen_target_corpus(&b.table, 1000, b.config.lengths, 99, "a").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mean = corpus
        .iter()
        .map(|y| lcsr(&apply_accent(y, &b.rules, &mut rng), y).unwrap())
        .sum::<f64>()
        / corpus.len() as f64;
    assert!((0.4..=0.7).contains(&mean), "mean lcsr {mean}");
}

#[test]
fn substitutions_are_one_way() {
    let b = Benchmark::build(&BenchmarkConfig::default()).unwrap();
    for s in &b.rules.substitutions {
        assert_ne!(s.from, s.to);
        assert!(!b.rules.substitutions.iter().any(|r| r.from == s.to && r.to == s.from));
    }
}

#[test]
fn accent_does_not_grow_beyond_insertions() {
    let b = Benchmark::build(&BenchmarkConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fillers: Vec<u32> = b.rules.insertions.iter().map(|i| i.filler).collect();
    for y in b.target_corpus.iter().take(300) {
        let x = apply_accent(y, &b.rules, &mut rng);
        let inserted = x.tokens.iter().filter(|t| fillers.contains(t)).count();
        assert!(dedup_runs(&x.tokens).len() <= dedup_runs(&y.tokens).len() + inserted);
    }
}

#[test]
fn identity_rules_leave_sequences_alone() {
    let rules = AccentRuleSet::identity(0);
    let mut rng = rules.rng();
    let y = TokenSequence::new("i", vec![3, 3, 1, 4, 1, 5]);
    assert_eq!(apply_accent(&y, &rules, &mut rng), y);
}

#[test]
fn codec_roundtrip_on_random_corpora() {
    let codec = SyntheticCodec::new(64, 4, 32, 8, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10_000 {
        let len = rng.random_range(1..40);
        let seq = TokenSequence::new(format!("c{i}"), (0..len).map(|_| rng.random_range(0..64)).collect());
        let style = rng.random_range(0..8);
        let (back, votes) = codec.decode(&codec.encode(&seq, style).unwrap());
        assert_eq!(back, seq);
        assert_eq!(votes[style], len);
    }
    assert!(codec.encode(&TokenSequence::new("x", vec![1]), 8).is_err());
}

#[test]
fn styles_differ_on_every_frame() {
    let codec = SyntheticCodec::new(64, 4, 32, 8, 12).unwrap();
    for id in 0..64 {
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(codec.frame(id, a), codec.frame(id, b));
            }
        }
    }
}

#[test]
fn benchmark_is_deterministic() {
    let cfg = BenchmarkConfig { n_target_utts: 50, n_train_pairs: 10, n_test_pairs: 5, ..BenchmarkConfig::default() };
    let a = Benchmark::build(&cfg).unwrap();
    let b = Benchmark::build(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.manifest().unwrap(), b.manifest().unwrap());
    let other = Benchmark::build(&BenchmarkConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.target_corpus, other.target_corpus);
}

#[test]
fn empty_corpus_request() {
    let table = MarkovTable::uniform(4).unwrap();
    assert!(gen_target_corpus(&table, 0, LengthDist { min: 1, max: 3 }, 0, "e").unwrap().is_empty());
}
