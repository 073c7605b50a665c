use convert_speak::tokens::{dedup_runs, lcs_length, lcsr, lcsr_ids, mean_lcsr, TokenSequence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_force_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = n;
        }
    }
    best
}

fn seq(tokens: &[u32]) -> TokenSequence {
    TokenSequence::new("u", tokens.to_vec())
}

#[test]
fn dp_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let alphabet = rng.random_range(1..6u32);
        let a: Vec<u32> = (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..alphabet)).collect();
        let b: Vec<u32> = (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..alphabet)).collect();
        assert_eq!(lcs_length(&a, &b), brute_force_lcs(&a, &b), "a={a:?} b={b:?}");
    }
}

#[test]
fn worked_examples() {
    assert_eq!(dedup_runs(&[]), Vec::<u32>::new());
    assert_eq!(dedup_runs(&[7, 7, 7, 7]), vec![7]);
    assert_eq!(dedup_runs(&[5, 5, 2, 2, 5]), vec![5, 2, 5]);
    assert_eq!(lcs_length(&[1, 2, 3], &[1, 2, 3]), 3);
    assert_eq!(lcs_length(&[1, 2], &[3, 4]), 0);
    assert_eq!(lcsr(&seq(&[1, 1, 2, 3]), &seq(&[1, 1, 2, 3])).unwrap(), 1.0);
    assert_eq!(lcsr(&seq(&[1, 2]), &seq(&[3, 4])).unwrap(), 0.0);
    assert_eq!(lcsr(&seq(&[1, 1, 2, 3, 4]), &seq(&[1, 3, 3, 4, 5])).unwrap(), 0.75);
}

#[test]
fn worked_ratio_agrees_with_oracle() {
    let (a, b) = (dedup_runs(&[1, 1, 2, 3, 4]), dedup_runs(&[1, 3, 3, 4, 5]));
    let oracle = brute_force_lcs(&a, &b) as f64 / a.len().min(b.len()) as f64;
    assert_eq!(oracle, 0.75);
}

#[test]
fn empty_after_dedup_is_an_error() {
    assert!(lcsr(&seq(&[]), &seq(&[1])).is_err());
    assert!(lcsr_ids(&[1], &[]).is_none());
}

#[test]
fn corpus_mean_is_unweighted() {
    let short = (seq(&[1]), seq(&[2]));
    let long = (seq(&(0..50).collect::<Vec<_>>()), seq(&(0..50).collect::<Vec<_>>()));
    let m = mean_lcsr([(&short.0, &short.1), (&long.0, &long.1)]).unwrap();
    assert_eq!(m, 0.5);
}

proptest! {
    #[test]
    fn dedup_is_idempotent(s in proptest::collection::vec(0u32..5, 0..40)) {
        let once = dedup_runs(&s);
        prop_assert_eq!(dedup_runs(&once), once);
    }

    #[test]
    fn lcs_symmetric_and_bounded(a in proptest::collection::vec(0u32..6, 0..30), b in proptest::collection::vec(0u32..6, 0..30)) {
        let l = lcs_length(&a, &b);
        prop_assert_eq!(l, lcs_length(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn self_lcsr_is_one(a in proptest::collection::vec(0u32..6, 1..40)) {
        prop_assert_eq!(lcsr(&seq(&a), &seq(&a)).unwrap(), 1.0);
    }

    #[test]
    fn lcsr_in_unit_interval(a in proptest::collection::vec(0u32..6, 1..30), b in proptest::collection::vec(0u32..6, 1..30)) {
        let r = lcsr(&seq(&a), &seq(&b)).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
