use convert_speak::neural::gradcheck::{self, random_batch, toy_config};
use convert_speak::neural::model::log_softmax;
use convert_speak::neural::{
    embed, embed_sequence, forward, forward_cached, sample_top_k, train, Example, KvCache, ModelConfig,
    OptimConfig, Params, Slot, TrainOpts,
};
use convert_speak::tokens::{AcousticSequence, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(heads: usize, groups: usize, rotary: bool, reset: bool) -> ModelConfig {
    let mut c = if groups == 0 {
        ModelConfig::converter(10)
    } else {
        ModelConfig::speaker(10, groups, 7)
    };
    c.n_layers = 2;
    c.n_heads = heads;
    c.d_model = 16;
    c.d_ff = 24;
    c.context_len = 24;
    c.init_std = 0.3;
    c.rotary = rotary;
    c.position_reset = reset;
    c
}

fn random_slots(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Slot> {
    let sem = cfg.semantic_vocab.size() as u32;
    (0..n)
        .map(|_| {
            if cfg.acoustic_groups > 0 && rng.random_bool(0.5) {
                Slot::Frame((0..cfg.acoustic_groups).map(|_| rng.random_range(0..=cfg.group_codebook as u32)).collect())
            } else {
                Slot::Token(rng.random_range(0..sem))
            }
        })
        .collect()
}

#[test]
fn group_code_touches_only_its_slice() {
    let cfg = small(2, 4, true, true);
    let p: Params<f64> = Params::init(&cfg, 3);
    let y = TokenSequence::new("u", vec![1, 2]);
    let frame = |c2: u32| AcousticSequence::from_frames("u", 4, &[vec![0, 1, c2, 3]]).unwrap();
    let a = embed_sequence(&y, Some(&frame(2)), &p).unwrap();
    let b = embed_sequence(&y, Some(&frame(5)), &p).unwrap();
    let d = cfg.d_model;
    assert_eq!(a.len(), 4 * d);
    let w = d / 4;
    for i in 0..a.len() {
        let in_slice = i >= 3 * d + 2 * w && i < 3 * d + 3 * w;
        assert_eq!(a[i] != b[i], in_slice, "coordinate {i}");
    }
}

#[test]
fn empty_acoustic_segment_adds_only_the_separator() {
    let cfg = small(2, 4, false, false);
    let p: Params<f32> = Params::init(&cfg, 0);
    let y = TokenSequence::new("u", vec![1, 2, 3]);
    assert_eq!(embed_sequence(&y, None, &p).unwrap().len(), 4 * cfg.d_model);
    let long = TokenSequence::new("u", vec![1; 30]);
    assert!(embed_sequence(&long, None, &p).is_err());
}

#[test]
fn frame_is_concatenated_group_rows() {
    let cfg = small(2, 4, false, false);
    let mut p: Params<f64> = Params::init(&cfg, 8);
    p.pos_embed.data.iter_mut().for_each(|v| *v = 0.0);
    let codes = [3u32, 0, 6, 2];
    let x = embed(&p, &[Slot::Frame(codes.into())], 0).unwrap();
    let want: Vec<f64> = codes.iter().enumerate().flat_map(|(g, &c)| p.group_embed[g].row(c as usize).to_vec()).collect();
    assert_eq!(x, want);
}

#[test]
fn causality_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let settings = [(1, 0, false, false), (2, 0, true, true), (4, 3, true, true), (2, 4, false, true)];
    for trial in 0..100 {
        let (heads, groups, rotary, reset) = settings[trial % settings.len()];
        let cfg = small(heads, groups, rotary, reset);
        let p: Params<f64> = Params::init(&cfg, trial as u64);
        let n = rng.random_range(2..=cfg.context_len);
        let slots = random_slots(&cfg, n, &mut rng);
        let t = rng.random_range(0..n - 1);
        let mut perturbed = slots.clone();
        let tail = random_slots(&cfg, n - t - 1, &mut rng);
        perturbed[t + 1..].clone_from_slice(&tail);
        let a = forward(&p, &slots).unwrap();
        let b = forward(&p, &perturbed).unwrap();
        let hv = cfg.head_vocab();
        for h in 0..cfg.n_output_heads {
            assert_eq!(a[h][..(t + 1) * hv], b[h][..(t + 1) * hv], "trial {trial} head {h} t {t}");
        }
    }
}

#[test]
fn appending_a_position_keeps_earlier_logits() {
    let cfg = small(4, 0, true, true);
    let p: Params<f32> = Params::init(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let slots = random_slots(&cfg, 10, &mut rng);
    let short = forward(&p, &slots[..9]).unwrap();
    let long = forward(&p, &slots).unwrap();
    assert_eq!(short[0][..], long[0][..short[0].len()]);
}

#[test]
fn cached_decoding_matches_full_pass_across_separators() {
    let cfg = small(2, 3, true, true);
    let sep = cfg.semantic_vocab.separator().unwrap();
    let p: Params<f64> = Params::init(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut slots = random_slots(&cfg, 14, &mut rng);
    slots[4] = Slot::Token(sep);
    slots[9] = Slot::Token(sep);
    let full = forward(&p, &slots).unwrap();
    let mut cache = KvCache::new(cfg.n_layers);
    let mut rows = vec![forward_cached(&p, &slots[..3], &mut cache).unwrap()];
    for s in &slots[3..] {
        rows.push(forward_cached(&p, std::slice::from_ref(s), &mut cache).unwrap());
    }
    for h in 0..cfg.n_output_heads {
        let joined: Vec<f64> = rows.iter().flat_map(|r| r[h].iter().copied()).collect();
        for (a, b) in joined.iter().zip(&full[h]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn head_distributions_are_normalized() {
    let cfg = small(2, 4, true, true);
    let p: Params<f32> = Params::init(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slots = random_slots(&cfg, 12, &mut rng);
    let hv = cfg.head_vocab();
    for head in forward(&p, &slots).unwrap() {
        for row in head.chunks(hv) {
            let total: f64 = log_softmax(row).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let report = gradcheck::run_default(0).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.coordinates, toy_config().parameter_count());
}

#[test]
fn gradient_matches_finite_differences_with_separators() {
    let cfg = toy_config();
    let sep = cfg.semantic_vocab.separator().unwrap();
    let params: Params<f64> = Params::init(&cfg, 21);
    let mut batch = random_batch(&cfg, 3, 9, 22);
    for (i, ex) in batch.iter_mut().enumerate() {
        ex.inputs[2 + i] = Slot::Token(sep);
    }
    let report = gradcheck::check(&params, &batch, 1e-4, 1e-3).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn top_two_sampler_law() {
    let logits = [4f64.ln(), 1f64.ln(), 1e-9f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_top_k(&logits, 2, 1.0, &mut rng).unwrap() as usize] += 1;
    }
    assert_eq!(counts[2], 0);
    let f0 = counts[0] as f64 / n as f64;
    let f1 = counts[1] as f64 / n as f64;
    assert!((f0 - 0.8).abs() <= 0.01, "{f0}");
    assert!((f1 - 0.2).abs() <= 0.01, "{f1}");
}

#[test]
fn dominant_logit_and_nonfinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 1..=4 {
        assert_eq!(sample_top_k(&[0.0f32, 0.0, 1e6, 0.0], k, 1.0, &mut rng).unwrap(), 2);
    }
    assert!(sample_top_k(&[0.0f32, f32::NAN], 1, 1.0, &mut rng).is_err());
}

fn fixed_batch(cfg: &ModelConfig) -> Vec<Example> {
    random_batch(cfg, 32, 10, 77)
}

fn smoke_opts(steps: usize) -> TrainOpts {
    TrainOpts {
        steps,
        batch_size: 32,
        optim: OptimConfig { peak_lr: 2e-3, warmup_steps: 0, decay_half_life: 1e9, ..OptimConfig::default() },
        seed: 9,
    }
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut cfg = toy_config();
    cfg.init_std = 0.05;
    let batch = fixed_batch(&cfg);
    let mut p: Params<f32> = Params::init(&cfg, 1);
    let report = train(&mut p, batch.len(), &smoke_opts(50), |i, _| Ok(Some(batch[i].clone()))).unwrap();
    assert_eq!(report.losses.len(), 50);
    for w in report.losses.windows(2) {
        assert!(w[1] < w[0], "{:?}", report.losses);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = toy_config();
    let batch = fixed_batch(&cfg);
    let run = || {
        let mut p: Params<f32> = Params::init(&cfg, 1);
        let mut opts = smoke_opts(20);
        opts.batch_size = 8;
        train(&mut p, batch.len(), &opts, |i, _| Ok(Some(batch[i].clone()))).unwrap();
        p
    };
    assert_eq!(run(), run());
}

#[test]
fn closed_form_parameter_count() {
    for cfg in [small(2, 0, true, true), small(4, 4, false, false), ModelConfig::speaker(64, 4, 32)] {
        let p: Params<f32> = Params::zeros(&cfg);
        let summed: usize = p.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(summed, cfg.parameter_count());
        assert_eq!(p.parameter_count(), cfg.parameter_count());
    }
}
