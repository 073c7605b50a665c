//! Single-stage frame generation: every autoregressive step predicts all
//! `K` group codes of the next frame from one forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    batch_loss, forward_cached, head_accuracy, sample_top_k_filtered, train, Example, KvCache, ModelConfig, Params,
    Slot, TrainOpts, TrainReport,
};
use crate::tokens::{AcousticSequence, TokenSequence, FRAME_RATE_HZ};

/// Default style prompt: 3 s at 50 Hz.
pub const DEFAULT_PROMPT_FRAMES: usize = 150;

/// Semantic tokens `Y` with their acoustic frames `C`. The optional split
/// marks where a style prompt ends; training ignores it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakingExample {
    pub semantic: TokenSequence,
    pub acoustic: AcousticSequence,
    pub prompt_split: Option<usize>,
}

impl SpeakingExample {
    pub fn new(semantic: TokenSequence, acoustic: AcousticSequence) -> Self {
        SpeakingExample {
            semantic,
            acoustic,
            prompt_split: None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.acoustic.groups() != config.acoustic_groups {
            return Err(Error::GroupCount {
                utt_id: self.acoustic.utt_id.clone(),
                frame: 0,
                got: self.acoustic.groups(),
                expected: config.acoustic_groups,
            });
        }
        if self.acoustic.is_empty() {
            return Err(Error::EmptyInput(format!("utterance {:?} has no frames", self.acoustic.utt_id)));
        }
        if self.semantic.is_empty() {
            return Err(Error::EmptyUtterance {
                utt_id: self.semantic.utt_id.clone(),
            });
        }
        config.semantic_vocab.check(&self.semantic, false)?;
        self.acoustic.check_codebook(config.group_codebook)?;
        if let Some(split) = self.prompt_split {
            if split > self.acoustic.n_frames() {
                return Err(Error::Shape(format!(
                    "prompt split {split} beyond {} frames of {:?}",
                    self.acoustic.n_frames(),
                    self.acoustic.utt_id
                )));
            }
        }
        Ok(())
    }
}

fn frame_slot(frame: &[u32]) -> Slot {
    Slot::Frame(frame.into())
}

/// `[Y][sep][C][eos frame]`: the separator predicts the first frame, each
/// frame the next, and the last frame the all-eos frame. Only acoustic
/// targets are scored. `None` when the example exceeds the context.
pub fn speaking_layout(ex: &SpeakingExample, config: &ModelConfig) -> Result<Option<Example>> {
    ex.validate(config)?;
    let sep = config.semantic_vocab.separator().expect("semantic vocabulary has a separator");
    let k = config.acoustic_groups;
    let eos = config.group_codebook as u32;
    let n_sem = ex.semantic.len();
    let n_frames = ex.acoustic.n_frames();
    let len = n_sem + 1 + n_frames;
    if len > config.context_len {
        return Ok(None);
    }
    let mut inputs: Vec<Slot> = ex.semantic.tokens.iter().map(|&t| Slot::Token(t)).collect();
    inputs.push(Slot::Token(sep));
    inputs.extend(ex.acoustic.frames().map(frame_slot));
    let mut targets = vec![0u32; len * k];
    let mut loss_mask = vec![false; len];
    for t in 0..=n_frames {
        let pos = n_sem + t;
        loss_mask[pos] = true;
        let row = &mut targets[pos * k..(pos + 1) * k];
        if t < n_frames {
            row.copy_from_slice(ex.acoustic.frame(t));
        } else {
            row.iter_mut().for_each(|c| *c = eos);
        }
    }
    Ok(Some(Example {
        inputs,
        targets,
        loss_mask,
    }))
}

fn check_speaker_config(config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if !config.is_acoustic() || config.n_output_heads != config.acoustic_groups {
        return Err(Error::ModelConfig(
            "the speaker needs acoustic_groups > 0 and one output head per group".into(),
        ));
    }
    Ok(())
}

/// Continues training `params` on `corpus`.
pub fn train_generative_params(
    params: &mut Params<f32>,
    corpus: &[SpeakingExample],
    opts: &TrainOpts,
) -> Result<TrainReport> {
    let config = params.config.clone();
    check_speaker_config(&config)?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("speaker corpus is empty".into()));
    }
    for ex in corpus {
        ex.validate(&config)?;
    }
    train(params, corpus.len(), opts, |i, _| speaking_layout(&corpus[i], &config))
}

/// Fresh parameters (seeded from `opts.seed`) trained on `corpus`.
pub fn train_generative(
    corpus: &[SpeakingExample],
    config: &ModelConfig,
    opts: &TrainOpts,
) -> Result<(Params<f32>, TrainReport)> {
    check_speaker_config(config)?;
    let mut params = Params::init(config, opts.seed);
    let report = train_generative_params(&mut params, corpus, opts)?;
    Ok((params, report))
}

fn layouts(params: &Params<f32>, corpus: &[SpeakingExample]) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(corpus.len());
    for ex in corpus {
        if let Some(l) = speaking_layout(ex, &params.config)? {
            out.push(l);
        }
    }
    Ok(out)
}

/// Mean per-frame loss (summed over heads) on `corpus`.
pub fn speaking_loss(params: &Params<f32>, corpus: &[SpeakingExample]) -> Result<f64> {
    batch_loss(params, &layouts(params, corpus)?)
}

/// Teacher-forced argmax accuracy of each head.
pub fn speaking_accuracy(params: &Params<f32>, corpus: &[SpeakingExample]) -> Result<Vec<f64>> {
    head_accuracy(params, &layouts(params, corpus)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOpts {
    pub k: usize,
    pub temperature: f64,
    /// Prompts longer than this are used but logged.
    pub max_prompt_frames: usize,
    /// Generate exactly this many frames; eos is never sampled.
    pub n_frames: Option<usize>,
}

impl Default for GenerateOpts {
    fn default() -> Self {
        GenerateOpts {
            k: 10,
            temperature: 1.0,
            max_prompt_frames: DEFAULT_PROMPT_FRAMES,
            n_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// The continuation only; prompt frames are not repeated.
    pub frames: AcousticSequence,
    /// Autoregressive steps that emitted a frame.
    pub steps: usize,
    /// Every forward pass, including the one that emitted eos.
    pub forward_passes: usize,
    pub truncated: bool,
}

/// Frame cap for `n` semantic tokens: `1.5 n + 25`.
pub fn frame_cap(n: usize) -> usize {
    n + n.div_ceil(2) + 25
}

/// Generates frames for `y` after a style prompt. The context is
/// `[prompt_semantic ++ y][sep][prompt frames]`; with the prompt's own
/// semantic tokens in front, generated frame `j` shares a position id with
/// `y[j]`. Head 0 may end the utterance with eos; the other heads never
/// emit it.
pub fn generate<R: Rng + ?Sized>(
    params: &Params<f32>,
    y: &TokenSequence,
    prompt: &AcousticSequence,
    prompt_semantic: Option<&TokenSequence>,
    opts: &GenerateOpts,
    rng: &mut R,
) -> Result<Generation> {
    let cfg = &params.config;
    check_speaker_config(cfg)?;
    if y.is_empty() {
        return Err(Error::EmptyUtterance { utt_id: y.utt_id.clone() });
    }
    cfg.semantic_vocab.check(y, false)?;
    let k = cfg.acoustic_groups;
    if !prompt.is_empty() {
        if prompt.groups() != k {
            return Err(Error::GroupCount {
                utt_id: prompt.utt_id.clone(),
                frame: 0,
                got: prompt.groups(),
                expected: k,
            });
        }
        prompt.check_codebook(cfg.group_codebook)?;
    }
    if prompt.n_frames() > opts.max_prompt_frames {
        log::warn!(
            "prompt {:?} has {} frames, more than the {} configured",
            prompt.utt_id,
            prompt.n_frames(),
            opts.max_prompt_frames
        );
    }
    let mut semantic: Vec<u32> = Vec::new();
    if let Some(ps) = prompt_semantic {
        cfg.semantic_vocab.check(ps, false)?;
        semantic.extend(ps.tokens.iter().take(prompt.n_frames()));
    }
    semantic.extend_from_slice(&y.tokens);

    let sep = cfg.semantic_vocab.separator().expect("semantic vocabulary has a separator");
    let mut slots: Vec<Slot> = semantic.iter().map(|&t| Slot::Token(t)).collect();
    slots.push(Slot::Token(sep));
    slots.extend(prompt.frames().map(frame_slot));
    let context = cfg.context_len;
    if slots.len() >= context {
        return Err(Error::ContextOverflow {
            len: slots.len() + 1,
            context,
        });
    }
    let room = context - slots.len();
    let (cap, allow_eos) = match opts.n_frames {
        Some(n) => (n, false),
        None => (frame_cap(y.len()), true),
    };
    if cap > room && opts.n_frames.is_some() {
        return Err(Error::ContextOverflow {
            len: slots.len() + cap,
            context,
        });
    }
    let cap = cap.min(room);

    let eos = cfg.group_codebook as u32;
    let ban_eos = [eos];
    let hv = cfg.head_vocab();
    let mut out = AcousticSequence::new(y.utt_id.clone(), k);
    let mut truncated = allow_eos;
    let mut passes = 0usize;
    let mut steps = 0usize;
    if cap == 0 {
        return Ok(Generation {
            frames: out,
            steps,
            forward_passes: passes,
            truncated: false,
        });
    }
    let mut cache = KvCache::new(cfg.n_layers);
    let mut logits = forward_cached(params, &slots, &mut cache)?;
    passes += 1;
    let mut last = slots.len() - 1;
    let mut frame = vec![0u32; k];
    loop {
        for (h, code) in frame.iter_mut().enumerate() {
            let row = &logits[h][last * hv..(last + 1) * hv];
            let banned: &[u32] = if h == 0 && allow_eos { &[] } else { &ban_eos };
            *code = sample_top_k_filtered(row, opts.k, opts.temperature, banned, rng)?.id;
        }
        if frame[0] == eos {
            truncated = false;
            break;
        }
        out.push(&frame)?;
        steps += 1;
        if out.n_frames() >= cap {
            break;
        }
        logits = forward_cached(params, &[frame_slot(&frame)], &mut cache)?;
        passes += 1;
        last = 0;
    }
    if opts.n_frames.is_some() {
        truncated = false;
    }
    Ok(Generation {
        frames: out,
        steps,
        forward_passes: passes,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingScheme {
    /// One AR step per 50 Hz frame, all groups at once.
    SingleStage,
    /// 75 Hz residual codec: AR over the first quantizer, then 7 NAR passes.
    RvqTwoStage,
}

impl DecodingScheme {
    pub fn frame_rate_hz(self) -> usize {
        match self {
            DecodingScheme::SingleStage => FRAME_RATE_HZ,
            DecodingScheme::RvqTwoStage => 75,
        }
    }

    pub fn nar_passes(self) -> usize {
        match self {
            DecodingScheme::SingleStage => 0,
            DecodingScheme::RvqTwoStage => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub scheme: DecodingScheme,
    pub duration_s: f64,
    pub ar_steps: usize,
    pub nar_passes: usize,
}

/// Decoding steps needed for `duration_s` seconds of audio.
pub fn count_decoding_steps(duration_s: f64, scheme: DecodingScheme) -> Result<StepReport> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::Config(format!("duration {duration_s} must be positive")));
    }
    Ok(StepReport {
        scheme,
        duration_s,
        ar_steps: (scheme.frame_rate_hz() as f64 * duration_s).round() as usize,
        nar_passes: scheme.nar_passes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{forward, OptimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(groups: usize, codebook: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            context_len: 128,
            ..ModelConfig::speaker(8, groups, codebook)
        }
    }

    fn example(id: &str, groups: usize, n: usize) -> SpeakingExample {
        let sem = TokenSequence::new(id, (0..n as u32).map(|i| i % 8).collect());
        let frames: Vec<Vec<u32>> = (0..n).map(|i| (0..groups).map(|g| ((i + g) % 4) as u32).collect()).collect();
        SpeakingExample::new(sem, AcousticSequence::from_frames(id, groups, &frames).unwrap())
    }

    #[test]
    fn layout_scores_frames_and_eos() {
        let cfg = tiny(2, 4);
        let ex = example("a", 2, 3);
        let l = speaking_layout(&ex, &cfg).unwrap().unwrap();
        assert_eq!(l.len(), 3 + 1 + 3);
        assert_eq!(l.loss_mask, vec![false, false, false, true, true, true, true]);
        assert_eq!(&l.targets[3 * 2..4 * 2], ex.acoustic.frame(0));
        assert_eq!(&l.targets[6 * 2..], &[4, 4]);
    }

    #[test]
    fn group_mismatch_names_utterance() {
        let cfg = tiny(2, 4);
        let err = speaking_layout(&example("bad-utt", 3, 2), &cfg).unwrap_err();
        assert!(matches!(err, Error::GroupCount { ref utt_id, got: 3, expected: 2, .. } if utt_id == "bad-utt"));
    }

    #[test]
    fn initial_loss_is_k_log_vocab() {
        for (groups, codebook) in [(1usize, 8usize), (4, 16)] {
            let cfg = ModelConfig { init_std: 0.002, ..tiny(groups, codebook) };
            let p = Params::init(&cfg, 3);
            let corpus: Vec<_> = (0..4).map(|i| example(&format!("u{i}"), groups, 6)).collect();
            let loss = speaking_loss(&p, &corpus).unwrap();
            let expect = groups as f64 * ((codebook + 1) as f64).ln();
            assert!((loss - expect).abs() < 0.02 * groups as f64, "{loss} vs {expect}");
        }
    }

    #[test]
    fn single_group_loss_is_token_cross_entropy() {
        let cfg = tiny(1, 4);
        let p = Params::init(&cfg, 5);
        let ex = example("k1", 1, 5);
        let l = speaking_layout(&ex, &cfg).unwrap().unwrap();
        let logits = forward(&p, &l.inputs).unwrap();
        let hv = cfg.head_vocab();
        let mut nll = 0.0;
        let mut n = 0;
        let mut next: Vec<u32> = ex.acoustic.frames().map(|f| f[0]).collect();
        next.push(4);
        for (t, &target) in next.iter().enumerate() {
            let row = &logits[0][(5 + t) * hv..(6 + t) * hv];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
            nll += lse - row[target as usize] as f64;
            n += 1;
        }
        let got = speaking_loss(&p, &[ex]).unwrap();
        assert!((got - nll / n as f64).abs() < 1e-5, "{got}");
    }

    #[test]
    fn generation_counts_and_shapes() {
        let cfg = tiny(4, 5);
        let p = Params::init(&cfg, 9);
        let y = TokenSequence::new("y", vec![1, 2, 3, 4]);
        let prompt = example("p", 4, 4).acoustic;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let opts = GenerateOpts { k: 3, ..GenerateOpts::default() };
            let g = generate(&p, &y, &prompt, None, &opts, &mut r).unwrap();
            assert_eq!(g.steps, g.frames.n_frames());
            assert_eq!(g.forward_passes, g.steps + usize::from(!g.truncated));
            assert!(g.frames.n_frames() <= frame_cap(4));
            assert!(g.frames.frames().all(|f| f.len() == 4 && f.iter().all(|&c| c < 5)));
        }
        let opts = GenerateOpts { k: 3, n_frames: Some(50), ..GenerateOpts::default() };
        let g = generate(&p, &y, &AcousticSequence::new("empty", 4), None, &opts, &mut rng).unwrap();
        assert_eq!((g.steps, g.frames.n_frames(), g.forward_passes), (50, 50, 50));
    }

    #[test]
    fn cap_formula() {
        assert_eq!(frame_cap(0), 25);
        assert_eq!(frame_cap(10), 40);
        assert_eq!(frame_cap(3), 30);
    }

    #[test]
    fn step_accounting() {
        let s = count_decoding_steps(1.0, DecodingScheme::SingleStage).unwrap();
        assert_eq!((s.ar_steps, s.nar_passes), (50, 0));
        let r = count_decoding_steps(1.0, DecodingScheme::RvqTwoStage).unwrap();
        assert_eq!((r.ar_steps, r.nar_passes), (75, 7));
        assert_eq!(count_decoding_steps(0.2, DecodingScheme::SingleStage).unwrap().ar_steps, 10);
        assert!(count_decoding_steps(0.0, DecodingScheme::SingleStage).is_err());
        assert!(count_decoding_steps(f64::NAN, DecodingScheme::RvqTwoStage).is_err());
    }

    #[test]
    fn learns_a_fixed_mapping() {
        let cfg = tiny(2, 4);
        let corpus: Vec<_> = (0..8).map(|i| example(&format!("u{i}"), 2, 6)).collect();
        let opts = TrainOpts {
            steps: 150,
            batch_size: 4,
            optim: OptimConfig { peak_lr: 1e-2, warmup_steps: 10, ..OptimConfig::default() },
            seed: 0,
        };
        let (p, r) = train_generative(&corpus, &cfg, &opts).unwrap();
        assert!(r.tail_loss(10).unwrap() < 0.5 * r.initial_loss().unwrap());
        assert!(speaking_accuracy(&p, &corpus).unwrap().iter().all(|&a| a > 0.9));
    }
}
