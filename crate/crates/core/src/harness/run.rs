//! Stages of a run. File-based stages read and write the output directory;
//! the in-memory core (`train_all`, `evaluate`, the ablation arms) is shared
//! by `pipeline` and `ablation` so they compute exactly what the chained
//! stages compute.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{RunConfig, SelectorKind};
use crate::converter::{
    convert_corpus, ensure_same_vocab, finetune, pair_loss, pretrain, reconstruction_loss, utterance_rng, Conversion,
    ParallelPair,
};
use crate::corpus::{
    align_by_id, align_token_corpora, read_acoustic_corpus, read_token_corpus, write_acoustic_corpus,
    write_token_corpus,
};
use crate::error::{Error, Result};
use crate::neural::{checkpoint, gradcheck, ModelConfig, Params, TrainReport};
use crate::speaker::{
    count_decoding_steps, generate, speaking_accuracy, speaking_loss, train_generative, train_generative_params,
    DecodingScheme, GenerateOpts, Generation, SpeakingExample,
};
use crate::synthcorpus::{Benchmark, SyntheticCodec};
use crate::tokens::{hypothesis_lcsr, lcsr, AcousticSequence, TokenSequence};

pub const TARGET: &str = "target.txt";
pub const TARGET_ACOUSTIC: &str = "target_acoustic.txt";
pub const PAIR_SOURCE: &str = "train_source.txt";
pub const PAIR_TARGET: &str = "train_target.txt";
pub const PAIR_TARGET_ACOUSTIC: &str = "train_target_acoustic.txt";
pub const TEST_SOURCE: &str = "test_source.txt";
pub const TEST_REFERENCE: &str = "test_reference.txt";
pub const TEST_SOURCE_ACOUSTIC: &str = "test_source_acoustic.txt";
pub const TEST_REFERENCE_ACOUSTIC: &str = "test_reference_acoustic.txt";
pub const MANIFEST: &str = "manifest.json";
pub const CONVERTER_INIT: &str = "converter_pretrained.ckpt";
pub const CONVERTER: &str = "converter.ckpt";
pub const SPEAKER: &str = "speaker.ckpt";
pub const CONVERTED: &str = "converted.txt";
pub const CANDIDATES: &str = "candidates.json";
pub const GENERATED: &str = "generated_acoustic.txt";
pub const GENERATION: &str = "generation.json";

const TAIL: usize = 50;

fn input(cfg: &RunConfig, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let p = cfg.resolve(configured, name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingPath(p))
    }
}

fn optional_input(cfg: &RunConfig, configured: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    let p = cfg.resolve(configured, name);
    p.exists().then_some(p)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn train_summary(r: &TrainReport) -> Value {
    json!({
        "steps": r.steps,
        "initial_loss": r.initial_loss(),
        "tail_loss": r.tail_loss(TAIL),
        "skipped_steps": r.skipped_steps,
        "skipped_examples": r.skipped_examples,
        "optimizer": r.optimizer,
    })
}

fn load_params(path: &Path, expected: &ModelConfig) -> Result<Params<f32>> {
    let (p, _) = checkpoint::load(path)?;
    ensure_same_vocab(&expected.semantic_vocab, &p.config.semantic_vocab)?;
    if p.config.acoustic_groups != expected.acoustic_groups || p.config.group_codebook != expected.group_codebook {
        return Err(Error::VocabularyMismatch(format!(
            "checkpoint {} has {} groups of {} codes, config expects {} of {}",
            path.display(),
            p.config.acoustic_groups,
            p.config.group_codebook,
            expected.acoustic_groups,
            expected.group_codebook
        )));
    }
    Ok(p)
}

fn save_params(path: &Path, params: &Params<f32>, role: &str) -> Result<()> {
    checkpoint::save(path, params, json!({ "role": role }))
}

fn pairs_from(sources: Vec<TokenSequence>, targets: &[TokenSequence]) -> Result<Vec<ParallelPair>> {
    Ok(align_token_corpora(&sources, targets)?
        .into_iter()
        .map(|(x, y)| ParallelPair::new(x, y))
        .collect())
}

fn speaking_examples(semantic: &[TokenSequence], acoustic: &[AcousticSequence]) -> Result<Vec<SpeakingExample>> {
    Ok(align_by_id(semantic, acoustic, |s| &s.utt_id, |a| &a.utt_id)?
        .into_iter()
        .map(|(s, a)| SpeakingExample::new(s, a))
        .collect())
}

/// Writes every benchmark corpus and the manifest into the output directory.
pub fn write_benchmark(cfg: &RunConfig, b: &Benchmark) -> Result<Value> {
    let targets: Vec<TokenSequence> = b.train_pairs.iter().map(|p| p.target.clone()).collect();
    write_token_corpus(out_path(cfg, TARGET)?, &b.target_corpus)?;
    write_acoustic_corpus(out_path(cfg, TARGET_ACOUSTIC)?, &b.target_acoustic()?)?;
    write_token_corpus(
        out_path(cfg, PAIR_SOURCE)?,
        &b.train_pairs.iter().map(|p| p.source.clone()).collect::<Vec<_>>(),
    )?;
    write_token_corpus(out_path(cfg, PAIR_TARGET)?, &targets)?;
    write_acoustic_corpus(out_path(cfg, PAIR_TARGET_ACOUSTIC)?, &b.train_target_acoustic()?)?;
    write_token_corpus(
        out_path(cfg, TEST_SOURCE)?,
        &b.test_pairs.iter().map(|p| p.source.clone()).collect::<Vec<_>>(),
    )?;
    write_token_corpus(
        out_path(cfg, TEST_REFERENCE)?,
        &b.test_pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>(),
    )?;
    write_acoustic_corpus(out_path(cfg, TEST_SOURCE_ACOUSTIC)?, &b.test_source_acoustic()?)?;
    write_acoustic_corpus(out_path(cfg, TEST_REFERENCE_ACOUSTIC)?, &b.test_reference_acoustic()?)?;
    let manifest = b.manifest()?;
    write_json(&out_path(cfg, MANIFEST)?, &manifest)?;
    Ok(json!({
        "manifest": manifest,
        "test_styles": b.test_styles,
        "train_styles": b.train_styles,
        "source_reference_lcsr": manifest.source_reference_lcsr,
    }))
}

/// `synth`: builds the benchmark and writes its corpora.
pub fn synth(cfg: &RunConfig) -> Result<Value> {
    let b = Benchmark::build(&cfg.benchmark)?;
    write_benchmark(cfg, &b)
}

fn heldout_reconstruction(cfg: &RunConfig, params: &Params<f32>, heldout: &[TokenSequence]) -> Result<f64> {
    reconstruction_loss(params, heldout, &cfg.corruption_spec(), cfg.eval.reconstruction_seed)
}

/// Pre-trains a converter on `corpus`; reports held-out reconstruction loss
/// before and after when `heldout` is given.
pub fn pretrain_core(
    cfg: &RunConfig,
    corpus: &[TokenSequence],
    heldout: Option<&[TokenSequence]>,
) -> Result<(Params<f32>, Value)> {
    let model = cfg.converter_model();
    let spec = cfg.corruption_spec();
    let before = match heldout {
        Some(h) => Some(heldout_reconstruction(cfg, &Params::init(&model, cfg.pretrain.seed), h)?),
        None => None,
    };
    let (params, report) = pretrain(corpus, &spec, &model, &cfg.pretrain)?;
    let after = match heldout {
        Some(h) => Some(heldout_reconstruction(cfg, &params, h)?),
        None => None,
    };
    let reduction = before.zip(after).map(|(b, a)| 1.0 - a / b);
    Ok((
        params,
        json!({
            "train": train_summary(&report),
            "heldout_loss_initial": before,
            "heldout_loss_final": after,
            "heldout_reduction": reduction,
        }),
    ))
}

/// `pretrain`: target corpus in, pre-trained converter checkpoint out.
pub fn pretrain_stage(cfg: &RunConfig) -> Result<Value> {
    let corpus = read_token_corpus(input(cfg, &cfg.paths.target_corpus, TARGET)?)?;
    let heldout = match optional_input(cfg, &cfg.paths.test_reference, TEST_REFERENCE) {
        Some(p) => Some(read_token_corpus(p)?),
        None => None,
    };
    let (params, results) = pretrain_core(cfg, &corpus, heldout.as_deref())?;
    save_params(&out_path(cfg, CONVERTER_INIT)?, &params, "converter_pretrained")?;
    Ok(results)
}

/// Fine-tunes a copy of `init` on `pairs`.
pub fn finetune_core(
    cfg: &RunConfig,
    init: &Params<f32>,
    pairs: &[ParallelPair],
    heldout: Option<&[ParallelPair]>,
) -> Result<(Params<f32>, Value)> {
    let mut params = init.clone();
    let report = finetune(&mut params, pairs, &cfg.finetune)?;
    let heldout_loss = match heldout {
        Some(h) => Some(pair_loss(&params, h)?),
        None => None,
    };
    Ok((
        params,
        json!({ "train": train_summary(&report), "heldout_pair_loss": heldout_loss }),
    ))
}

/// `finetune`: pre-trained checkpoint plus parallel pairs in, converter out.
pub fn finetune_stage(cfg: &RunConfig) -> Result<Value> {
    let init = load_params(
        &input(cfg, &cfg.paths.converter_init, CONVERTER_INIT)?,
        &cfg.converter_model(),
    )?;
    let sources = read_token_corpus(input(cfg, &cfg.paths.pair_source, PAIR_SOURCE)?)?;
    let targets = read_token_corpus(input(cfg, &cfg.paths.pair_target, PAIR_TARGET)?)?;
    let pairs = pairs_from(sources, &targets)?;
    let heldout = match (
        optional_input(cfg, &cfg.paths.test_source, TEST_SOURCE),
        optional_input(cfg, &cfg.paths.test_reference, TEST_REFERENCE),
    ) {
        (Some(s), Some(r)) => Some(pairs_from(read_token_corpus(s)?, &read_token_corpus(r)?)?),
        _ => None,
    };
    let (params, results) = finetune_core(cfg, &init, &pairs, heldout.as_deref())?;
    save_params(&out_path(cfg, CONVERTER)?, &params, "converter")?;
    Ok(results)
}

/// Trains the speaker; reports teacher-forced held-out accuracy when given.
pub fn train_speaker_core(
    cfg: &RunConfig,
    corpus: &[SpeakingExample],
    heldout: Option<&[SpeakingExample]>,
) -> Result<(Params<f32>, Value)> {
    let (mut params, report) = train_generative(corpus, &cfg.speaker_model(), &cfg.speaker_train)?;
    params.config.dropout = 0.0;
    let (acc, loss) = match heldout {
        Some(h) => (Some(speaking_accuracy(&params, h)?), Some(speaking_loss(&params, h)?)),
        None => (None, None),
    };
    Ok((
        params,
        json!({ "train": train_summary(&report), "heldout_head_accuracy": acc, "heldout_loss": loss }),
    ))
}

/// `train-speaker`: target semantic and acoustic corpora in, speaker out.
pub fn train_speaker_stage(cfg: &RunConfig) -> Result<Value> {
    let semantic = read_token_corpus(input(cfg, &cfg.paths.target_corpus, TARGET)?)?;
    let acoustic = read_acoustic_corpus(input(cfg, &cfg.paths.target_acoustic, TARGET_ACOUSTIC)?)?;
    let corpus = speaking_examples(&semantic, &acoustic)?;
    let heldout = match (
        optional_input(cfg, &cfg.paths.test_reference, TEST_REFERENCE),
        optional_input(cfg, &cfg.paths.test_reference_acoustic, TEST_REFERENCE_ACOUSTIC),
    ) {
        (Some(s), Some(a)) => Some(speaking_examples(&read_token_corpus(s)?, &read_acoustic_corpus(a)?)?),
        _ => None,
    };
    let (params, results) = train_speaker_core(cfg, &corpus, heldout.as_deref())?;
    save_params(&out_path(cfg, SPEAKER)?, &params, "speaker")?;
    Ok(results)
}

/// Converts `sources`; references are required by reference selection.
pub fn convert_core(
    cfg: &RunConfig,
    params: &Params<f32>,
    sources: &[TokenSequence],
    references: Option<&[TokenSequence]>,
) -> Result<Vec<Conversion>> {
    let refs = match cfg.decode.selector {
        SelectorKind::ReferenceLcsr => Some(references.ok_or_else(|| {
            Error::Config("decode.selector = reference_lcsr needs a reference corpus".into())
        })?),
        SelectorKind::AvgLoglik => None,
    };
    convert_corpus(params, sources, refs, &cfg.decode.opts(), cfg.decode.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub utt_id: String,
    pub candidates: Vec<crate::converter::Candidate>,
    pub selected: usize,
    pub truncated: bool,
}

fn candidate_reports(convs: &[Conversion]) -> Vec<CandidateReport> {
    convs
        .iter()
        .map(|c| CandidateReport {
            utt_id: c.output.utt_id.clone(),
            candidates: c.candidates.clone(),
            selected: c.selected,
            truncated: c.truncated,
        })
        .collect()
}

/// Mean of `hypothesis_lcsr` over aligned pairs.
pub fn mean_output_lcsr(outputs: &[TokenSequence], references: &[TokenSequence]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != references.len() {
        return Err(Error::Config(format!(
            "{} outputs against {} references",
            outputs.len(),
            references.len()
        )));
    }
    let mut total = 0.0;
    for (h, r) in outputs.iter().zip(references) {
        total += hypothesis_lcsr(h, r)?;
    }
    Ok(total / outputs.len() as f64)
}

fn mean_source_lcsr(sources: &[TokenSequence], references: &[TokenSequence]) -> Result<f64> {
    let mut total = 0.0;
    for (s, r) in sources.iter().zip(references) {
        total += lcsr(s, r)?;
    }
    Ok(total / sources.len() as f64)
}

/// `convert`: converter plus held-out sources in, converted corpus out.
pub fn convert_stage(cfg: &RunConfig) -> Result<Value> {
    let params = load_params(&input(cfg, &cfg.paths.converter, CONVERTER)?, &cfg.converter_model())?;
    let sources = read_token_corpus(input(cfg, &cfg.paths.test_source, TEST_SOURCE)?)?;
    let references = match optional_input(cfg, &cfg.paths.test_reference, TEST_REFERENCE) {
        Some(p) => {
            let refs = read_token_corpus(p)?;
            Some(align_token_corpora(&sources, &refs)?.into_iter().map(|(_, r)| r).collect::<Vec<_>>())
        }
        None => None,
    };
    let convs = convert_core(cfg, &params, &sources, references.as_deref())?;
    let outputs: Vec<TokenSequence> = convs.iter().map(|c| c.output.clone()).collect();
    write_token_corpus(out_path(cfg, CONVERTED)?, &outputs)?;
    write_json(&out_path(cfg, CANDIDATES)?, &candidate_reports(&convs))?;
    let (converted, baseline) = match &references {
        Some(r) => (Some(mean_output_lcsr(&outputs, r)?), Some(mean_source_lcsr(&sources, r)?)),
        None => (None, None),
    };
    Ok(json!({
        "utterances": outputs.len(),
        "truncated": convs.iter().filter(|c| c.truncated).count(),
        "converted_lcsr": converted,
        "source_reference_lcsr": baseline,
    }))
}

/// Voices `inputs[i]` after the first frames of `prompts[i]`, whose own
/// semantic tokens `prompt_semantic[i]` lead the context.
pub fn speak_core(
    cfg: &RunConfig,
    params: &Params<f32>,
    inputs: &[TokenSequence],
    prompts: Option<&[AcousticSequence]>,
    prompt_semantic: Option<&[TokenSequence]>,
) -> Result<Vec<Generation>> {
    let opts: GenerateOpts = cfg.generate.opts();
    let groups = params.config.acoustic_groups;
    inputs
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let prompt = match prompts {
                Some(p) => p[i].prefix(cfg.generate.prompt_frames),
                None => AcousticSequence::new(format!("{}-prompt", y.utt_id), groups),
            };
            let ps = prompt_semantic.map(|s| &s[i]);
            generate(params, y, &prompt, ps, &opts, &mut utterance_rng(cfg.generate.seed, i))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub utt_id: String,
    pub frames: usize,
    pub steps: usize,
    pub forward_passes: usize,
    pub truncated: bool,
}

fn generation_reports(gens: &[Generation]) -> Vec<GenerationReport> {
    gens.iter()
        .map(|g| GenerationReport {
            utt_id: g.frames.utt_id.clone(),
            frames: g.frames.n_frames(),
            steps: g.steps,
            forward_passes: g.forward_passes,
            truncated: g.truncated,
        })
        .collect()
}

fn generation_totals(gens: &[Generation]) -> Value {
    json!({
        "utterances": gens.len(),
        "frames": gens.iter().map(|g| g.frames.n_frames()).sum::<usize>(),
        "steps": gens.iter().map(|g| g.steps).sum::<usize>(),
        "forward_passes": gens.iter().map(|g| g.forward_passes).sum::<usize>(),
        "truncated": gens.iter().filter(|g| g.truncated).count(),
    })
}

/// `speak`: speaker plus a semantic corpus (and optional prompts) in,
/// acoustic corpus out.
pub fn speak_stage(cfg: &RunConfig) -> Result<Value> {
    let params = load_params(&input(cfg, &cfg.paths.speaker, SPEAKER)?, &cfg.speaker_model())?;
    let inputs = read_token_corpus(input(cfg, &cfg.paths.speak_input, CONVERTED)?)?;
    let prompts = match optional_input(cfg, &cfg.paths.test_source_acoustic, TEST_SOURCE_ACOUSTIC) {
        Some(p) => {
            let a = read_acoustic_corpus(p)?;
            Some(align_by_id(&inputs, &a, |s| &s.utt_id, |a| &a.utt_id)?.into_iter().map(|(_, a)| a).collect::<Vec<_>>())
        }
        None => None,
    };
    let prompt_semantic = match (&prompts, optional_input(cfg, &cfg.paths.test_source, TEST_SOURCE)) {
        (Some(_), Some(p)) => {
            let s = read_token_corpus(p)?;
            Some(align_token_corpora(&inputs, &s)?.into_iter().map(|(_, s)| s).collect::<Vec<_>>())
        }
        _ => None,
    };
    let gens = speak_core(cfg, &params, &inputs, prompts.as_deref(), prompt_semantic.as_deref())?;
    let frames: Vec<AcousticSequence> = gens.iter().map(|g| g.frames.clone()).collect();
    write_acoustic_corpus(out_path(cfg, GENERATED)?, &frames)?;
    write_json(&out_path(cfg, GENERATION)?, &generation_reports(&gens))?;
    Ok(generation_totals(&gens))
}

/// `eval-lcsr`: mean LCSR of a hypothesis corpus against references
/// matched by utterance id.
pub fn eval_lcsr(hypothesis: &Path, reference: &Path) -> Result<Value> {
    for p in [hypothesis, reference] {
        if !p.exists() {
            return Err(Error::MissingPath(p.to_path_buf()));
        }
    }
    let hyp = read_token_corpus(hypothesis)?;
    let refs = read_token_corpus(reference)?;
    let pairs = align_token_corpora(&hyp, &refs)?;
    let mut per = Vec::with_capacity(pairs.len());
    for (h, r) in &pairs {
        per.push(json!({ "utt_id": h.utt_id, "lcsr": hypothesis_lcsr(h, r)? }));
    }
    let (hs, rs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(json!({
        "utterances": hs.len(),
        "mean_lcsr": mean_output_lcsr(&hs, &rs)?,
        "per_utterance": per,
    }))
}

/// `bench-steps`: analytic step counts, plus an instrumented single-stage
/// generation of the same length on an untrained speaker.
pub fn bench_steps(cfg: &RunConfig, duration_s: f64, schemes: &[DecodingScheme]) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for &s in schemes {
        let r = count_decoding_steps(duration_s, s)?;
        let mut entry = serde_json::to_value(&r)?;
        if s == DecodingScheme::SingleStage {
            entry["measured"] = measure_single_stage(cfg, r.ar_steps)?;
        }
        out.insert(serde_json::to_value(s)?.as_str().unwrap_or_default().to_string(), entry);
    }
    Ok(Value::Object(out))
}

fn measure_single_stage(cfg: &RunConfig, frames: usize) -> Result<Value> {
    let mut model = cfg.speaker_model();
    model.context_len = model.context_len.max(frames + 2);
    let params: Params<f32> = Params::init(&model, cfg.generate.seed);
    let y = TokenSequence::new("bench", vec![0]);
    let prompt = AcousticSequence::new("bench-prompt", model.acoustic_groups);
    let opts = GenerateOpts {
        n_frames: Some(frames),
        k: cfg.generate.k.min(model.group_codebook),
        ..cfg.generate.opts()
    };
    let g = generate(&params, &y, &prompt, None, &opts, &mut utterance_rng(cfg.generate.seed, 0))?;
    Ok(json!({
        "frames": g.frames.n_frames(),
        "ar_steps": g.steps,
        "forward_passes": g.forward_passes,
    }))
}

/// `grad-check`: finite differences on the small two-layer model.
pub fn grad_check(seed: u64) -> Result<Value> {
    Ok(serde_json::to_value(gradcheck::run_default(seed)?)?)
}

/// Everything the pipeline trains.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub benchmark: Benchmark,
    pub pretrained: Params<f32>,
    pub converter: Params<f32>,
    pub speaker: Params<f32>,
    pub training: Value,
    /// Wall-clock seconds per training stage. Logged, never written to a
    /// report.
    pub seconds: BTreeMap<String, f64>,
}

fn test_sources(b: &Benchmark) -> Vec<TokenSequence> {
    b.test_pairs.iter().map(|p| p.source.clone()).collect()
}

fn test_references(b: &Benchmark) -> Vec<TokenSequence> {
    b.test_pairs.iter().map(|p| p.target.clone()).collect()
}

/// Builds the benchmark and trains converter and speaker on it.
pub fn train_all(cfg: &RunConfig) -> Result<Artifacts> {
    let mut seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str| {
        let t = clock.elapsed().as_secs_f64();
        log::info!("{name} took {t:.1} s");
        seconds.insert(name.to_string(), t);
        clock = Instant::now();
    };
    let b = Benchmark::build(&cfg.benchmark)?;
    let refs = test_references(&b);
    lap("synth");
    let (pretrained, pre) = pretrain_core(cfg, &b.target_corpus, Some(&refs))?;
    lap("pretrain");
    let (converter, fine) = finetune_core(cfg, &pretrained, &b.train_pairs, Some(&b.test_pairs))?;
    lap("finetune");
    let corpus = speaking_examples(&b.target_corpus, &b.target_acoustic()?)?;
    let heldout = speaking_examples(&refs, &b.test_reference_acoustic()?)?;
    let (speaker, spk) = train_speaker_core(cfg, &corpus, Some(&heldout))?;
    lap("train_speaker");
    Ok(Artifacts {
        benchmark: b,
        pretrained,
        converter,
        speaker,
        training: json!({ "pretrain": pre, "finetune": fine, "train_speaker": spk }),
        seconds,
    })
}

/// Content and style of generated speech, read back through the codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechScore {
    /// Mean LCSR of the decoded content against the references.
    pub reference_lcsr: f64,
    /// Mean LCSR of the decoded content against the conditioning tokens.
    pub conditioning_lcsr: f64,
    /// Fraction of frames decoding to the prompt speaker's style.
    pub style_accuracy: f64,
    pub frames: usize,
    pub truncated: usize,
}

pub fn score_speech(
    codec: &SyntheticCodec,
    gens: &[Generation],
    conditioning: &[TokenSequence],
    references: &[TokenSequence],
    styles: &[usize],
) -> Result<SpeechScore> {
    let mut decoded = Vec::with_capacity(gens.len());
    let (mut hits, mut frames) = (0usize, 0usize);
    for (g, &s) in gens.iter().zip(styles) {
        let (tokens, votes) = codec.decode(&g.frames);
        hits += votes.get(s).copied().unwrap_or(0);
        frames += g.frames.n_frames();
        decoded.push(tokens);
    }
    Ok(SpeechScore {
        reference_lcsr: mean_output_lcsr(&decoded, references)?,
        conditioning_lcsr: mean_output_lcsr(&decoded, conditioning)?,
        style_accuracy: if frames == 0 { 0.0 } else { hits as f64 / frames as f64 },
        frames,
        truncated: gens.iter().filter(|g| g.truncated).count(),
    })
}

/// Held-out results of one converter/speaker pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub source_reference_lcsr: f64,
    pub converted_lcsr: f64,
    pub uplift: f64,
    pub converted_truncated: usize,
    /// Speech generated from the converted tokens.
    pub speech: SpeechScore,
    /// Speech generated from the references themselves.
    pub speaker_oracle: SpeechScore,
}

/// Converts the held-out sources, voices the result with each source's
/// prompt, and scores both stages.
pub fn evaluate(cfg: &RunConfig, b: &Benchmark, converter: &Params<f32>, speaker: &Params<f32>) -> Result<(Evaluation, Vec<Conversion>, Vec<Generation>)> {
    let sources = test_sources(b);
    let refs = test_references(b);
    let convs = convert_core(cfg, converter, &sources, Some(&refs))?;
    let outputs: Vec<TokenSequence> = convs.iter().map(|c| c.output.clone()).collect();
    let baseline = mean_source_lcsr(&sources, &refs)?;
    let converted = mean_output_lcsr(&outputs, &refs)?;
    let prompts = b.test_source_acoustic()?;
    let gens = speak_core(cfg, speaker, &outputs, Some(&prompts), Some(&sources))?;
    let speech = score_speech(&b.codec, &gens, &outputs, &refs, &b.test_styles)?;
    let oracle_gens = speak_core(cfg, speaker, &refs, Some(&prompts), Some(&sources))?;
    let speaker_oracle = score_speech(&b.codec, &oracle_gens, &refs, &refs, &b.test_styles)?;
    Ok((
        Evaluation {
            source_reference_lcsr: baseline,
            converted_lcsr: converted,
            uplift: converted - baseline,
            converted_truncated: convs.iter().filter(|c| c.truncated).count(),
            speech,
            speaker_oracle,
        },
        convs,
        gens,
    ))
}

/// `pipeline`: synth, pretrain, finetune, train-speaker, convert, speak and
/// evaluate, writing every intermediate artifact.
pub fn pipeline(cfg: &RunConfig) -> Result<(Value, Artifacts)> {
    let art = train_all(cfg)?;
    let bench = write_benchmark(cfg, &art.benchmark)?;
    save_params(&out_path(cfg, CONVERTER_INIT)?, &art.pretrained, "converter_pretrained")?;
    save_params(&out_path(cfg, CONVERTER)?, &art.converter, "converter")?;
    save_params(&out_path(cfg, SPEAKER)?, &art.speaker, "speaker")?;
    let (eval, convs, gens) = evaluate(cfg, &art.benchmark, &art.converter, &art.speaker)?;
    let outputs: Vec<TokenSequence> = convs.iter().map(|c| c.output.clone()).collect();
    write_token_corpus(out_path(cfg, CONVERTED)?, &outputs)?;
    write_json(&out_path(cfg, CANDIDATES)?, &candidate_reports(&convs))?;
    let frames: Vec<AcousticSequence> = gens.iter().map(|g| g.frames.clone()).collect();
    write_acoustic_corpus(out_path(cfg, GENERATED)?, &frames)?;
    write_json(&out_path(cfg, GENERATION)?, &generation_reports(&gens))?;
    let results = json!({
        "benchmark": bench["manifest"],
        "training": art.training,
        "generation": generation_totals(&gens),
        "evaluation": eval,
    });
    Ok((results, art))
}

/// One arm of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// Held-out LCSR of the decoded output speech against the references.
    pub lcsr: Option<f64>,
    /// Held-out LCSR of the converted tokens, for arms that convert.
    pub converted_lcsr: Option<f64>,
    pub error: Option<String>,
}

impl Arm {
    fn from(name: &str, r: Result<(f64, Option<f64>)>) -> Self {
        match r {
            Ok((lcsr, converted)) => Arm {
                name: name.into(),
                lcsr: Some(lcsr),
                converted_lcsr: converted,
                error: None,
            },
            Err(e) => Arm {
                name: name.into(),
                lcsr: None,
                converted_lcsr: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub source_reference_lcsr: f64,
    pub full: Arm,
    pub no_pretrain: Arm,
    pub no_decoupling: Arm,
    pub full_beats_no_pretrain: Option<bool>,
    pub full_beats_no_decoupling: Option<bool>,
    pub no_decoupling_below_source: Option<bool>,
}

/// Arm (B): the converter fine-tuned from a fresh initialization.
pub fn no_pretrain_converter(cfg: &RunConfig, b: &Benchmark) -> Result<Params<f32>> {
    let init = Params::init(&cfg.converter_model(), cfg.pretrain.seed);
    Ok(finetune_core(cfg, &init, &b.train_pairs, None)?.0)
}

/// Arm (C): the speaker fine-tuned directly on source-accent tokens paired
/// with target-accent speech, with the fine-tuning schedule of the
/// converter.
pub fn no_decoupling_speaker(cfg: &RunConfig, b: &Benchmark, speaker: &Params<f32>) -> Result<Params<f32>> {
    let sources: Vec<TokenSequence> = b.train_pairs.iter().map(|p| p.source.clone()).collect();
    let corpus: Vec<SpeakingExample> = sources
        .into_iter()
        .zip(b.train_target_acoustic()?)
        .map(|(x, c)| SpeakingExample::new(x, c))
        .collect();
    let mut params = speaker.clone();
    train_generative_params(&mut params, &corpus, &cfg.finetune)?;
    Ok(params)
}

fn full_arm(cfg: &RunConfig, b: &Benchmark, converter: &Params<f32>, speaker: &Params<f32>) -> Result<(f64, Option<f64>)> {
    let (e, _, _) = evaluate(cfg, b, converter, speaker)?;
    Ok((e.speech.reference_lcsr, Some(e.converted_lcsr)))
}

fn direct_arm(cfg: &RunConfig, b: &Benchmark, speaker: &Params<f32>) -> Result<(f64, Option<f64>)> {
    let sources = test_sources(b);
    let refs = test_references(b);
    let prompts = b.test_source_acoustic()?;
    let gens = speak_core(cfg, speaker, &sources, Some(&prompts), Some(&sources))?;
    Ok((score_speech(&b.codec, &gens, &sources, &refs, &b.test_styles)?.reference_lcsr, None))
}

/// Runs arms (B) and (C) against the trained artifacts; arm (A) is the
/// artifacts themselves. A failing arm is reported, not propagated.
pub fn ablation_with(cfg: &RunConfig, art: &Artifacts) -> Result<Ablation> {
    let b = &art.benchmark;
    let full = Arm::from("full", full_arm(cfg, b, &art.converter, &art.speaker));
    let no_pretrain = Arm::from(
        "no_pretrain",
        no_pretrain_converter(cfg, b).and_then(|c| full_arm(cfg, b, &c, &art.speaker)),
    );
    let no_decoupling = Arm::from(
        "no_decoupling",
        no_decoupling_speaker(cfg, b, &art.speaker).and_then(|s| direct_arm(cfg, b, &s)),
    );
    let baseline = b.baseline_lcsr()?;
    let gt = |a: &Arm, o: &Arm| a.lcsr.zip(o.lcsr).map(|(x, y)| x > y);
    Ok(Ablation {
        source_reference_lcsr: baseline,
        full_beats_no_pretrain: gt(&full, &no_pretrain),
        full_beats_no_decoupling: gt(&full, &no_decoupling),
        no_decoupling_below_source: no_decoupling.lcsr.map(|l| l < baseline),
        full,
        no_pretrain,
        no_decoupling,
    })
}

/// `ablation`: trains once, then compares the three arms on identical data
/// and seeds.
pub fn ablation_suite(cfg: &RunConfig) -> Result<Ablation> {
    let art = train_all(cfg)?;
    ablation_with(cfg, &art)
}
