//! The ten acceptance criteria. Each prints one PASS or FAIL line with its
//! measurements; the process exits nonzero if any criterion fails.
//!
//! Criteria 7 to 9 share one default pipeline run (about ten minutes on one
//! core).

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use convert_speak::corruptor::{corrupt_detailed, CorruptionSpec};
use convert_speak::harness::run::{self as stages, score_speech, speak_core};
use convert_speak::harness::{ablation_with, pipeline, Evaluation, RunConfig};
use convert_speak::neural::gradcheck;
use convert_speak::neural::{sample_top_k, Params};
use convert_speak::speaker::{generate, DecodingScheme, GenerateOpts};
use convert_speak::tokens::{lcs_length, lcsr, AcousticSequence, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LCS_PAIRS: usize = 1000;
const LCS_MAX_LEN: usize = 12;
const LCS_SECONDS: f64 = 10.0;

const CORRUPTIONS: usize = 10_000;
const CORRUPTION_LEN: usize = 200;
const COVERED_RANGE: (f64, f64) = (0.45, 0.55);
const SPAN_RANGE: (f64, f64) = (4.5, 5.5);
const CORRUPTION_SECONDS: f64 = 30.0;

const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_SECONDS: f64 = 120.0;

const SAMPLER_DRAWS: usize = 100_000;
const SAMPLER_TOLERANCE: f64 = 0.01;
const SAMPLER_SECONDS: f64 = 10.0;

const UPLIFT_MIN: f64 = 0.15;
const CONVERTED_MIN: f64 = 0.85;
const PIPELINE_SECONDS: f64 = 20.0 * 60.0;

const STYLE_MIN: f64 = 0.9;
const CONTENT_MIN: f64 = 0.9;
const SPEAKER_SECONDS: f64 = 10.0 * 60.0;

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{:>2}] {}: {}", self.id, self.title, self.detail);
    }
}

fn brute_force_lcs(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let mut it = b.iter();
        if (0..a.len()).filter(|i| mask >> i & 1 == 1).all(|i| it.any(|&y| y == a[i])) {
            best = n;
        }
    }
    best
}

fn lcs_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..LCS_PAIRS {
        let alphabet = rng.random_range(1..6u32);
        let a: Vec<u32> = (0..rng.random_range(0..=LCS_MAX_LEN)).map(|_| rng.random_range(0..alphabet)).collect();
        let b: Vec<u32> = (0..rng.random_range(0..=LCS_MAX_LEN)).map(|_| rng.random_range(0..alphabet)).collect();
        mismatches += usize::from(lcs_length(&a, &b) != brute_force_lcs(&a, &b));
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        title: "LCS oracle equivalence",
        pass: mismatches == 0 && secs < LCS_SECONDS,
        detail: format!("{mismatches} mismatches in {LCS_PAIRS} pairs, {secs:.2} s (limit {LCS_SECONDS} s)"),
    }
}

fn lcsr_examples() -> Verdict {
    let s = |v: &[u32]| TokenSequence::new("e", v.to_vec());
    let got = [
        lcsr(&s(&[1, 1, 2, 3]), &s(&[1, 1, 2, 3])).unwrap(),
        lcsr(&s(&[1, 2]), &s(&[3, 4])).unwrap(),
        lcsr(&s(&[1, 1, 2, 3, 4]), &s(&[1, 3, 3, 4, 5])).unwrap(),
    ];
    let want = [1.0, 0.0, 0.75];
    Verdict {
        id: 2,
        title: "LCSR definition",
        pass: got == want,
        detail: format!("got {got:?}, want {want:?}"),
    }
}

fn corruption_statistics() -> Verdict {
    let t = Instant::now();
    let spec = CorruptionSpec::infilling(64, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fraction, mut spans, mut covered) = (0.0, 0usize, 0usize);
    for _ in 0..CORRUPTIONS {
        let tokens: Vec<u32> = (0..CORRUPTION_LEN).map(|_| rng.random_range(0..64)).collect();
        let c = corrupt_detailed(&tokens, &spec, &mut rng).unwrap();
        fraction += c.covered() as f64 / CORRUPTION_LEN as f64;
        spans += c.spans.len();
        covered += c.covered();
    }
    let fraction = fraction / CORRUPTIONS as f64;
    let mean_span = covered as f64 / spans as f64;
    let secs = t.elapsed().as_secs_f64();
    let within = |x: f64, r: (f64, f64)| x >= r.0 && x <= r.1;
    Verdict {
        id: 3,
        title: "corruption statistics",
        pass: within(fraction, COVERED_RANGE) && within(mean_span, SPAN_RANGE) && secs < CORRUPTION_SECONDS,
        detail: format!(
            "covered {fraction:.4} in {COVERED_RANGE:?}, mean span {mean_span:.3} in {SPAN_RANGE:?}, {secs:.2} s (limit {CORRUPTION_SECONDS} s)"
        ),
    }
}

fn gradient() -> Verdict {
    let t = Instant::now();
    let cfg = gradcheck::toy_config();
    let report = gradcheck::run_default(0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let shape_ok = cfg.n_layers == 2 && cfg.d_model == 16 && report.tolerance == GRAD_TOLERANCE;
    Verdict {
        id: 4,
        title: "gradient correctness",
        pass: report.passed && shape_ok && report.coordinates == cfg.parameter_count() && secs < GRAD_SECONDS,
        detail: format!(
            "{} coordinates, max relative error {:.2e} at {} (tolerance {GRAD_TOLERANCE:e}), {secs:.2} s (limit {GRAD_SECONDS} s)",
            report.coordinates, report.max_rel_error, report.worst_tensor
        ),
    }
}

fn sampler_law() -> Verdict {
    let t = Instant::now();
    let logits = [4f64.ln(), 1f64.ln(), 1e-9f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    for _ in 0..SAMPLER_DRAWS {
        counts[sample_top_k(&logits, 2, 1.0, &mut rng).unwrap() as usize] += 1;
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / SAMPLER_DRAWS as f64).collect();
    let secs = t.elapsed().as_secs_f64();
    let ok = (f[0] - 0.8).abs() <= SAMPLER_TOLERANCE && (f[1] - 0.2).abs() <= SAMPLER_TOLERANCE && counts[2] == 0;
    Verdict {
        id: 5,
        title: "top-k sampler law",
        pass: ok && secs < SAMPLER_SECONDS,
        detail: format!(
            "frequencies {:.4} / {:.4} / {:.4} vs 0.8 / 0.2 / 0 (tolerance {SAMPLER_TOLERANCE}), {secs:.2} s (limit {SAMPLER_SECONDS} s)",
            f[0], f[1], f[2]
        ),
    }
}

fn step_accounting(cfg: &RunConfig) -> Verdict {
    let params: Params<f32> = Params::init(&cfg.speaker_model(), 0);
    let y = TokenSequence::new("one-second", (0..50).map(|i| i % 36).collect());
    let prompt = AcousticSequence::new("empty", cfg.benchmark.groups);
    let opts = GenerateOpts { n_frames: Some(50), ..cfg.generate.opts() };
    let g = generate(&params, &y, &prompt, None, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bench = stages::bench_steps(cfg, 1.0, &[DecodingScheme::SingleStage, DecodingScheme::RvqTwoStage]).unwrap();
    let single = (&bench["single_stage"]["ar_steps"], &bench["single_stage"]["nar_passes"]);
    let rvq = (&bench["rvq_two_stage"]["ar_steps"], &bench["rvq_two_stage"]["nar_passes"]);
    let measured_ok = g.frames.n_frames() == 50 && g.steps == 50 && g.forward_passes == 50;
    let table_ok = single.0 == 50 && single.1 == 0 && rvq.0 == 75 && rvq.1 == 7;
    Verdict {
        id: 6,
        title: "single-stage step accounting",
        pass: measured_ok && table_ok,
        detail: format!(
            "50 frames took {} forward passes; bench-steps 1 s: single_stage {} AR + {} NAR, rvq_two_stage {} AR + {} NAR",
            g.forward_passes, single.0, single.1, rvq.0, rvq.1
        ),
    }
}

fn uplift(eval: &Evaluation, secs: f64) -> Verdict {
    let ok = eval.converted_lcsr >= eval.source_reference_lcsr + UPLIFT_MIN
        && eval.converted_lcsr >= CONVERTED_MIN
        && secs <= PIPELINE_SECONDS;
    Verdict {
        id: 7,
        title: "synthetic end-to-end uplift",
        pass: ok,
        detail: format!(
            "converted {:.4} vs source {:.4} (uplift {:.4}, need {UPLIFT_MIN}; absolute need {CONVERTED_MIN}), pipeline {secs:.0} s (limit {PIPELINE_SECONDS} s)",
            eval.converted_lcsr, eval.source_reference_lcsr, eval.uplift
        ),
    }
}

fn ablation(cfg: &RunConfig, art: &stages::Artifacts) -> Verdict {
    let a = ablation_with(cfg, art).unwrap();
    let show = |x: Option<f64>| x.map_or("failed".to_string(), |v| format!("{v:.4}"));
    let ok = a.full_beats_no_pretrain == Some(true)
        && a.full_beats_no_decoupling == Some(true)
        && a.no_decoupling_below_source == Some(true);
    Verdict {
        id: 8,
        title: "ablation ordering",
        pass: ok,
        detail: format!(
            "full {}, no-pretrain {}, no-decoupling {}, source baseline {:.4}",
            show(a.full.lcsr),
            show(a.no_pretrain.lcsr),
            show(a.no_decoupling.lcsr),
            a.source_reference_lcsr
        ),
    }
}

fn style_prompt(cfg: &RunConfig, art: &stages::Artifacts, eval: &Evaluation) -> Verdict {
    let b = &art.benchmark;
    let t = Instant::now();
    let refs: Vec<TokenSequence> = b.test_pairs.iter().map(|p| p.target.clone()).collect();
    let sources: Vec<TokenSequence> = b.test_pairs.iter().map(|p| p.source.clone()).collect();
    let prompts = b.test_source_acoustic().unwrap();
    let gens = speak_core(cfg, &art.speaker, &refs, Some(&prompts), Some(&sources)).unwrap();
    let score = score_speech(&b.codec, &gens, &refs, &refs, &b.test_styles).unwrap();
    let secs = art.seconds["train_speaker"] + t.elapsed().as_secs_f64();
    let ok = score.style_accuracy > STYLE_MIN
        && score.conditioning_lcsr > CONTENT_MIN
        && score == eval.speaker_oracle
        && secs <= SPEAKER_SECONDS;
    Verdict {
        id: 9,
        title: "style-prompt conditioning",
        pass: ok,
        detail: format!(
            "style {:.4} (need > {STYLE_MIN}), content {:.4} (need > {CONTENT_MIN}) over {} held-out utterances, {} truncated, train + generate {secs:.0} s (limit {SPEAKER_SECONDS} s)",
            score.style_accuracy,
            score.conditioning_lcsr,
            gens.len(),
            score.truncated
        ),
    }
}

const SMALL: &str = "\
benchmark.n_target_utts = 40
benchmark.n_train_pairs = 8
benchmark.n_test_pairs = 4
benchmark.lengths.min = 8
benchmark.lengths.max = 12
pretrain.steps = 3
pretrain.batch_size = 2
finetune.steps = 2
finetune.batch_size = 2
speaker_train.steps = 2
speaker_train.batch_size = 2
";

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let conf_dir = tempfile::tempdir().unwrap();
    let conf = conf_dir.path().join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let out = tempfile::tempdir().unwrap();
    let reference = out.path().join("test_reference.txt");
    let commands: Vec<Vec<String>> = [
        "synth",
        "pretrain",
        "finetune",
        "train-speaker",
        "convert",
        "speak",
        "pipeline",
        "bench-steps",
        "grad-check",
        "ablation",
    ]
    .iter()
    .map(|c| vec![c.to_string()])
    .chain(std::iter::once(vec![
        "eval-lcsr".to_string(),
        "--hyp".to_string(),
        reference.display().to_string(),
        "--ref".to_string(),
        reference.display().to_string(),
    ]))
    .collect();
    let mut snaps = Vec::new();
    let mut failures = Vec::new();
    for _ in 0..2 {
        for cmd in &commands {
            let status = Command::new(env!("CARGO_BIN_EXE_convert-speak"))
                .args(cmd)
                .arg("--config")
                .arg(&conf)
                .arg("--out")
                .arg(out.path())
                .output()
                .unwrap()
                .status;
            if !status.success() {
                failures.push(format!("{} exited {status}", cmd[0]));
            }
        }
        snaps.push(snapshot(out.path()));
    }
    let differing: Vec<&str> = snaps[0]
        .iter()
        .zip(&snaps[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let same_names = snaps[0].iter().map(|f| &f.0).eq(snaps[1].iter().map(|f| &f.0));
    Verdict {
        id: 10,
        title: "determinism",
        pass: failures.is_empty() && differing.is_empty() && same_names,
        detail: format!(
            "{} subcommands run twice, {} files compared, differing: {:?}, failures: {:?}",
            commands.len(),
            snaps[0].len(),
            differing,
            failures
        ),
    }
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        v.print();
        verdicts.push(v.pass);
    };
    record(lcs_oracle());
    record(lcsr_examples());
    record(corruption_statistics());
    record(gradient());
    record(sampler_law());

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    record(step_accounting(&cfg));

    let t = Instant::now();
    let (results, art) = pipeline(&cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let eval: Evaluation = serde_json::from_value(results["evaluation"].clone()).unwrap();
    record(uplift(&eval, secs));
    record(ablation(&cfg, &art));
    record(style_prompt(&cfg, &art, &eval));
    record(determinism());

    let passed = verdicts.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", verdicts.len());
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
