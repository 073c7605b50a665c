//! Run configuration and its flat `section.key = value` text form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::converter::DecodeOpts;
use crate::corruptor::{CorruptionSpec, Scheme};
use crate::error::{Error, Result};
use crate::neural::{ModelConfig, OptimConfig, PosInit, TrainOpts};
use crate::speaker::{GenerateOpts, DEFAULT_PROMPT_FRAMES};
use crate::synthcorpus::BenchmarkConfig;
use crate::tokens::Vocabulary;

/// Architecture knobs; vocabularies and head counts follow the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub context_len: usize,
    pub init_std: f64,
    pub pos_init: PosInit,
    pub rotary: bool,
    pub position_reset: bool,
}

impl ModelSettings {
    fn from_config(c: &ModelConfig) -> Self {
        ModelSettings {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_ff: c.d_ff,
            dropout: c.dropout,
            context_len: c.context_len,
            init_std: c.init_std,
            pos_init: c.pos_init,
            rotary: c.rotary,
            position_reset: c.position_reset,
        }
    }

    fn apply(&self, c: ModelConfig) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            dropout: self.dropout,
            context_len: self.context_len,
            init_std: self.init_std,
            pos_init: self.pos_init,
            rotary: self.rotary,
            position_reset: self.position_reset,
            ..c
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSettings {
    pub scheme: Scheme,
    pub span_prob: f64,
    pub span_lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    /// Best of the candidates by LCSR against the reference (evaluation).
    ReferenceLcsr,
    /// Best by mean per-token log-probability (reference-free).
    AvgLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub k: usize,
    pub n_candidates: usize,
    pub temperature: f64,
    pub selector: SelectorKind,
    pub seed: u64,
}

impl DecodeSettings {
    pub fn opts(&self) -> DecodeOpts {
        DecodeOpts {
            k: self.k,
            n_candidates: self.n_candidates,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSettings {
    pub k: usize,
    pub temperature: f64,
    pub prompt_frames: usize,
    pub seed: u64,
}

impl GenerateSettings {
    pub fn opts(&self) -> GenerateOpts {
        GenerateOpts {
            k: self.k,
            temperature: self.temperature,
            max_prompt_frames: self.prompt_frames,
            n_frames: None,
        }
    }
}

/// Seeds of evaluation-only randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Corruption draws for held-out reconstruction loss.
    pub reconstruction_seed: u64,
}

/// Input and output files. Unset entries resolve to the file of the same
/// role inside the output directory, where `synth` and earlier stages put
/// them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub target_corpus: Option<PathBuf>,
    pub target_acoustic: Option<PathBuf>,
    pub pair_source: Option<PathBuf>,
    pub pair_target: Option<PathBuf>,
    pub pair_target_acoustic: Option<PathBuf>,
    pub test_source: Option<PathBuf>,
    pub test_reference: Option<PathBuf>,
    pub test_source_acoustic: Option<PathBuf>,
    pub test_reference_acoustic: Option<PathBuf>,
    pub converter_init: Option<PathBuf>,
    pub converter: Option<PathBuf>,
    pub speaker: Option<PathBuf>,
    /// Semantic corpus the `speak` stage voices.
    pub speak_input: Option<PathBuf>,
}

/// Everything one run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: BenchmarkConfig,
    pub converter: ModelSettings,
    pub speaker: ModelSettings,
    pub corruption: CorruptionSettings,
    pub pretrain: TrainOpts,
    pub finetune: TrainOpts,
    pub speaker_train: TrainOpts,
    pub decode: DecodeSettings,
    pub generate: GenerateSettings,
    pub eval: EvalSettings,
    pub paths: Paths,
    pub output_dir: PathBuf,
}

fn schedule(steps: usize, peak_lr: f64, warmup_steps: usize, seed: u64) -> TrainOpts {
    TrainOpts {
        steps,
        batch_size: 16,
        optim: OptimConfig {
            peak_lr,
            warmup_steps,
            decay_half_life: steps as f64 / 2.0,
            ..OptimConfig::default()
        },
        seed,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        let converter = ModelSettings::from_config(&ModelConfig::converter(bench.content_vocab));
        let speaker = ModelSettings {
            dropout: 0.1,
            ..converter.clone()
        };
        RunConfig {
            benchmark: bench,
            converter,
            speaker,
            corruption: CorruptionSettings {
                scheme: Scheme::Infilling,
                span_prob: 0.5,
                span_lambda: 5.0,
                seed: 7,
            },
            pretrain: schedule(3000, 3e-3, 100, 1),
            finetune: schedule(600, 2e-3, 20, 2),
            speaker_train: schedule(3000, 3e-3, 100, 3),
            decode: DecodeSettings {
                k: 2,
                n_candidates: 5,
                temperature: 1.0,
                selector: SelectorKind::ReferenceLcsr,
                seed: 5,
            },
            generate: GenerateSettings {
                k: 10,
                temperature: 1.0,
                prompt_frames: DESK_PROMPT_FRAMES,
                seed: 6,
            },
            eval: EvalSettings { reconstruction_seed: 8 },
            paths: Paths::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Desk utterances last 1.2 to 2 s, so the prompt is cut to 0.5 s to stay
/// a prefix rather than a whole utterance.
pub const DESK_PROMPT_FRAMES: usize = 25;

/// Step count above which a schedule needs `--paper-scale`.
const DESK_STEP_LIMIT: usize = 100_000;
/// Layer count at which a model needs `--paper-scale`.
const DESK_LAYER_LIMIT: usize = 12;

impl RunConfig {
    /// 12 layers of width 1024 (ff 4096), 16 groups of 1024 codes, 500k
    /// steps at peak learning rate 0.01 with warmup. Days of compute on one
    /// core; accepted only behind an explicit flag.
    pub fn paper_scale() -> Self {
        let mut c = RunConfig::default();
        c.benchmark.groups = 16;
        c.benchmark.codebook = 1024;
        let big = ModelSettings::from_config(&ModelConfig::paper_scale(c.benchmark.content_vocab, false));
        c.converter = big.clone();
        c.speaker = big;
        for s in [&mut c.pretrain, &mut c.finetune, &mut c.speaker_train] {
            *s = schedule(500_000, 0.01, 10_000, s.seed);
        }
        c.generate.prompt_frames = DEFAULT_PROMPT_FRAMES;
        c
    }

    pub fn corruption_spec(&self) -> CorruptionSpec {
        CorruptionSpec {
            scheme: self.corruption.scheme,
            span_prob: self.corruption.span_prob,
            span_lambda: self.corruption.span_lambda,
            mask_token: Vocabulary::semantic(self.benchmark.content_vocab)
                .mask()
                .expect("semantic vocabulary has a mask"),
            seed: self.corruption.seed,
        }
    }

    pub fn converter_model(&self) -> ModelConfig {
        self.converter.apply(ModelConfig::converter(self.benchmark.content_vocab))
    }

    pub fn speaker_model(&self) -> ModelConfig {
        let b = &self.benchmark;
        self.speaker.apply(ModelConfig::speaker(b.content_vocab, b.groups, b.codebook))
    }

    /// Every seed the run uses, by config key.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("benchmark.seed".to_string(), self.benchmark.seed),
            ("corruption.seed".to_string(), self.corruption.seed),
            ("pretrain.seed".to_string(), self.pretrain.seed),
            ("finetune.seed".to_string(), self.finetune.seed),
            ("speaker_train.seed".to_string(), self.speaker_train.seed),
            ("decode.seed".to_string(), self.decode.seed),
            ("generate.seed".to_string(), self.generate.seed),
            ("eval.reconstruction_seed".to_string(), self.eval.reconstruction_seed),
        ])
    }

    /// Checks values and sizes. Paper-scale sizes need `paper_scale`.
    pub fn validate(&self, paper_scale: bool) -> Result<()> {
        self.converter_model().validate()?;
        self.speaker_model().validate()?;
        self.corruption_spec().validate(None)?;
        let b = &self.benchmark;
        if b.n_train_pairs == 0 || b.n_test_pairs == 0 || b.n_target_utts == 0 {
            return Err(Error::Config("benchmark corpora must be non-empty".into()));
        }
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("speaker_train", &self.speaker_train),
        ] {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
            if !(s.optim.peak_lr > 0.0 && s.optim.peak_lr.is_finite()) {
                return Err(Error::Config(format!("{name}.optim.peak_lr must be positive")));
            }
            if s.steps > DESK_STEP_LIMIT && !paper_scale {
                return Err(Error::Config(format!(
                    "{name}.steps = {} needs --paper-scale",
                    s.steps
                )));
            }
        }
        if (self.converter.n_layers >= DESK_LAYER_LIMIT || self.speaker.n_layers >= DESK_LAYER_LIMIT) && !paper_scale {
            return Err(Error::Config("12-layer models need --paper-scale".into()));
        }
        if self.decode.k == 0 || self.decode.n_candidates == 0 || self.generate.k == 0 {
            return Err(Error::Config("k and n_candidates must be positive".into()));
        }
        if !(self.decode.temperature > 0.0 && self.generate.temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// A configured path, or `name` inside the output directory.
    pub fn resolve(&self, configured: &Option<PathBuf>, name: &str) -> PathBuf {
        configured.clone().unwrap_or_else(|| self.output_dir.join(name))
    }

    /// Parses flat text on top of the defaults.
    pub fn from_flat(text: &str, source: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_flat(text, source)?;
        Ok(c)
    }

    /// Applies `key = value` lines (`#` starts a comment) over `self`.
    pub fn apply_flat(&mut self, text: &str, source: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            set_dotted(&mut tree, key.trim(), value.trim()).map_err(|message| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            })?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        self.apply_flat(assignment, "--set")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        RunConfig::from_flat(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Every field as a `key = value` line, in declaration order.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &tree, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push_str(&format!("{prefix} = {}\n", parts.join(",")));
        }
        _ => out.push_str(&format!("{prefix} = {}\n", scalar_text(v))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_dotted(tree: &mut Value, key: &str, text: &str) -> std::result::Result<(), String> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(|| format!("unknown key {key:?}"))?;
    }
    if node.is_object() {
        return Err(format!("{key:?} is a section, not a value"));
    }
    *node = parse_like(node, text).map_err(|e| format!("{key}: {e}"))?;
    Ok(())
}

/// Parses `text` as the same JSON kind as `current`. Unset paths (null)
/// take a string; `none` clears them.
fn parse_like(current: &Value, text: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {text:?}")),
        Value::Number(n) => parse_number(text, n.is_u64()),
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Null => Ok(if text == "none" || text.is_empty() {
            Value::Null
        } else {
            Value::String(text.to_string())
        }),
        Value::Array(_) => {
            if text.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            text.split(',').map(|t| parse_number(t.trim(), false)).collect::<std::result::Result<Vec<_>, _>>().map(Value::Array)
        }
        Value::Object(_) => Err("cannot assign a section".into()),
    }
}

fn parse_number(text: &str, integer: bool) -> std::result::Result<Value, String> {
    if integer {
        if let Ok(u) = text.parse::<u64>() {
            return Ok(Value::Number(u.into()));
        }
        return Err(format!("expected a non-negative integer, got {text:?}"));
    }
    text.parse::<f64>()
        .ok()
        .and_then(Number::from_f64)
        .map(Value::Number)
        .ok_or_else(|| format!("expected a number, got {text:?}"))
}
