//! Central finite-difference check of the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{batch_loss, loss_and_grad, Example, Slot};
use super::params::Params;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor so near-zero coordinates compare
/// on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A 2-layer width-16 frame model (so both embedding paths are exercised).
pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig::speaker(6, 2, 5);
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.context_len = 12;
    c.init_std = 0.5;
    c
}

/// A random batch of mixed token/frame sequences with a partial loss mask.
pub fn random_batch(config: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = config.n_output_heads;
    let sem = config.semantic_vocab.size() as u32;
    let codes = config.group_codebook as u32 + 1;
    let hv = config.head_vocab() as u32;
    (0..n)
        .map(|_| {
            let split = rng.random_range(1..len);
            let inputs = (0..len)
                .map(|i| {
                    if i < split || config.acoustic_groups == 0 {
                        Slot::Token(rng.random_range(0..sem))
                    } else {
                        Slot::Frame((0..config.acoustic_groups).map(|_| rng.random_range(0..codes)).collect())
                    }
                })
                .collect();
            let targets = (0..len * heads).map(|_| rng.random_range(0..hv)).collect();
            let mut loss_mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
            loss_mask[len - 1] = true;
            Example {
                inputs,
                targets,
                loss_mask,
            }
        })
        .collect()
}

/// Compares every coordinate of the analytic gradient with
/// `(L(w + h) - L(w - h)) / 2h` in `f64`.
pub fn check(params: &Params<f64>, batch: &[Example], step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(params, batch, None)?;
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut coordinates = 0;
    let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.data.clone()).collect();
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let orig = tensor_mut(&mut probe, ti).data[i];
            tensor_mut(&mut probe, ti).data[i] = orig + step;
            let plus = batch_loss(&probe, batch)?;
            tensor_mut(&mut probe, ti).data[i] = orig - step;
            let minus = batch_loss(&probe, batch)?;
            tensor_mut(&mut probe, ti).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[ti][i], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        coordinates,
        max_rel_error: worst.0,
        worst_tensor: worst.1,
        step,
        tolerance,
        passed: worst.0 <= tolerance,
    })
}

fn tensor_mut(p: &mut Params<f64>, index: usize) -> &mut super::params::Tensor<f64> {
    p.tensors_mut().into_iter().nth(index).unwrap().1
}

/// The standard check: toy model, four sequences of length 8, step 1e-4,
/// tolerance 1e-3.
pub fn run_default(seed: u64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let params: Params<f64> = Params::init(&cfg, seed);
    let batch = random_batch(&cfg, 4, 8, seed.wrapping_add(1));
    check(&params, &batch, 1e-4, 1e-3)
}
