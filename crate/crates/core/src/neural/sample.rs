//! Top-k sampling.

use rand::Rng;

use super::real::Real;
use crate::error::{Error, Result};

/// A sampled id with its log-probability under the full tempered
/// distribution (banned ids excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub id: u32,
    pub logprob: f64,
}

/// Draws from the renormalized distribution over the `k` highest logits.
/// Ties rank the lower id first.
pub fn sample_top_k<T: Real, R: Rng + ?Sized>(logits: &[T], k: usize, temperature: f64, rng: &mut R) -> Result<u32> {
    sample_top_k_filtered(logits, k, temperature, &[], rng).map(|s| s.id)
}

/// As [`sample_top_k`], never returning an id in `banned`.
pub fn sample_top_k_filtered<T: Real, R: Rng + ?Sized>(
    logits: &[T],
    k: usize,
    temperature: f64,
    banned: &[u32],
    rng: &mut R,
) -> Result<Sampled> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Sampling(format!("temperature {temperature} must be positive")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let mut ids: Vec<usize> = (0..logits.len()).filter(|&i| !banned.contains(&(i as u32))).collect();
    if k == 0 || k > ids.len() {
        return Err(Error::Sampling(format!(
            "k = {k} outside 1..={} eligible ids",
            ids.len()
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap() / temperature).collect();
    ids.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    let max = scaled[ids[0]];
    let lse_all = ids.iter().map(|&i| (scaled[i] - max).exp()).sum::<f64>().ln() + max;
    let top = &ids[..k];
    let weights: Vec<f64> = top.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut pick = top[k - 1];
    for (&i, &w) in top.iter().zip(&weights) {
        if u < w {
            pick = i;
            break;
        }
        u -= w;
    }
    Ok(Sampled {
        id: pick as u32,
        logprob: scaled[pick] - lse_all,
    })
}
