use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::calib::TokenStream;
use crate::linalg::Matrix;
use crate::model::{forward_batch, Model, ModelConfig};

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(p) ‖ softmax(q))` from logits.
pub fn kl_from_logits(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn eval_windows(stream: &TokenStream, seq_len: usize) -> Result<Vec<Vec<u32>>, EvalError> {
    if seq_len < 2 || stream.len() < seq_len + 1 {
        return Err(EvalError::StreamTooShort {
            len: stream.len(),
            seq_len,
        });
    }
    Ok(stream.windows(seq_len))
}

fn window_nll(window: &[u32], logits: &Matrix) -> f64 {
    (1..window.len())
        .map(|p| -log_softmax(logits.row(p - 1))[window[p] as usize])
        .sum()
}

/// `exp` of the mean next-token negative log-likelihood over consecutive
/// non-overlapping windows of `seq_len`, predicting positions `1..seq_len`
/// of each window.
pub fn perplexity(model: &Model, stream: &TokenStream, seq_len: usize) -> Result<f64, EvalError> {
    let windows = eval_windows(stream, seq_len)?;
    let logits = forward_batch(model, &windows)?;
    Ok(perplexity_of(&windows, &logits))
}

fn perplexity_of(windows: &[Vec<u32>], logits: &[Matrix]) -> f64 {
    // Summed in window order so the result does not depend on the thread count.
    let nll: Vec<f64> = windows.par_iter().zip(logits).map(|(w, l)| window_nll(w, l)).collect();
    let total: f64 = nll.iter().sum();
    let count: usize = windows.iter().map(|w| w.len() - 1).sum();
    (total / count as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Mean `KL(a ‖ b)` of next-token distributions.
    pub kl: f64,
    /// Fraction of positions whose argmax tokens agree.
    pub top1: f64,
}

fn divergence_of(la: &[Matrix], lb: &[Matrix]) -> Divergence {
    let per_window: Vec<(f64, usize, usize)> = la
        .par_iter()
        .zip(lb)
        .map(|(x, y)| {
            let n = x.rows() - 1;
            let (kl, agree) = (0..n)
                .map(|p| {
                    let (ra, rb) = (x.row(p), y.row(p));
                    (kl_from_logits(ra, rb), usize::from(argmax(ra) == argmax(rb)))
                })
                .fold((0.0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            (kl, agree, n)
        })
        .collect();
    let (kl, agree, count) = per_window
        .iter()
        .fold((0.0, 0, 0), |p, q| (p.0 + q.0, p.1 + q.1, p.2 + q.2));
    Divergence {
        kl: kl / count as f64,
        top1: agree as f64 / count as f64,
    }
}

/// Next-token divergence of `b` from `a` over the positions used by
/// [`perplexity`].
pub fn divergence(a: &Model, b: &Model, stream: &TokenStream, seq_len: usize) -> Result<Divergence, EvalError> {
    let windows = eval_windows(stream, seq_len)?;
    let la = forward_batch(a, &windows)?;
    let lb = forward_batch(b, &windows)?;
    Ok(divergence_of(&la, &lb))
}

/// A reference model's logits on fixed evaluation windows, computed once
/// and compared against many candidates.
#[derive(Debug, Clone)]
pub struct Reference {
    windows: Vec<Vec<u32>>,
    logits: Vec<Matrix>,
    pub perplexity: f64,
}

impl Reference {
    pub fn new(model: &Model, stream: &TokenStream, seq_len: usize) -> Result<Self, EvalError> {
        let windows = eval_windows(stream, seq_len)?;
        let logits = forward_batch(model, &windows)?;
        let perplexity = perplexity_of(&windows, &logits);
        Ok(Self {
            windows,
            logits,
            perplexity,
        })
    }

    pub fn windows(&self) -> &[Vec<u32>] {
        &self.windows
    }

    /// Perplexity of `model` and its divergence from the reference.
    pub fn compare(&self, model: &Model) -> Result<(f64, Divergence), EvalError> {
        let logits = forward_batch(model, &self.windows)?;
        Ok((perplexity_of(&self.windows, &logits), divergence_of(&self.logits, &logits)))
    }
}

/// Closed-form number of stored scalars for a model with this config.
///
/// With residual width `w`, attention width `a`, key/value width `kv` and
/// feed-forward width `f`: `2·V·w + L·(w·(a + 2·kv) + a·w + 3·w·f)`, plus
/// `(2L + 1)·w` norm scales when unfolded and `2L·w²` adapter entries when
/// compressed.
pub fn param_count(config: &ModelConfig) -> usize {
    let w = config.width();
    let (a, kv, f, l) = (config.attn_width(), config.kv_width(), config.d_ff, config.n_layers);
    let mut total = 2 * config.vocab_size * w + l * (w * (a + 2 * kv) + a * w + 3 * w * f);
    if !config.folded {
        total += (2 * l + 1) * w;
    }
    if config.residual_width.is_some() {
        total += 2 * l * w * w;
    }
    total
}

/// Folded, compressed config of `config` at residual width `width`.
fn compressed_config(config: &ModelConfig, width: usize) -> ModelConfig {
    let mut c = config.clone();
    c.folded = true;
    c.residual_width = Some(width);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub original: usize,
    pub compressed: usize,
    /// `original − compressed`; negative when adapters outweigh the savings.
    pub savings: i64,
    pub ratio: f64,
    pub negative_savings: bool,
    /// Largest residual width with strictly positive savings against the
    /// folded original.
    pub break_even_width: Option<usize>,
}

impl ParamReport {
    /// Compares against the folded original, which is what the compressor
    /// consumes.
    pub fn new(original: &ModelConfig, compressed: &ModelConfig) -> Self {
        let mut folded = original.clone();
        folded.folded = true;
        folded.residual_width = None;
        let o = param_count(&folded);
        let c = param_count(compressed);
        let savings = o as i64 - c as i64;
        let break_even_width = (1..=folded.d_model)
            .rev()
            .find(|&w| param_count(&compressed_config(&folded, w)) < o);
        Self {
            original: o,
            compressed: c,
            savings,
            ratio: c as f64 / o as f64,
            negative_savings: savings <= 0,
            break_even_width,
        }
    }

    pub fn at_width(original: &ModelConfig, width: usize) -> Self {
        Self::new(original, &compressed_config(original, width))
    }
}

/// Coarse single-threaded wall-clock cost of a forward pass, in
/// milliseconds per token. Not comparable across machines.
pub fn ms_per_token(model: &Model, sequences: &[Vec<u32>]) -> Result<f64, EvalError> {
    let tokens: usize = sequences.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Ok(0.0);
    }
    let start = Instant::now();
    for s in sequences {
        model.forward(s)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_shift_invariance() {
        let a = [1.0, 2.0, 3.0];
        let b = [11.0, 12.0, 13.0];
        assert!(kl_from_logits(&a, &b) < 1e-15);
        assert!(kl_from_logits(&a, &[3.0, 2.0, 1.0]) > 0.1);
    }

    #[test]
    fn argmax_ties_to_lower() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn toy_counts() {
        let mut c = ModelConfig::toy();
        assert_eq!(param_count(&c), 295_488);
        c.folded = true;
        assert_eq!(param_count(&c), 294_912);
        let r = ParamReport::at_width(&c, 58);
        assert_eq!(r.compressed, 294_176);
        let r = ParamReport::at_width(&c, 51);
        assert_eq!(r.compressed, 255_816);
        assert!(!r.negative_savings);
        let r = ParamReport::at_width(&c, 64);
        assert!(r.negative_savings);
    }
}
