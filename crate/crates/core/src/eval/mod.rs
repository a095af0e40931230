//! Evaluation: scale selection, sliding-window perplexity, the extrapolation
//! probe, scale sweeps, key/value retrieval and attention export.

use crate::error::{Error, Result};
use crate::model::{Model, Token};
use crate::rope::RopeParams;
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::Scalar;

pub mod heatmap;
pub mod kv;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub context_window: usize,
    pub scale: f64,
    pub stride: usize,
    pub token_count: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Interpolation scale `L′ / L` that maps a target window onto the base window.
pub fn scale_for_window(target: usize, base: usize) -> Result<f64> {
    if base == 0 {
        return Err(Error::Config("base window must be positive".into()));
    }
    if target < base {
        return Err(Error::Config(format!(
            "target window {target} is shorter than base window {base}; downscaling is unsupported"
        )));
    }
    Ok(target as f64 / base as f64)
}

/// Start offsets of the evaluation windows and the number of tokens each
/// scores (its last `min(stride, window − 1)`).
pub fn window_plan(n_tokens: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let scored = stride.min(window.saturating_sub(1));
    (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window <= n_tokens)
        .map(|s| (s, scored))
        .collect()
}

/// Windows of `window` tokens advance by `stride`; each window scores only
/// its final `stride` tokens (all but the first when `stride == window`),
/// the earlier ones serving as context.
pub fn sliding_window_perplexity<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
    window: usize,
    stride: usize,
    rope: &RopeParams,
) -> Result<EvalReport> {
    if window < 2 {
        return Err(Error::Config(format!(
            "evaluation window must be at least 2, got {window}"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::Config(format!("stride {stride} must lie in 1..={window}")));
    }
    if tokens.len() < window {
        return Err(Error::Data(format!(
            "evaluation text has {} tokens, window needs at least {window}",
            tokens.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (start, scored) in window_plan(tokens.len(), window, stride) {
        let win = &tokens[start..start + window];
        let rows: Vec<usize> = (window - 1 - scored..window - 1).collect();
        let logits = model.forward_rows(win, rope, &rows)?;
        for (i, &r) in rows.iter().enumerate() {
            let row = logits.row(i);
            let target = win[r + 1] as usize;
            let nll = log_sum_exp(row) - row[target].to_f64();
            if !nll.is_finite() {
                return Err(Error::NonFinite(format!("NLL at window {start}, row {r}")));
            }
            total += nll;
            count += 1;
        }
    }
    let mean_nll = total / count as f64;
    Ok(EvalReport {
        context_window: window,
        scale: rope.scale(),
        stride,
        token_count: count,
        mean_nll,
        perplexity: mean_nll.exp(),
    })
}

/// Perplexity at `window` with plain RoPE, no interpolation.
pub fn direct_extrapolation_probe<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
    window: usize,
    stride: usize,
) -> Result<EvalReport> {
    sliding_window_perplexity(model, tokens, window, stride, &model.config().standard_rope())
}

/// Perplexity at window `scale · L` (capped at the text length) for each
/// requested scale. Evaluation continues past failing scales; each entry
/// carries its own result.
pub fn unseen_scale_sweep<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
    scales: &[f64],
    stride: usize,
) -> Vec<(f64, Result<EvalReport>)> {
    let base = model.config().base_window;
    scales
        .iter()
        .map(|&g| {
            let report = (|| {
                let window = ((g * base as f64).round() as usize).min(tokens.len());
                let rope = model.config().rope_at_scale(g)?;
                sliding_window_perplexity(model, tokens, window, stride.min(window), &rope)
            })();
            (g, report)
        })
        .collect()
}
