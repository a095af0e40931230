//! Attention of generated tokens over the prompt, for retrieval cases.

use std::ops::Range;

use super::kv::KvCase;
use crate::error::{Error, Result};
use crate::model::{greedy_generate, Model, Token};
use crate::rope::RopeParams;
use crate::tensor::Scalar;

/// Head-averaged attention of one layer: row `j` is the attention of the
/// query that produced generated token `j`, restricted to prompt columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHeatmap {
    pub layer: usize,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowPeak {
    pub row: usize,
    /// Column with the largest weight.
    pub argmax: usize,
    /// Maximal run of columns around `argmax` holding at least half its weight.
    pub peak_interval: Range<usize>,
    pub in_value_span: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub generated: Vec<Token>,
    pub prompt_len: usize,
    pub value_span: Range<usize>,
    pub layers: Vec<LayerHeatmap>,
}

impl LayerHeatmap {
    /// Attention mass inside `span` relative to what a span of the same
    /// width would receive if the row's mass were spread evenly over the
    /// prompt, averaged over rows.
    pub fn span_concentration(&self, span: &Range<usize>) -> f64 {
        let n = self.rows.first().map_or(0, Vec::len);
        if n == 0 || span.is_empty() {
            return 0.0;
        }
        let ratios: Vec<f64> = self
            .rows
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                let inside: f64 = row[span.start.min(n)..span.end.min(n)].iter().sum();
                let expected = total * span.len() as f64 / n as f64;
                if expected > 0.0 {
                    inside / expected
                } else {
                    0.0
                }
            })
            .collect();
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }

    pub fn peaks(&self, span: &Range<usize>) -> Vec<RowPeak> {
        self.rows
            .iter()
            .enumerate()
            .map(|(row, w)| {
                let argmax = w
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                let half = w.get(argmax).copied().unwrap_or(0.0) / 2.0;
                let mut lo = argmax;
                while lo > 0 && w[lo - 1] >= half {
                    lo -= 1;
                }
                let mut hi = argmax + 1;
                while hi < w.len() && w[hi] >= half {
                    hi += 1;
                }
                RowPeak {
                    row,
                    argmax,
                    peak_interval: lo..hi,
                    in_value_span: span.contains(&argmax),
                }
            })
            .collect()
    }
}

/// Greedily answers `case` and collects the generated-token × prompt-token
/// attention for each selected layer.
pub fn dump_attention<T: Scalar>(
    model: &Model<T>,
    case: &KvCase,
    rope: &RopeParams,
    layers: &[usize],
    max_new: usize,
) -> Result<AttentionDump> {
    let n_layers = model.config().n_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Index {
            what: "layer",
            index: bad,
            bound: n_layers,
        });
    }
    let prompt = case.tokens();
    let gen = greedy_generate(model, &prompt, rope, max_new, Some(Token::from(b'"')), true)?;
    let p = prompt.len();
    let layers = layers
        .iter()
        .map(|&layer| LayerHeatmap {
            layer,
            rows: gen
                .attention
                .iter()
                .map(|per_layer| per_layer[layer][..p].to_vec())
                .collect(),
        })
        .collect();
    Ok(AttentionDump {
        generated: gen.tokens,
        prompt_len: p,
        value_span: case.value_span.clone(),
        layers,
    })
}
