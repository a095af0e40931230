//! Incremental decoding with a key/value cache.

use super::{Model, Token};
use crate::error::{Error, Result};
use crate::rope::RopeParams;
use crate::tensor::kernels::{self, attend_one};
use crate::tensor::Scalar;

/// Decoder state for one sequence. Keys are cached after rotation, so each
/// step only rotates the new position.
pub struct Decoder<'a, T: Scalar> {
    model: &'a Model<T>,
    rope: RopeParams,
    /// `[layer][head]` → flattened `[len, head_dim]`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

/// Output of one decoding step.
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// `[layer][head]` attention of the new position over all positions so far.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(model: &'a Model<T>, rope: RopeParams) -> Result<Self> {
        let cfg = model.config();
        if rope.head_dim() != cfg.head_dim {
            return Err(Error::Shape {
                op: "rope head_dim",
                left: vec![rope.head_dim()],
                right: vec![cfg.head_dim],
            });
        }
        let empty = vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Ok(Self {
            model,
            rope,
            keys: empty.clone(),
            values: empty,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the next-token logits at its position.
    pub fn step(&mut self, token: Token) -> Result<StepOutput> {
        let m = self.model;
        let cfg = m.config();
        let (d, hd, heads) = (cfg.d_model, cfg.head_dim, cfg.n_heads);
        if token as usize >= cfg.vocab_size {
            return Err(Error::Index {
                what: "token",
                index: token as usize,
                bound: cfg.vocab_size,
            });
        }
        if self.len >= cfg.max_seq_len || self.rope.position(self.len) >= cfg.max_seq_len as f64 {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        let (cos, sin) = self.rope.tables_from::<T>(self.len, 1);
        let emb = m.param(0).data();
        let t = token as usize;
        let mut h: Vec<T> = emb[t * d..(t + 1) * d].to_vec();
        let mut attention = Vec::with_capacity(cfg.n_layers);

        for l in 0..cfg.n_layers {
            let li = m.layer(l);
            let w = |i: usize| m.param(i).data();
            let (a, _) = kernels::rmsnorm_forward(&h, w(li.attn_norm()), d);
            let mut q = kernels::matmul(&a, w(li.wq()), 1, d, d);
            let mut k = kernels::matmul(&a, w(li.wk()), 1, d, d);
            let v = kernels::matmul(&a, w(li.wv()), 1, d, d);
            kernels::rope_rotate(&mut q, &cos, &sin, d, hd, false);
            kernels::rope_rotate(&mut k, &cos, &sin, d, hd, false);

            let mut att = vec![T::ZERO; d];
            let mut rows = Vec::with_capacity(heads);
            let mut out = vec![0.0; hd];
            for head in 0..heads {
                let span = head * hd..(head + 1) * hd;
                self.keys[l][head].extend(k[span.clone()].iter().map(|x| x.to_f64()));
                self.values[l][head].extend(v[span.clone()].iter().map(|x| x.to_f64()));
                let qh: Vec<f64> = q[span.clone()].iter().map(|x| x.to_f64()).collect();
                let p = attend_one(&qh, &self.keys[l][head], &self.values[l][head], hd, &mut out);
                for (dst, &o) in att[span].iter_mut().zip(&out) {
                    *dst = T::from_f64(o);
                }
                rows.push(p);
            }
            attention.push(rows);

            let o = kernels::matmul(&att, w(li.wo()), 1, d, d);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += *y);
            let (b, _) = kernels::rmsnorm_forward(&h, w(li.ffn_norm()), d);
            let hidden = cfg.hidden();
            let gate = kernels::matmul(&b, w(li.w_gate()), 1, d, hidden);
            let up = kernels::matmul(&b, w(li.w_up()), 1, d, hidden);
            let act: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| {
                    let gf = g.to_f64();
                    T::from_f64(gf * kernels::sigmoid(gf)) * u
                })
                .collect();
            let down = kernels::matmul(&act, w(li.w_down()), 1, hidden, d);
            h.iter_mut().zip(&down).for_each(|(x, y)| *x += *y);
        }
        let (f, _) = kernels::rmsnorm_forward(&h, m.param(m.final_norm()).data(), d);
        let logits = kernels::matmul(&f, m.param(m.lm_head()).data(), 1, d, cfg.vocab_size);
        self.len += 1;
        Ok(StepOutput {
            logits: logits.iter().map(|x| x.to_f64()).collect(),
            attention,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    /// For generated token `j` (when requested): `[layer]` head-averaged
    /// attention of the query that produced it, over all earlier positions.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Greedy decoding of up to `max_new` tokens after `prompt`, stopping early
/// after emitting `stop`.
pub fn greedy_generate<T: Scalar>(
    model: &Model<T>,
    prompt: &[Token],
    rope: &RopeParams,
    max_new: usize,
    stop: Option<Token>,
    keep_attention: bool,
) -> Result<Generation> {
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::Generation("empty prompt".into()));
    };
    let mut dec = Decoder::new(model, rope.clone())?;
    for &t in head {
        dec.step(t)?;
    }
    let mut out = Generation {
        tokens: Vec::new(),
        attention: Vec::new(),
    };
    let mut cur = last;
    for _ in 0..max_new {
        let step = dec.step(cur)?;
        if step.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logits at position {}", dec.len() - 1)));
        }
        let next = argmax(&step.logits) as Token;
        if keep_attention {
            let heads = step.attention.first().map_or(1, Vec::len) as f64;
            out.attention.push(
                step.attention
                    .iter()
                    .map(|layer| {
                        let mut avg = vec![0.0; layer[0].len()];
                        for row in layer {
                            avg.iter_mut().zip(row).for_each(|(a, p)| *a += p / heads);
                        }
                        avg
                    })
                    .collect(),
            );
        }
        out.tokens.push(next);
        if Some(next) == stop {
            break;
        }
        cur = next;
    }
    Ok(out)
}
