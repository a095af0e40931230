//! Pre-norm decoder-only transformer: RMSNorm, causal multi-head attention
//! with rotary embeddings on queries and keys, gated (SiLU) feed-forward,
//! untied embedding and output projection.
//!
//! RoPE parameters are an argument of every forward call, so one set of
//! weights serves any scale and offset map.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rope::RopeParams;
use crate::tensor::kernels::AttnLayout;
use crate::tensor::{Graph, Scalar, Tensor, Var};

mod decode;

pub use decode::{greedy_generate, Decoder, Generation};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Pretrained context window `L`.
    pub base_window: usize,
    pub rope_base: f64,
    /// Longest sequence (and largest effective position) a forward call accepts.
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            ffn_mult: 4,
            base_window: 128,
            rope_base: crate::rope::DEFAULT_BASE,
            max_seq_len: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.head_dim", self.head_dim),
            ("model.ffn_mult", self.ffn_mult),
            ("model.base_window", self.base_window),
            ("model.max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Constraint {
                first: "model.d_model",
                second: "model.n_heads",
                msg: format!(
                    "d_model {} != n_heads {} × head_dim {}",
                    self.d_model, self.n_heads, self.head_dim
                ),
            });
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.head_dim must be even, got {}",
                self.head_dim
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Config("model.rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, v) = (self.d_model, self.hidden(), self.vocab_size);
        let mut out = vec![("tok_emb".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ffn_norm", vec![d]),
                ("w_gate", vec![d, h]),
                ("w_up", vec![d, h]),
                ("w_down", vec![h, d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, v]));
        out
    }

    /// Standard RoPE at this model's head size and base.
    pub fn standard_rope(&self) -> RopeParams {
        RopeParams::standard(self.head_dim, self.rope_base).expect("validated config")
    }

    pub fn rope_at_scale(&self, scale: f64) -> Result<RopeParams> {
        RopeParams::interpolated(self.head_dim, self.rope_base, scale)
    }
}

const PER_LAYER: usize = 9;

#[derive(Debug, Clone, Copy)]
struct LayerIdx(usize);

impl LayerIdx {
    fn attn_norm(self) -> usize {
        self.0
    }
    fn wq(self) -> usize {
        self.0 + 1
    }
    fn wk(self) -> usize {
        self.0 + 2
    }
    fn wv(self) -> usize {
        self.0 + 3
    }
    fn wo(self) -> usize {
        self.0 + 4
    }
    fn ffn_norm(self) -> usize {
        self.0 + 5
    }
    fn w_gate(self) -> usize {
        self.0 + 6
    }
    fn w_up(self) -> usize {
        self.0 + 7
    }
    fn w_down(self) -> usize {
        self.0 + 8
    }
}

/// Post-softmax attention weights of one head, `[query][key]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.len..(i + 1) * self.len]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.len + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

struct Built {
    params: Vec<Var>,
    logits: Var,
    attention: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Random initialisation: embeddings N(0, 0.02), projections
    /// N(0, 1/fan_in) with residual outputs further scaled by 1/√(2·layers),
    /// norm gains 1.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("norm") {
                    vec![T::ONE; n]
                } else {
                    let std = if name == "tok_emb" {
                        0.02
                    } else {
                        let s = 1.0 / (shape[0] as f64).sqrt();
                        if name.ends_with("wo") || name.ends_with("w_down") {
                            s * residual
                        } else {
                            s
                        }
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
                };
                Tensor::new(&shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// All-zero weights: every position predicts the uniform distribution.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config.param_specs().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(Self { config, params })
    }

    /// Builds a model from parameters in [`ModelConfig::param_specs`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Malformed(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// `false` for norm gains, which are exempt from weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.config
            .param_specs()
            .iter()
            .map(|(name, _)| !name.ends_with("norm"))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn layer(&self, l: usize) -> LayerIdx {
        LayerIdx(1 + l * PER_LAYER)
    }

    fn final_norm(&self) -> usize {
        1 + self.config.n_layers * PER_LAYER
    }

    fn lm_head(&self) -> usize {
        self.final_norm() + 1
    }

    pub(crate) fn param(&self, i: usize) -> &Tensor<T> {
        &self.params[i]
    }

    fn check_inputs(&self, seqs: &[&[Token]], ropes: &[&RopeParams]) -> Result<usize> {
        let n = seqs.first().map_or(0, |s| s.len());
        if n == 0 {
            return Err(Error::Data("empty input sequence".into()));
        }
        if seqs.iter().any(|s| s.len() != n) || ropes.len() != seqs.len() {
            return Err(Error::Shape {
                op: "forward batch",
                left: seqs.iter().map(|s| s.len()).collect(),
                right: vec![ropes.len()],
            });
        }
        let max = self.config.max_seq_len;
        if n > max {
            return Err(Error::Length { len: n, max });
        }
        for rope in ropes {
            if rope.head_dim() != self.config.head_dim {
                return Err(Error::Shape {
                    op: "rope head_dim",
                    left: vec![rope.head_dim()],
                    right: vec![self.config.head_dim],
                });
            }
            let last = (0..n).map(|m| rope.position(m)).fold(0.0, f64::max);
            if last >= max as f64 {
                return Err(Error::Length {
                    len: last.ceil() as usize,
                    max,
                });
            }
        }
        Ok(n)
    }

    /// Records the forward pass. `logit_rows` restricts the output projection
    /// to the given rows of the flattened `[batch·seq]` sequence.
    fn build(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[Token]],
        ropes: &[&RopeParams],
        logit_rows: Option<&[usize]>,
        trainable: bool,
    ) -> Result<Built> {
        let n = self.check_inputs(seqs, ropes)?;
        let cfg = &self.config;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(trainable);
                g.leaf(t)
            })
            .collect();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let (mut cos, mut sin) = (Vec::new(), Vec::new());
        for rope in ropes {
            let (c, s) = rope.tables::<T>(n);
            cos.extend(c);
            sin.extend(s);
        }
        let lay = AttnLayout {
            batch: seqs.len(),
            seq: n,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim,
        };

        let mut h = g.embedding(params[0], &ids)?;
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let li = self.layer(l);
            let a = g.rmsnorm(h, params[li.attn_norm()])?;
            let q = g.matmul(a, params[li.wq()])?;
            let k = g.matmul(a, params[li.wk()])?;
            let v = g.matmul(a, params[li.wv()])?;
            let q = g.rope(q, cos.clone(), sin.clone(), cfg.head_dim)?;
            let k = g.rope(k, cos.clone(), sin.clone(), cfg.head_dim)?;
            let att = g.attention(q, k, v, lay)?;
            attention.push(att);
            let o = g.matmul(att, params[li.wo()])?;
            h = g.add(h, o)?;
            let b = g.rmsnorm(h, params[li.ffn_norm()])?;
            let gate = g.matmul(b, params[li.w_gate()])?;
            let up = g.matmul(b, params[li.w_up()])?;
            let act = g.swiglu(gate, up)?;
            let down = g.matmul(act, params[li.w_down()])?;
            h = g.add(h, down)?;
        }
        let mut out = g.rmsnorm(h, params[self.final_norm()])?;
        if let Some(rows) = logit_rows {
            out = g.select_rows(out, rows)?;
        }
        let logits = g.matmul(out, params[self.lm_head()])?;
        Ok(Built {
            params,
            logits,
            attention,
        })
    }

    /// Logits `[n, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[Token], rope: &RopeParams) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let built = self.build(&mut g, &[tokens], &[rope], None, false)?;
        Ok(g.take(built.logits))
    }

    /// Logits for a subset of positions of one sequence.
    pub fn forward_rows(&self, tokens: &[Token], rope: &RopeParams, rows: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let built = self.build(&mut g, &[tokens], &[rope], Some(rows), false)?;
        Ok(g.take(built.logits))
    }

    /// Logits plus every layer/head attention matrix from the same pass.
    pub fn forward_with_attention(
        &self,
        tokens: &[Token],
        rope: &RopeParams,
    ) -> Result<(Tensor<T>, Vec<AttentionMap>)> {
        let mut g = Graph::no_grad().keep_attention(true);
        let built = self.build(&mut g, &[tokens], &[rope], None, false)?;
        let n = tokens.len();
        let mut maps = Vec::new();
        for (layer, &att) in built.attention.iter().enumerate() {
            let (probs, lay) = g.attention_probs(att).expect("attention retained");
            for head in 0..lay.heads {
                maps.push(AttentionMap {
                    layer,
                    head,
                    len: n,
                    weights: probs[head * n * n..(head + 1) * n * n].to_vec(),
                });
            }
        }
        Ok((g.take(built.logits), maps))
    }

    pub fn attention_maps(&self, tokens: &[Token], rope: &RopeParams) -> Result<Vec<AttentionMap>> {
        Ok(self.forward_with_attention(tokens, rope)?.1)
    }

    fn loss_graph(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[Token]],
        ropes: &[&RopeParams],
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let n = seqs.first().map_or(0, |s| s.len());
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 tokens per sequence, got {n}")));
        }
        let rows: Vec<usize> = (0..seqs.len())
            .flat_map(|b| (0..n - 1).map(move |i| b * n + i))
            .collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let built = self.build(g, seqs, ropes, Some(&rows), trainable)?;
        let loss = g.cross_entropy(built.logits, &targets)?;
        Ok((loss, built.params))
    }

    /// Mean next-token loss over a batch of equal-length sequences.
    pub fn loss(&self, seqs: &[&[Token]], ropes: &[&RopeParams]) -> Result<f64> {
        let mut g = Graph::no_grad();
        let (loss, _) = self.loss_graph(&mut g, seqs, ropes, false)?;
        Ok(g.value(loss).data()[0].to_f64())
    }

    /// Mean next-token loss and its gradient for every parameter.
    pub fn loss_and_grads(&self, seqs: &[&[Token]], ropes: &[&RopeParams]) -> Result<(f64, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let (loss, params) = self.loss_graph(&mut g, seqs, ropes, true)?;
        g.backward(loss)?;
        let grads = params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![T::ZERO; p.len()], <[T]>::to_vec))
            .collect();
        Ok((g.value(loss).data()[0].to_f64(), grads))
    }
}
