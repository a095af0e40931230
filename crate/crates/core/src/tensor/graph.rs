//! Reverse-mode tape. Each op appends a node holding its output tensor and
//! whatever the backward pass needs; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into the inputs.

use super::kernels::{self, AttnLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sum {
        a: Var,
    },
    Abs {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    SwiGlu {
        gate: Var,
        up: Var,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lay: AttnLayout,
        probs: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    keep_attention: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            keep_attention: false,
        }
    }

    /// A graph that records values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Retain attention probabilities even when gradients are disabled.
    pub fn keep_attention(mut self, on: bool) -> Self {
        self.keep_attention = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a tensor (with its gradient) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Post-softmax attention weights `[batch][head][query][key]` of an
    /// attention node, when they were retained.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnLayout)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs: Some(p), lay, ..
            } => Some((p, *lay)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * factor).collect()).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Scale { a, factor }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::ZERO, |acc, &x| acc + x);
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| x.abs()).collect()).expect("same shape");
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Abs { a }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        data.chunks_exact_mut(c.max(1)).for_each(kernels::softmax_row);
        let ng = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::SoftmaxRows { a }, ng))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let ng = self.any_grad(&[table]);
        let out = Tensor::new(&[ids.len(), dim], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "select_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.any_grad(&[a]);
        let out = Tensor::new(&[rows.len(), c], data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
                cols: c,
            },
            ng,
        ))
    }

    /// Row-wise RMS normalisation of `x` (`[rows, d]`) with gain `[d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, d) = self.dims2(x, "rmsnorm")?;
        if self.value(gain).len() != d {
            return Err(Error::Shape {
                op: "rmsnorm",
                left: vec![r, d],
                right: self.value(gain).shape().to_vec(),
            });
        }
        let (y, inv_rms) = kernels::rmsnorm_forward(self.value(x).data(), self.value(gain).data(), d);
        let ng = self.any_grad(&[x, gain]);
        Ok(self.push(Tensor::new(&[r, d], y)?, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape(gate, up, "swiglu")?;
        let tg = self.value(gate);
        let data = tg
            .data()
            .iter()
            .zip(self.value(up).data())
            .map(|(&g, &u)| {
                let gf = g.to_f64();
                T::from_f64(gf * kernels::sigmoid(gf)) * u
            })
            .collect();
        let out = Tensor::new(tg.shape(), data)?;
        let ng = self.any_grad(&[gate, up]);
        Ok(self.push(out, Op::SwiGlu { gate, up }, ng))
    }

    /// Rotates every head of every row of `x` by per-row angle tables
    /// (`head_dim / 2` cosines and sines per row).
    pub fn rope(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>, head_dim: usize) -> Result<Var> {
        let (r, w) = self.dims2(x, "rope")?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || w % head_dim != 0 {
            return Err(Error::Shape {
                op: "rope",
                left: vec![r, w],
                right: vec![head_dim],
            });
        }
        if cos.len() != r * head_dim / 2 || sin.len() != cos.len() {
            return Err(Error::Shape {
                op: "rope tables",
                left: vec![r, head_dim / 2],
                right: vec![cos.len(), sin.len()],
            });
        }
        let mut data = self.value(x).data().to_vec();
        kernels::rope_rotate(&mut data, &cos, &sin, w, head_dim, false);
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[r, w], data)?, Op::Rope { x, cos, sin, head_dim }, ng))
    }

    /// Causal multi-head attention over `[batch·seq, heads·head_dim]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lay: AttnLayout) -> Result<Var> {
        let want = vec![lay.batch * lay.seq, lay.width()];
        for x in [q, k, v] {
            if self.value(x).shape() != want.as_slice() {
                return Err(Error::Shape {
                    op: "attention",
                    left: self.value(x).shape().to_vec(),
                    right: want,
                });
            }
        }
        let ng = self.any_grad(&[q, k, v]);
        let keep = ng || self.keep_attention;
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            lay,
            keep,
        );
        Ok(self.push(Tensor::new(&want, out)?, Op::Attention { q, k, v, lay, probs }, ng))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            total += kernels::log_sum_exp(row) - row[t].to_f64();
            kernels::softmax_row(row);
        }
        let loss = T::from_f64(total / r as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar node. Gradients accumulate into every
    /// node that needs one, including leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Config("backward on a no-grad graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            backprop(before, &rest[0], &g);
            rest[0].value.put_grad(g);
        }
        Ok(())
    }
}

fn input<T: Scalar>(before: &mut [Node<T>], v: Var) -> Option<&mut Tensor<T>> {
    let node = &mut before[v.0];
    node.needs_grad.then_some(&mut node.value)
}

fn backprop<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if before[a.0].needs_grad {
                let bd = before[b.0].value.data().to_vec();
                let da = before[a.0].value.grad_buffer();
                kernels::matmul_grad_lhs(g, &bd, da, m, k, n);
            }
            if before[b.0].needs_grad {
                let ad = before[a.0].value.data().to_vec();
                let db = before[b.0].value.grad_buffer();
                kernels::matmul_grad_rhs(&ad, g, db, m, k, n);
            }
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(t) = input(before, v) {
                    t.accumulate_grad(g);
                }
            }
        }
        &Op::Mul { a, b } => {
            let ad = before[a.0].value.data().to_vec();
            let bd = before[b.0].value.data().to_vec();
            if let Some(t) = input(before, a) {
                let ga: Vec<T> = g.iter().zip(&bd).map(|(&x, &y)| x * y).collect();
                t.accumulate_grad(&ga);
            }
            if let Some(t) = input(before, b) {
                let gb: Vec<T> = g.iter().zip(&ad).map(|(&x, &y)| x * y).collect();
                t.accumulate_grad(&gb);
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(t) = input(before, a) {
                let ga: Vec<T> = g.iter().map(|&x| x * factor).collect();
                t.accumulate_grad(&ga);
            }
        }
        &Op::Sum { a } => {
            if let Some(t) = input(before, a) {
                let ga = vec![g[0]; t.len()];
                t.accumulate_grad(&ga);
            }
        }
        &Op::Abs { a } => {
            if let Some(t) = input(before, a) {
                let ga: Vec<T> = t
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        if x > T::ZERO {
                            gi
                        } else if x < T::ZERO {
                            -gi
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                t.accumulate_grad(&ga);
            }
        }
        &Op::SoftmaxRows { a } => {
            if let Some(t) = input(before, a) {
                let c = *t.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut ga = vec![T::ZERO; y.len()];
                for ((gr, yr), out) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| (a * b).to_f64()).sum();
                    let dot = T::from_f64(dot);
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                t.accumulate_grad(&ga);
            }
        }
        Op::Embedding { table, ids, dim } => {
            if let Some(t) = input(before, *table) {
                let buf = t.grad_buffer();
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gi) in buf[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *o += gi;
                    }
                }
            }
        }
        Op::SelectRows { a, rows, cols } => {
            if let Some(t) = input(before, *a) {
                let buf = t.grad_buffer();
                for (r, &src) in rows.iter().enumerate() {
                    for (o, &gi) in buf[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *o += gi;
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xd = before[x.0].value.data().to_vec();
            let gd = before[gain.0].value.data().to_vec();
            let d = gd.len();
            if before[x.0].needs_grad {
                let dx = before[x.0].value.grad_buffer();
                kernels::rmsnorm_backward(&xd, &gd, inv_rms, g, d, Some(dx), None);
            }
            if before[gain.0].needs_grad {
                let dg = before[gain.0].value.grad_buffer();
                kernels::rmsnorm_backward(&xd, &gd, inv_rms, g, d, None, Some(dg));
            }
        }
        &Op::SwiGlu { gate, up } => {
            let gd = before[gate.0].value.data().to_vec();
            let ud = before[up.0].value.data().to_vec();
            if let Some(t) = input(before, gate) {
                let ga: Vec<T> = gd
                    .iter()
                    .zip(&ud)
                    .zip(g)
                    .map(|((&a, &u), &gi)| {
                        let af = a.to_f64();
                        let s = kernels::sigmoid(af);
                        gi * u * T::from_f64(s * (1.0 + af * (1.0 - s)))
                    })
                    .collect();
                t.accumulate_grad(&ga);
            }
            if let Some(t) = input(before, up) {
                let gu: Vec<T> = gd
                    .iter()
                    .zip(g)
                    .map(|(&a, &gi)| {
                        let af = a.to_f64();
                        gi * T::from_f64(af * kernels::sigmoid(af))
                    })
                    .collect();
                t.accumulate_grad(&gu);
            }
        }
        Op::Rope { x, cos, sin, head_dim } => {
            if let Some(t) = input(before, *x) {
                let w = *t.shape().last().unwrap_or(&1);
                let mut gx = g.to_vec();
                kernels::rope_rotate(&mut gx, cos, sin, w, *head_dim, true);
                t.accumulate_grad(&gx);
            }
        }
        Op::Attention { q, k, v, lay, probs } => {
            let probs = probs.as_ref().expect("attention probs retained when grad is needed");
            let qd = before[q.0].value.data().to_vec();
            let kd = before[k.0].value.data().to_vec();
            let vd = before[v.0].value.data().to_vec();
            let mut dq = vec![T::ZERO; qd.len()];
            let mut dk = vec![T::ZERO; kd.len()];
            let mut dv = vec![T::ZERO; vd.len()];
            kernels::attention_backward(&qd, &kd, &vd, probs, g, *lay, &mut dq, &mut dk, &mut dv);
            for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(t) = input(before, var) {
                    t.accumulate_grad(&grad);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(t) = input(before, *logits) {
                let c = probs.len() / targets.len();
                let coef = g[0] / T::from_usize(targets.len());
                let mut gl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (r, &tg) in targets.iter().enumerate() {
                    gl[r * c + tg] -= coef;
                }
                t.accumulate_grad(&gl);
            }
        }
    }
}
