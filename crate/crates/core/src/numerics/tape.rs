//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape in reverse and accumulates gradients into the gradient buffer of every
//! leaf created with `requires_grad`. Calling `backward` twice without
//! `zero_grad` adds the second set of gradients to the first.

use std::collections::HashMap;

use super::kernels::{self, gemm, gemm_strided};
use super::{Param, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows in a packed token matrix (one sequence).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    MulConst {
        x: Var,
        mask: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    ClampMax {
        x: Var,
        max: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segs: Vec<Segment>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter once per tape; later calls with the same name reuse the node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.as_matrix()
    }

    // ---- ops ----

    /// `op(a) · op(b)`; `ta`/`tb` read the stored operand transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix(a)?;
        let (br, bc) = self.matrix(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        ensure!(
            k == k2,
            Dimension,
            "matmul inner dimensions {k} and {k2} differ"
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "add: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "mul: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul(a, b), rg))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.cols();
        ensure!(
            self.data(row).len() == d,
            Dimension,
            "add_row: bias length {} != {d}",
            self.data(row).len()
        );
        let r = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(d) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::AddRow { x, row },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        ensure!(
            self.data(s).len() == 1,
            Dimension,
            "mul_scalar: scale must hold one value"
        );
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::MulScalar { x, s },
            rg,
        ))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        ensure!(
            mask.len() == self.data(x).len(),
            Dimension,
            "mask length mismatch"
        );
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::MulConst { x, mask },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(t, Op::Exp(x), rg)
    }

    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.min(max)).collect();
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        self.push(t, Op::ClampMax { x, max }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.cols();
        ensure!(d >= 1, Dimension, "layer norm needs a non-empty last axis");
        ensure!(
            self.data(gain).len() == d && self.data(bias).len() == d,
            Dimension,
            "layer norm gain/bias must have length {d}"
        );
        let n = self.data(x).len();
        let mut out = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        let mut inv = vec![0.0; n / d];
        kernels::layer_norm_forward(
            self.data(x),
            self.data(gain),
            self.data(bias),
            eps,
            d,
            &mut out,
            Some((&mut xhat, &mut inv)),
        );
        finite(&out, "layer_norm")?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x)?;
        finite(self.data(x), "softmax_rows input")?;
        let mut out = self.data(x).to_vec();
        kernels::softmax_rows_inplace(&mut out, m, n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[total × d]`; each segment attends only within itself,
    /// and with `causal` a position attends to itself and earlier positions only.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (total, d) = self.matrix(q)?;
        ensure!(
            self.shape(k) == [total, d] && self.shape(v) == [total, d],
            Dimension,
            "attention q/k/v shapes differ"
        );
        ensure!(
            heads >= 1 && d % heads == 0,
            Dimension,
            "d={d} not divisible by heads={heads}"
        );
        let covered: usize = segs.iter().map(|s| s.len).sum();
        ensure!(
            covered == total,
            Dimension,
            "segments cover {covered} rows of {total}"
        );
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_probs: usize = segs.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; n_probs];
        let mut out = vec![0.0; total * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut off = 0;
        for s in segs {
            let l = s.len;
            for h in 0..heads {
                let base = s.start * d + h * dh;
                let p = &mut probs[off..off + l * l];
                gemm_strided(
                    l,
                    dh,
                    l,
                    &qd[base..],
                    d as isize,
                    1,
                    &kd[base..],
                    1,
                    d as isize,
                    p,
                    l as isize,
                    1,
                    0.0,
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            *x * scale
                        };
                    }
                    kernels::softmax_inplace(row);
                }
                gemm_strided(
                    l,
                    l,
                    dh,
                    p,
                    l as isize,
                    1,
                    &vd[base..],
                    d as isize,
                    1,
                    &mut out[base..],
                    d as isize,
                    1,
                    0.0,
                );
                off += l * l;
            }
        }
        finite(&out, "attention")?;
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            segs: segs.to_vec(),
            heads,
            probs,
        };
        Ok(self.push(Tensor::new(vec![total, d], out)?, op, rg))
    }

    /// `out[i] = x[idx[i]]` over rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x)?;
        ensure!(!idx.is_empty(), Dimension, "gather_rows: empty index");
        ensure!(
            idx.iter().all(|&i| i < r),
            Input,
            "gather_rows: index out of range (rows = {r})"
        );
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the rows of each segment, giving one row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let (r, c) = self.matrix(x)?;
        ensure!(!segs.is_empty(), Dimension, "segment_mean: no segments");
        ensure!(
            segs.iter().all(|s| s.len > 0 && s.start + s.len <= r),
            Dimension,
            "segment_mean: segment out of range"
        );
        let xd = self.data(x);
        let mut out = vec![0.0; segs.len() * c];
        for (si, s) in segs.iter().enumerate() {
            let o = &mut out[si * c..(si + 1) * c];
            for row in s.start..s.start + s.len {
                for (a, b) in o.iter_mut().zip(&xd[row * c..(row + 1) * c]) {
                    *a += b;
                }
            }
            let inv = 1.0 / s.len as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segs.len(), c], out)?,
            Op::SegmentMean {
                x,
                segs: segs.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm. A zero row is a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x)?;
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(
                n > 0.0 && n.is_finite(),
                Numeric,
                "row {i} has zero or non-finite norm"
            );
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::NormalizeRows { x, norms },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix(a)?;
        let (rb, cb) = self.matrix(b)?;
        ensure!(
            ra == rb,
            Dimension,
            "concat_cols: row counts {ra} and {rb} differ"
        );
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ra, ca + cb], out)?,
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(logits)?;
        ensure!(
            labels.len() == m,
            Dimension,
            "cross_entropy: {} labels for {m} rows",
            labels.len()
        );
        ensure!(
            labels.iter().all(|&y| y < n),
            Input,
            "cross_entropy: label out of range"
        );
        let ld = self.data(logits);
        finite(ld, "cross_entropy logits")?;
        let mut probs = ld.to_vec();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &ld[i * n..(i + 1) * n];
            loss += kernels::log_sum_exp(row) - row[y];
        }
        kernels::softmax_rows_inplace(&mut probs, m, n);
        loss /= m as f64;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.data(loss).len() == 1,
            Usage,
            "backward needs a scalar root, got shape {:?}",
            self.shape(loss)
        );
        finite(self.data(loss), "loss")?;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                finite(g, "gradient")?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if ta {
                    self.shape(*a)[0]
                } else {
                    self.shape(*a)[1]
                };
                if let Some(ai) = acc(grads, *a) {
                    let ga = grads[ai].as_mut().unwrap();
                    if !ta {
                        gemm(m, n, k, g, false, self.data(*b), !tb, ga, 1.0);
                    } else {
                        gemm(k, n, m, self.data(*b), tb, g, true, ga, 1.0);
                    }
                }
                if let Some(bi) = acc(grads, *b) {
                    let gb = grads[bi].as_mut().unwrap();
                    if !tb {
                        gemm(k, m, n, self.data(*a), !ta, g, false, gb, 1.0);
                    } else {
                        gemm(n, m, k, g, true, self.data(*a), ta, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(vi) = acc(grads, v) {
                        add_into(grads[vi].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ai) = acc(grads, *a) {
                    let ga = grads[ai].as_mut().unwrap();
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *o += gv * bv;
                    }
                }
                if let Some(bi) = acc(grads, *b) {
                    let gb = grads[bi].as_mut().unwrap();
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(xi) = acc(grads, *x) {
                    add_into(grads[xi].as_mut().unwrap(), g);
                }
                if let Some(ri) = acc(grads, *row) {
                    let gr = grads[ri].as_mut().unwrap();
                    let d = gr.len();
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(xi) = acc(grads, *x) {
                    for (o, gv) in grads[xi].as_mut().unwrap().iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                if let Some(xi) = acc(grads, *x) {
                    for (o, gv) in grads[xi].as_mut().unwrap().iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                }
                if let Some(si) = acc(grads, *s) {
                    let dot: f64 = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    grads[si].as_mut().unwrap()[0] += dot;
                }
            }
            Op::MulConst { x, mask } => {
                if let Some(xi) = acc(grads, *x) {
                    for ((o, gv), m) in grads[xi].as_mut().unwrap().iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(xi) = acc(grads, *x) {
                    for ((o, gv), xv) in grads[xi]
                        .as_mut()
                        .unwrap()
                        .iter_mut()
                        .zip(g)
                        .zip(self.data(*x))
                    {
                        *o += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(xi) = acc(grads, *x) {
                    for ((o, gv), y) in grads[xi]
                        .as_mut()
                        .unwrap()
                        .iter_mut()
                        .zip(g)
                        .zip(node.value.data())
                    {
                        *o += gv * y;
                    }
                }
            }
            Op::ClampMax { x, max } => {
                if let Some(xi) = acc(grads, *x) {
                    for ((o, gv), xv) in grads[xi]
                        .as_mut()
                        .unwrap()
                        .iter_mut()
                        .zip(g)
                        .zip(self.data(*x))
                    {
                        if *xv <= *max {
                            *o += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let d = node.value.cols();
                let gn = self.data(*gain);
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    let mut dxh = vec![0.0; d];
                    for (r, &iv) in inv.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gn[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += iv * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gi) = acc(grads, *gain) {
                    let gg = grads[gi].as_mut().unwrap();
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(bi) = acc(grads, *bias) {
                    let gb = grads[bi].as_mut().unwrap();
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(xi) = acc(grads, *x) {
                    let n = node.value.cols();
                    let gx = grads[xi].as_mut().unwrap();
                    for ((y, gr), o) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, segs, *heads, probs, grads);
            }
            Op::GatherRows { x, idx } => {
                if let Some(xi) = acc(grads, *x) {
                    let c = node.value.cols();
                    let gx = grads[xi].as_mut().unwrap();
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SegmentMean { x, segs } => {
                if let Some(xi) = acc(grads, *x) {
                    let c = node.value.cols();
                    let gx = grads[xi].as_mut().unwrap();
                    for (si, s) in segs.iter().enumerate() {
                        let inv = 1.0 / s.len as f64;
                        let gs = &g[si * c..(si + 1) * c];
                        for row in s.start..s.start + s.len {
                            for (o, gv) in gx[row * c..(row + 1) * c].iter_mut().zip(gs) {
                                *o += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(xi) = acc(grads, *x) {
                    let c = node.value.cols();
                    let gx = grads[xi].as_mut().unwrap();
                    for (r, n) in norms.iter().enumerate() {
                        let y = &node.value.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(xi) = acc(grads, *x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gx = grads[xi].as_mut().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                if let Some(ai) = acc(grads, *a) {
                    let ga = grads[ai].as_mut().unwrap();
                    for (r, o) in ga.chunks_mut(ca).enumerate() {
                        add_into(o, &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if let Some(bi) = acc(grads, *b) {
                    let gb = grads[bi].as_mut().unwrap();
                    for (r, o) in gb.chunks_mut(cb).enumerate() {
                        add_into(o, &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(li) = acc(grads, *logits) {
                    let m = labels.len();
                    let n = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let gl = grads[li].as_mut().unwrap();
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..n {
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl[i * n + j] += scale * (probs[i * n + j] - t);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(xi) = acc(grads, *x) {
                    grads[xi]
                        .as_mut()
                        .unwrap()
                        .iter_mut()
                        .for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(xi) = acc(grads, *x) {
                    let gx = grads[xi].as_mut().unwrap();
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        segs: &[Segment],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (need_q, need_k, need_v) = (
            self.requires_grad(q),
            self.requires_grad(k),
            self.requires_grad(v),
        );
        let mut gq = need_q.then(|| vec![0.0; qd.len()]);
        let mut gk = need_k.then(|| vec![0.0; kd.len()]);
        let mut gv = need_v.then(|| vec![0.0; vd.len()]);
        let mut off = 0;
        let mut dp = Vec::new();
        for s in segs {
            let l = s.len;
            for h in 0..heads {
                let base = s.start * d + h * dh;
                let p = &probs[off..off + l * l];
                off += l * l;
                if let Some(gv) = gv.as_mut() {
                    // dV = P^T dO
                    gemm_strided(
                        l,
                        l,
                        dh,
                        p,
                        1,
                        l as isize,
                        &g[base..],
                        d as isize,
                        1,
                        &mut gv[base..],
                        d as isize,
                        1,
                        1.0,
                    );
                }
                if !(need_q || need_k) {
                    continue;
                }
                dp.clear();
                dp.resize(l * l, 0.0);
                // dP = dO V^T
                gemm_strided(
                    l,
                    dh,
                    l,
                    &g[base..],
                    d as isize,
                    1,
                    &vd[base..],
                    1,
                    d as isize,
                    &mut dp,
                    l as isize,
                    1,
                    0.0,
                );
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm_strided(
                        l,
                        l,
                        dh,
                        &dp,
                        l as isize,
                        1,
                        &kd[base..],
                        d as isize,
                        1,
                        &mut gq[base..],
                        d as isize,
                        1,
                        1.0,
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm_strided(
                        l,
                        l,
                        dh,
                        &dp,
                        1,
                        l as isize,
                        &qd[base..],
                        d as isize,
                        1,
                        &mut gk[base..],
                        d as isize,
                        1,
                        1.0,
                    );
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                match &mut grads[var.0] {
                    Some(acc) => add_into(acc, &buf),
                    slot @ None => *slot = Some(buf),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or Inf")))
    }
}
