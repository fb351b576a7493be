//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Parameter leaves borrow their values from a
//! [`ParamStore`] instead of copying them.

use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Probabilities are floored at this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    Nll {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Kl {
        logits: NodeId,
        log_target: Tensor,
        probs: Tensor,
    },
    TargetKl {
        logits: NodeId,
        targets: Vec<usize>,
        log_target: Vec<f64>,
        probs: Tensor,
    },
}

struct Node {
    // Empty for parameter leaves, whose value lives in the store.
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Leaf for a parameter block; repeated calls return the same node.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes[p.index()] {
            return id;
        }
        let id = self.push(Tensor::zeros(0, 0), Op::Param(p));
        self.param_nodes[p.index()] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, v.cols()), r.shape(), "add_row shape");
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut xhat = Tensor::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for i in 0..r {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Row softmax. `allowed` (row-major, same shape as `x`) masks entries to
    /// zero probability; every row must keep at least one entry.
    pub fn softmax(&mut self, x: NodeId, allowed: Option<&Rc<Vec<bool>>>) -> NodeId {
        let v = softmax_rows(self.value(x), allowed.map(|m| m.as_slice()));
        self.push(v, Op::Softmax { x })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let v = Tensor::from_vec(rows.len(), xv.cols(), data);
        self.push(v, Op::SelectRows { x, rows })
    }

    /// Embedding lookup: row `ids[i]` of the table becomes row `i`.
    pub fn gather(&mut self, table: ParamId, ids: Vec<usize>) -> NodeId {
        let table = self.param(table);
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &i in &ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::from_vec(ids.len(), tv.cols(), data);
        self.push(v, Op::Gather { table, ids })
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let s = terms
            .iter()
            .map(|&(n, w)| self.value(n).item() * w)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms))
    }

    /// `Σ_i −ln max(softmax(logits_i)[targets_i], floor)`.
    pub fn nll(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(probs.rows(), targets.len(), "nll target count");
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -floored_ln(probs.get(i, t)))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                targets,
                probs,
            },
        )
    }

    /// `Σ_i KL(softmax(logits_i) ‖ target_i)` with `target` held constant.
    pub fn kl_to(&mut self, logits: NodeId, target: &Tensor) -> NodeId {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(probs.shape(), target.shape(), "kl target shape");
        let mut log_target = target.clone();
        for v in log_target.data_mut() {
            *v = floored_ln(*v);
        }
        let loss = probs
            .data()
            .iter()
            .zip(log_target.data())
            .map(|(&p, &lq)| p * (floored_ln(p) - lq))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Kl {
                logits,
                log_target,
                probs,
            },
        )
    }

    /// `Σ_i p_i[y_i] · ln(p_i[y_i] / q_i[y_i])` with `q` held constant: the
    /// per-target-token divergence restricted to the reference words.
    pub fn target_kl(&mut self, logits: NodeId, targets: Vec<usize>, target_probs: &[f64]) -> NodeId {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(targets.len(), probs.rows());
        assert_eq!(target_probs.len(), probs.rows());
        let log_target: Vec<f64> = target_probs.iter().map(|&q| floored_ln(q)).collect();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let p = probs.get(i, y);
                p * (floored_ln(p) - log_target[i])
            })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::TargetKl {
                logits,
                targets,
                log_target,
                probs,
            },
        )
    }

    /// Reverse pass from a scalar node. Returns gradients for every parameter
    /// block; blocks the loss does not touch get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out, 1.0)?;
        Ok(out)
    }

    /// Reverse pass that adds `scale` times the gradients into `out`.
    pub fn backward_into(&self, loss: NodeId, out: &mut Gradients, scale: f64) -> Result<()> {
        if out.len() != self.params.len() {
            return Err(Error::Model("gradient buffer does not match the parameters".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Model(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.get_mut(*p).add_scaled(&g, scale),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_tn(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    d.scale_assign(*s);
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        *dv *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let (r, c) = g.shape();
                    let mut dgain = Tensor::zeros(1, c);
                    let mut dbias = Tensor::zeros(1, c);
                    let mut dx = Tensor::zeros(r, c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        for j in 0..c {
                            dgain.data_mut()[j] += gr[j] * xr[j];
                            dbias.data_mut()[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let mut dx = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = pr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        off += c;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let dp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::WeightedSum(terms) => {
                    let gs = g.item();
                    for &(n, w) in terms {
                        acc(&mut grads, n, Tensor::scalar(gs * w));
                    }
                }
                Op::Nll {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g.item();
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        if probs.get(r, t) > PROB_FLOOR {
                            let row = d.row_mut(r);
                            row[t] -= 1.0;
                            for v in row.iter_mut() {
                                *v *= gs;
                            }
                        } else {
                            d.row_mut(r).fill(0.0);
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::Kl {
                    logits,
                    log_target,
                    probs,
                } => {
                    let gs = g.item();
                    let mut d = Tensor::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        let p = probs.row(r);
                        let lq = log_target.row(r);
                        let dp: Vec<f64> = p
                            .iter()
                            .zip(lq)
                            .map(|(&pv, &l)| {
                                floored_ln(pv) - l + if pv > PROB_FLOOR { 1.0 } else { 0.0 }
                            })
                            .collect();
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = gs * p[j] * (dp[j] - dot);
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::TargetKl {
                    logits,
                    targets,
                    log_target,
                    probs,
                } => {
                    let gs = g.item();
                    let mut d = Tensor::zeros(probs.rows(), probs.cols());
                    for (r, &y) in targets.iter().enumerate() {
                        let p = probs.row(r);
                        let py = p[y];
                        let dpy = floored_ln(py) - log_target[r] + if py > PROB_FLOOR { 1.0 } else { 0.0 };
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            let delta = if j == y { 1.0 } else { 0.0 };
                            *o = gs * dpy * py * (delta - p[j]);
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
