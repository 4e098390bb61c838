//! Recording tape for reverse-mode differentiation.
//!
//! Every node holds a rank-2 value (`rows × cols`). Operations are coarse
//! (a dense layer, a full multi-head attention block, a layer norm) so the
//! tape stays short and each backward rule is written out by hand.

use crate::error::{Error, Result};
use crate::nn::loss;

pub(crate) type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Shape of a batch of padded sequences laid out as `batch * seq_len` rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RowLayout {
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl RowLayout {
    pub fn rows(&self) -> usize {
        self.lengths.len() * self.seq_len
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: RowLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        grad: Vec<f64>,
    },
    ScaledSigmoidMse {
        raw: NodeId,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Linear { x, w, b } => self.req(*x) || self.req(*w) || self.req(*b),
            Op::Add(a, b) => self.req(*a) || self.req(*b),
            Op::Gelu(x) | Op::Relu(x) => self.req(*x),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.req(*x) || self.req(*gamma) || self.req(*beta)
            }
            Op::Gather { table, .. } => self.req(*table),
            Op::Attention { q, k, v, .. } => self.req(*q) || self.req(*k) || self.req(*v),
            Op::CrossEntropy { logits, .. } => self.req(*logits),
            Op::ScaledSigmoidMse { raw, .. } => self.req(*raw),
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Input)
    }

    pub fn param(&mut self, index: usize, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Param(index))
    }

    /// `y = x Wᵀ + b (+ noise)` with `W` stored as `out × in`.
    ///
    /// `noise` is either one value per output feature, broadcast over rows,
    /// or one value per output element. It shifts the value only; the
    /// backward rule is unchanged.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, noise: Option<&[f64]>) -> Result<NodeId> {
        let (rows, d_in) = self.dims(x);
        let (d_out, w_in) = self.dims(w);
        if w_in != d_in || self.nodes[b].value.len() != d_out {
            return Err(Error::Dimension(format!(
                "dense layer expects {w_in} inputs and {d_out} biases, got {d_in} inputs and {} biases",
                self.nodes[b].value.len()
            )));
        }
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let mut y = vec![0.0; rows * d_out];
        for i in 0..rows {
            let xi = &xv[i * d_in..(i + 1) * d_in];
            let yi = &mut y[i * d_out..(i + 1) * d_out];
            for (j, yij) in yi.iter_mut().enumerate() {
                let wj = &wv[j * d_in..(j + 1) * d_in];
                *yij = dot(xi, wj) + bv[j];
            }
        }
        if let Some(z) = noise {
            if z.len() == d_out {
                for yi in y.chunks_mut(d_out) {
                    for (v, n) in yi.iter_mut().zip(z) {
                        *v += n;
                    }
                }
            } else if z.len() == y.len() {
                for (v, n) in y.iter_mut().zip(z) {
                    *v += n;
                }
            } else {
                return Err(Error::Dimension(format!(
                    "noise of length {} for a {rows}×{d_out} output",
                    z.len()
                )));
            }
        }
        Ok(self.push(rows, d_out, y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, v, Op::Add(a, b)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|&t| gelu(t)).collect();
        let (r, c) = self.dims(x);
        self.push(r, c, v, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|&t| t.max(0.0)).collect();
        let (r, c) = self.dims(x);
        self.push(r, c, v, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims(x);
        if self.nodes[gamma].value.len() != cols || self.nodes[beta].value.len() != cols {
            return Err(Error::Dimension(format!(
                "layer norm over {cols} features with mismatched affine parameters"
            )));
        }
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let bt = &self.nodes[beta].value;
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for c in 0..cols {
                let h = (row[c] - mean) * r;
                xhat[i * cols + c] = h;
                y[i * cols + c] = h * g[c] + bt[c];
            }
        }
        Ok(self.push(
            rows,
            cols,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup into `table` (an embedding or a pooling selection).
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (t_rows, cols) = self.dims(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t_rows) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for a table of {t_rows} rows"
            )));
        }
        let tv = &self.nodes[table].value;
        let mut v = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            v.extend_from_slice(&tv[r * cols..(r + 1) * cols]);
        }
        let n = rows.len();
        Ok(self.push(n, cols, v, Op::Gather { table, rows }))
    }

    /// Scaled dot-product multi-head attention over padded sequences.
    /// Keys at positions `>= length` are masked out.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, layout: RowLayout) -> Result<NodeId> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) || rows != layout.rows() {
            return Err(Error::Dimension(
                "attention inputs disagree with the batch layout".into(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "{d} features cannot be split into {heads} heads"
            )));
        }
        let dh = d / heads;
        let t = layout.seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let mut probs = vec![0.0; layout.lengths.len() * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for (b, &len) in layout.lengths.iter().enumerate() {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    let p = &mut probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &kv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        p[j] = dot(qi, kj) * scale;
                        max = max.max(p[j]);
                    }
                    let mut sum = 0.0;
                    for pj in p[..len].iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    for pj in p[..len].iter_mut() {
                        *pj /= sum;
                    }
                    let oi = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    for j in 0..len {
                        let vj = &vv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        axpy(p[j], vj, oi);
                    }
                }
            }
        }
        Ok(self.push(
            rows,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (_, classes) = self.dims(logits);
        let (l, grad) = loss::cross_entropy_with_grad(&self.nodes[logits].value, classes, labels)?;
        Ok(self.push(1, 1, vec![l], Op::CrossEntropy { logits, grad }))
    }

    pub fn scaled_sigmoid_mse(&mut self, raw: NodeId, targets: &[f64]) -> Result<NodeId> {
        let (l, grad) = loss::scaled_sigmoid_mse_with_grad(&self.nodes[raw].value, targets)?;
        Ok(self.push(1, 1, vec![l], Op::ScaledSigmoidMse { raw, grad }))
    }

    /// Attention probabilities of an attention node, `[batch][head][query][key]`.
    #[cfg(test)]
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from the scalar node `root`, returning the gradient
    /// of every parameter node as `(parameter index, gradient)`.
    pub fn backward(self, root: NodeId) -> Result<Vec<(usize, Vec<f64>)>> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::State("backward needs a scalar loss node".into()));
        }
        let Tape { nodes } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        let mut out = Vec::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(index) => out.push((*index, g)),
                Op::Linear { x, w, b } => {
                    let (rows, d_in) = (nodes[*x].rows, nodes[*x].cols);
                    let d_out = node.cols;
                    if nodes[*b].requires_grad {
                        let gb = grad_slot(&mut grads, *b, d_out);
                        for gi in g.chunks(d_out) {
                            for (a, v) in gb.iter_mut().zip(gi) {
                                *a += v;
                            }
                        }
                    }
                    if nodes[*w].requires_grad {
                        let xv = &nodes[*x].value;
                        let gw = grad_slot(&mut grads, *w, d_out * d_in);
                        for i in 0..rows {
                            let xi = &xv[i * d_in..(i + 1) * d_in];
                            for j in 0..d_out {
                                let gij = g[i * d_out + j];
                                if gij != 0.0 {
                                    axpy(gij, xi, &mut gw[j * d_in..(j + 1) * d_in]);
                                }
                            }
                        }
                    }
                    if nodes[*x].requires_grad {
                        let wv = &nodes[*w].value;
                        let gx = grad_slot(&mut grads, *x, rows * d_in);
                        for i in 0..rows {
                            let gxi = &mut gx[i * d_in..(i + 1) * d_in];
                            for j in 0..d_out {
                                let gij = g[i * d_out + j];
                                if gij != 0.0 {
                                    axpy(gij, &wv[j * d_in..(j + 1) * d_in], gxi);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in &[*a, *b] {
                        if nodes[src].requires_grad {
                            add_into(grad_slot(&mut grads, src, g.len()), &g);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = &nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, g.len());
                    for ((a, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *a += gi * gelu_grad(*xi);
                    }
                }
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    let gx = grad_slot(&mut grads, *x, g.len());
                    for ((a, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = (node.rows, node.cols);
                    if nodes[*beta].requires_grad {
                        let gb = grad_slot(&mut grads, *beta, cols);
                        for gi in g.chunks(cols) {
                            add_into(gb, gi);
                        }
                    }
                    if nodes[*gamma].requires_grad {
                        let gg = grad_slot(&mut grads, *gamma, cols);
                        for (gi, hi) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for c in 0..cols {
                                gg[c] += gi[c] * hi[c];
                            }
                        }
                    }
                    if nodes[*x].requires_grad {
                        let gamma_v = &nodes[*gamma].value;
                        let gx = grad_slot(&mut grads, *x, rows * cols);
                        let n = cols as f64;
                        for i in 0..rows {
                            let gi = &g[i * cols..(i + 1) * cols];
                            let hi = &xhat[i * cols..(i + 1) * cols];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for c in 0..cols {
                                let d = gi[c] * gamma_v[c];
                                sum_d += d;
                                sum_dh += d * hi[c];
                            }
                            for c in 0..cols {
                                let d = gi[c] * gamma_v[c];
                                gx[i * cols + c] += rstd[i] * (d - sum_d / n - hi[c] * sum_dh / n);
                            }
                        }
                    }
                }
                Op::Gather { table, rows } => {
                    let cols = node.cols;
                    let (t_rows, _) = (nodes[*table].rows, cols);
                    let gt = grad_slot(&mut grads, *table, t_rows * cols);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gt[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let d = node.cols;
                    let dh = d / heads;
                    let t = layout.seq_len;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                    let mut gq = vec![0.0; qv.len()];
                    let mut gk = vec![0.0; kv.len()];
                    let mut gv = vec![0.0; vv.len()];
                    let mut dp = vec![0.0; t];
                    for (b, &len) in layout.lengths.iter().enumerate() {
                        for h in 0..*heads {
                            let off = h * dh;
                            for i in 0..t {
                                let row_i = (b * t + i) * d + off;
                                let go = &g[row_i..row_i + dh];
                                let p = &probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                                let mut weighted = 0.0;
                                for j in 0..len {
                                    let row_j = (b * t + j) * d + off;
                                    axpy(p[j], go, &mut gv[row_j..row_j + dh]);
                                    dp[j] = dot(go, &vv[row_j..row_j + dh]);
                                    weighted += dp[j] * p[j];
                                }
                                for j in 0..len {
                                    let ds = p[j] * (dp[j] - weighted) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let row_j = (b * t + j) * d + off;
                                    axpy(ds, &kv[row_j..row_j + dh], &mut gq[row_i..row_i + dh]);
                                    axpy(ds, &qv[row_i..row_i + dh], &mut gk[row_j..row_j + dh]);
                                }
                            }
                        }
                    }
                    for (src, gs) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if nodes[src].requires_grad {
                            add_into(grad_slot(&mut grads, src, gs.len()), &gs);
                        }
                    }
                }
                Op::CrossEntropy { logits, grad } => {
                    let gl = grad_slot(&mut grads, *logits, grad.len());
                    for (a, gi) in gl.iter_mut().zip(grad) {
                        *a += g[0] * gi;
                    }
                }
                Op::ScaledSigmoidMse { raw, grad } => {
                    let gr = grad_slot(&mut grads, *raw, grad.len());
                    for (a, gi) in gr.iter_mut().zip(grad) {
                        *a += g[0] * gi;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise without reassociating
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        let eps = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_scalar_gradient() {
        // loss = w * x with w = 2, x = 3
        let mut tape = Tape::new();
        let x = tape.input(1, 1, vec![3.0]);
        let w = tape.param(0, 1, 1, vec![2.0]);
        let b = tape.input(1, 1, vec![0.0]);
        let y = tape.linear(x, w, b, None).unwrap();
        assert_eq!(tape.value(y), &[6.0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads, vec![(0, vec![3.0])]);
    }

    #[test]
    fn linear_forward_by_hand() {
        let mut tape = Tape::new();
        let x = tape.input(1, 2, vec![1.0, 1.0]);
        let w = tape.param(0, 1, 2, vec![1.0, 2.0]);
        let b = tape.param(1, 1, 1, vec![0.0]);
        let y = tape.linear(x, w, b, None).unwrap();
        assert_eq!(tape.value(y), &[3.0]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let layout = RowLayout {
            seq_len: 3,
            lengths: vec![3, 2],
        };
        let d = 4;
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..6 * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let q = tape.input(6, d, vals.clone());
        let k = tape.input(6, d, vals.iter().rev().cloned().collect());
        let v = tape.input(6, d, vals);
        let a = tape.attention(q, k, v, 2, layout).unwrap();
        let probs = tape.attention_probs(a).unwrap();
        for (r, row) in probs.chunks(3).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            // second sequence has length 2: third key never attended
            if r >= 6 {
                assert_eq!(row[2], 0.0);
            }
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(0, 1, 2, vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }
}
