//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass and
//! records every primitive. [`Tape::backward`] replays the records in exact
//! reverse order and returns one gradient buffer per trainable parameter.

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor2};
use crate::error::{D2kError, Result};

/// Index of a parameter in a [`ParamStore`].
pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor2::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
}

/// One dense layer of an MLP, expressed as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    /// in × out
    pub weight: Var,
    /// 1 × out
    pub bias: Var,
    pub activation: Activation,
}

const LN_EPS: f64 = 1e-5;

/// Probability clamp applied before the logarithm in the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    GatherMean {
        table: Var,
        offsets: Vec<usize>,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: Vec<f64>,
    },
    HyperLinear {
        z: Var,
        w: Var,
        offset: usize,
        per_row: usize,
    },
    FmPairwise {
        e: Var,
        fields: usize,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor2>,
}

/// Per-parameter gradient buffers produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor2> {
        self.grads.iter()
    }
}

/// Recording of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &str, detail: String) -> D2kError {
    D2kError::config(format!("{op}: {detail}"))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(id), ..
            } => self.params.get(*id),
            Node { value: Some(t), .. } => t,
            Node { value: None, .. } => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(Op::Constant, t)
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_bt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul_bt(bv);
        Ok(self.push(Op::MatMulBT(a, b), out))
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.data();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for (o, x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= x;
        }
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(Op::Scale(x, s), out)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(Op::Tanh(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(Op::Sigmoid(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Linear => x,
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    /// `out[r] = src[idx[r]]`
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        let cols = sv.cols();
        let mut out = Tensor2::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            if i >= sv.rows() {
                return Err(shape_err(
                    "gather_rows",
                    format!("row {i} out of range for {} rows", sv.rows()),
                ));
            }
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        Ok(self.push(Op::GatherRows(src, idx), out))
    }

    /// Average-pooled row gather. Output row `g` is the mean of
    /// `table[indices[offsets[g]..offsets[g + 1]]]`.
    pub fn gather_mean(&mut self, table: Var, offsets: Vec<usize>, indices: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        let groups = offsets.len().saturating_sub(1);
        if offsets.first() != Some(&0) || offsets.last() != Some(&indices.len()) {
            return Err(shape_err("gather_mean", "offsets do not span indices".into()));
        }
        let d = tv.cols();
        let mut out = Tensor2::zeros(groups, d);
        for g in 0..groups {
            let span = &indices[offsets[g]..offsets[g + 1]];
            if span.is_empty() {
                return Err(shape_err("gather_mean", format!("group {g} is empty")));
            }
            let row = out.row_mut(g);
            for &i in span {
                if i >= tv.rows() {
                    return Err(shape_err(
                        "gather_mean",
                        format!("row {i} out of range for {} rows", tv.rows()),
                    ));
                }
                for (o, x) in row.iter_mut().zip(tv.row(i)) {
                    *o += x;
                }
            }
            let inv = 1.0 / span.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(
            Op::GatherMean {
                table,
                offsets,
                indices,
            },
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row count {} vs {rows}", pv.rows()),
                ));
            }
            cols += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p);
                let w = pv.cols();
                out.row_mut(r)[c0..c0 + w].copy_from_slice(pv.row(r));
                c0 += w;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Row-major reshape; data order is unchanged.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> ({rows}, {cols})", xv.shape()),
            ));
        }
        let out = xv.clone().reshaped(rows, cols);
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × cols` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err("layer_norm", format!("gain/bias shape for width {d}")));
        }
        let mut xhat = Tensor2::zeros(xv.rows(), d);
        let mut out = Tensor2::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// Multi-head scaled dot-product attention over a single set of rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let rows = self.value(q).rows();
        self.attention_grouped(q, k, v, heads, rows)
    }

    /// Attention applied independently to consecutive blocks of `group` rows
    /// (one block per sample in a batch).
    pub fn attention_grouped(&mut self, q: Var, k: Var, v: Var, heads: usize, group: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err(
                "attention",
                format!("Q {:?}, K {:?}, V {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (rows, d) = qv.shape();
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if group == 0 || rows % group != 0 {
            return Err(shape_err("attention", format!("{rows} rows not divisible into groups of {group}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / group;
        let mut probs = vec![0.0; blocks * heads * group * group];
        let mut out = Tensor2::zeros(rows, d);
        let mut scores = vec![0.0; group];
        for b in 0..blocks {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qv.row(b * group + i)[c0..c0 + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(b * group + j)[c0..c0 + dh];
                        *s = dot(qi, kj) * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[pbase + i * group..pbase + (i + 1) * group];
                    for (p, s) in prow.iter_mut().zip(&scores) {
                        *p = s / z;
                    }
                    let orow = &mut out.row_mut(b * group + i)[c0..c0 + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vv.row(b * group + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            out,
        ))
    }

    /// Per-row generated linear map. `w` holds one parameter vector per batch
    /// row; rows `b * per_row .. (b + 1) * per_row` of `z` use row `b` of `w`,
    /// reading a `dk × dk` matrix (row-major) at `offset` followed by a `dk` bias.
    pub fn hyper_linear(&mut self, z: Var, w: Var, offset: usize, per_row: usize) -> Result<Var> {
        let (zv, wv) = (self.value(z), self.value(w));
        let dk = zv.cols();
        if per_row == 0 || wv.rows() * per_row != zv.rows() {
            return Err(shape_err(
                "hyper_linear",
                format!("{} rows of z for {} generators x {per_row}", zv.rows(), wv.rows()),
            ));
        }
        if offset + dk * dk + dk > wv.cols() {
            return Err(shape_err(
                "hyper_linear",
                format!("slice {}..{} exceeds {} generated values", offset, offset + dk * (dk + 1), wv.cols()),
            ));
        }
        let mut out = Tensor2::zeros(zv.rows(), dk);
        for r in 0..zv.rows() {
            let wrow = wv.row(r / per_row);
            let mat = &wrow[offset..offset + dk * dk];
            let bias = &wrow[offset + dk * dk..offset + dk * dk + dk];
            let zr = zv.row(r);
            let orow = out.row_mut(r);
            for i in 0..dk {
                orow[i] = dot(&mat[i * dk..(i + 1) * dk], zr) + bias[i];
            }
        }
        Ok(self.push(
            Op::HyperLinear {
                z,
                w,
                offset,
                per_row,
            },
            out,
        ))
    }

    /// Factorization-machine second-order term: for each block of `fields`
    /// rows, `Σ_{a<b} ⟨e_a, e_b⟩`. Output is `blocks × 1`.
    pub fn fm_pairwise(&mut self, e: Var, fields: usize) -> Result<Var> {
        let ev = self.value(e);
        if fields == 0 || ev.rows() % fields != 0 {
            return Err(shape_err("fm_pairwise", format!("{} rows, {fields} fields", ev.rows())));
        }
        let blocks = ev.rows() / fields;
        let d = ev.cols();
        let mut out = Tensor2::zeros(blocks, 1);
        let mut sum = vec![0.0; d];
        for b in 0..blocks {
            sum.iter_mut().for_each(|s| *s = 0.0);
            let mut sq = 0.0;
            for f in 0..fields {
                let row = ev.row(b * fields + f);
                for (s, x) in sum.iter_mut().zip(row) {
                    *s += x;
                }
                sq += dot(row, row);
            }
            out.set(b, 0, 0.5 * (dot(&sum, &sum) - sq));
        }
        Ok(self.push(Op::FmPairwise { e, fields }, out))
    }

    /// Mean binary cross-entropy of probabilities `pred` (`n × 1`) against
    /// labels, with probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if labels.is_empty() {
            return Err(D2kError::Metric("empty batch".into()));
        }
        if pv.len() != labels.len() {
            return Err(shape_err("bce", format!("{} predictions, {} labels", pv.len(), labels.len())));
        }
        let loss = bce_mean(pv.data(), labels);
        Ok(self.push(
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            Tensor2::scalar(loss),
        ))
    }

    /// Chains dense layers: `act(x · W + b)` per layer.
    pub fn mlp(&mut self, x: Var, layers: &[DenseVars]) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            let (hin, win) = (self.value(h).cols(), self.value(l.weight).rows());
            if hin != win {
                return Err(shape_err("mlp", format!("layer {i} expects width {win}, got {hin}")));
            }
            let lin = self.matmul(h, l.weight)?;
            let lin = self.add_bias(lin, l.bias)?;
            h = self.activate(lin, l.activation);
        }
        Ok(h)
    }

    /// Backpropagates from a scalar node and returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor2>> = (0..n).map(|_| None).collect();
        let lv = self.value(loss);
        let mut seed = Tensor2::zeros(lv.rows(), lv.cols());
        seed.fill(1.0);
        grads[loss.0] = Some(seed);

        let mut out: Vec<Tensor2> = (0..self.params.len())
            .map(|i| {
                let (r, c) = self.params.get(i).shape();
                Tensor2::zeros(r, c)
            })
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => out[*id].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let ga = acc(&mut grads, *a, av);
                    matmul_bt_acc(g.data(), bv.data(), ga.data_mut(), n, m, k);
                    let gb = acc(&mut grads, *b, bv);
                    matmul_at_acc(av.data(), g.data(), gb.data_mut(), n, k, m);
                }
                Op::MatMulBT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                    let ga = acc(&mut grads, *a, av);
                    matmul_acc(g.data(), bv.data(), ga.data_mut(), n, m, k);
                    let gb = acc(&mut grads, *b, bv);
                    matmul_at_acc(g.data(), av.data(), gb.data_mut(), n, m, k);
                }
                Op::AddBias(x, bias) => {
                    acc(&mut grads, *x, self.value(*x)).add_assign(&g);
                    let gb = acc(&mut grads, *bias, self.value(*bias));
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, self.value(*a)).add_assign(&g);
                    acc(&mut grads, *b, self.value(*b)).add_assign(&g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, av);
                    for ((o, gg), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg * y;
                    }
                    let gb = acc(&mut grads, *b, bv);
                    for ((o, gg), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg * x;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc(&mut grads, *x, self.value(*x));
                    for (o, gg) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gg * s;
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let gx = acc(&mut grads, *x, y);
                    for ((o, gg), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gg * (1.0 - yy * yy);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let gx = acc(&mut grads, *x, y);
                    for ((o, gg), yy) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gg * yy * (1.0 - yy);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, xv);
                    for ((o, gg), xx) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *xx > 0.0 {
                            *o += gg;
                        }
                    }
                }
                Op::GatherRows(src, ids) => {
                    let gs = acc(&mut grads, *src, self.value(*src));
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, gg) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                }
                Op::GatherMean {
                    table,
                    offsets,
                    indices,
                } => {
                    let gt = acc(&mut grads, *table, self.value(*table));
                    for gi in 0..offsets.len() - 1 {
                        let span = &indices[offsets[gi]..offsets[gi + 1]];
                        let inv = 1.0 / span.len() as f64;
                        for &i in span {
                            for (o, gg) in gt.row_mut(i).iter_mut().zip(g.row(gi)) {
                                *o += gg * inv;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let gp = acc(&mut grads, p, pv);
                        for r in 0..g.rows() {
                            for (o, gg) in gp.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + w]) {
                                *o += gg;
                            }
                        }
                        c0 += w;
                    }
                }
                Op::Reshape(x) => {
                    let gx = acc(&mut grads, *x, self.value(*x));
                    for (o, gg) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gg;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = xhat.cols();
                    {
                        let gg = acc(&mut grads, *gain, gv);
                        for r in 0..g.rows() {
                            for c in 0..d {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, self.value(*bias));
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, self.value(*x));
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = g.get(r, c) * gv.data()[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat.get(r, c);
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let row = gx.row_mut(r);
                        for c in 0..d {
                            row[c] += inv_std[r] * (dxhat[c] - m1 - xhat.get(r, c) * m2);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    group,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, *group, probs);
                }
                Op::HyperLinear {
                    z,
                    w,
                    offset,
                    per_row,
                } => {
                    let (zv, wv) = (self.value(*z), self.value(*w));
                    let dk = zv.cols();
                    {
                        let gz = acc(&mut grads, *z, zv);
                        for r in 0..zv.rows() {
                            let wrow = wv.row(r / per_row);
                            let mat = &wrow[*offset..*offset + dk * dk];
                            let grow = g.row(r);
                            let out = gz.row_mut(r);
                            for i in 0..dk {
                                let gi = grow[i];
                                if gi == 0.0 {
                                    continue;
                                }
                                for (o, m) in out.iter_mut().zip(&mat[i * dk..(i + 1) * dk]) {
                                    *o += gi * m;
                                }
                            }
                        }
                    }
                    let gw = acc(&mut grads, *w, wv);
                    for r in 0..zv.rows() {
                        let zr = zv.row(r);
                        let grow = g.row(r);
                        let wrow = gw.row_mut(r / per_row);
                        for i in 0..dk {
                            let gi = grow[i];
                            let base = *offset + i * dk;
                            for (o, zz) in wrow[base..base + dk].iter_mut().zip(zr) {
                                *o += gi * zz;
                            }
                            wrow[*offset + dk * dk + i] += gi;
                        }
                    }
                }
                Op::FmPairwise { e, fields } => {
                    let ev = self.value(*e);
                    let d = ev.cols();
                    let ge = acc(&mut grads, *e, ev);
                    let mut sum = vec![0.0; d];
                    for b in 0..ev.rows() / fields {
                        sum.iter_mut().for_each(|s| *s = 0.0);
                        for f in 0..*fields {
                            for (s, x) in sum.iter_mut().zip(ev.row(b * fields + f)) {
                                *s += x;
                            }
                        }
                        let gb = g.get(b, 0);
                        for f in 0..*fields {
                            let r = b * fields + f;
                            for c in 0..d {
                                ge.row_mut(r)[c] += gb * (sum[c] - ev.get(r, c));
                            }
                        }
                    }
                }
                Op::Bce { pred, labels } => {
                    let pv = self.value(*pred);
                    let gp = acc(&mut grads, *pred, pv);
                    let scale = g.get(0, 0) / labels.len() as f64;
                    for ((o, &p), &y) in gp.data_mut().iter_mut().zip(pv.data()).zip(labels) {
                        if p > PROB_EPS && p < 1.0 - PROB_EPS {
                            *o += scale * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                }
            }
        }
        Gradients { grads: out }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor2>],
        g: &Tensor2,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / group;
        let mut gq = Tensor2::zeros(rows, d);
        let mut gk = Tensor2::zeros(rows, d);
        let mut gv = Tensor2::zeros(rows, d);
        let mut dp = vec![0.0; group];
        for b in 0..blocks {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * group * group;
                for i in 0..group {
                    let prow = &probs[pbase + i * group..pbase + (i + 1) * group];
                    let go = &g.row(b * group + i)[c0..c0 + dh];
                    // dV_j += p_ij * dO_i ; dP_ij = dO_i · V_j
                    let mut sdp = 0.0;
                    for j in 0..group {
                        let vr = b * group + j;
                        for (o, x) in gv.row_mut(vr)[c0..c0 + dh].iter_mut().zip(go) {
                            *o += prow[j] * x;
                        }
                        dp[j] = dot(go, &vv.row(vr)[c0..c0 + dh]);
                        sdp += dp[j] * prow[j];
                    }
                    let qi = &qv.row(b * group + i)[c0..c0 + dh];
                    for j in 0..group {
                        let ds = prow[j] * (dp[j] - sdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = b * group + j;
                        let kj = &kv.row(kr)[c0..c0 + dh];
                        for (o, x) in gq.row_mut(b * group + i)[c0..c0 + dh].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        for (o, x) in gk.row_mut(kr)[c0..c0 + dh].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        acc(grads, q, qv).add_assign(&gq);
        acc(grads, k, kv).add_assign(&gk);
        acc(grads, v, vv).add_assign(&gv);
    }
}

fn acc<'g>(grads: &'g mut [Option<Tensor2>], v: Var, like: &Tensor2) -> &'g mut Tensor2 {
    grads[v.0].get_or_insert_with(|| Tensor2::zeros(like.rows(), like.cols()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with the [`PROB_EPS`] clamp.
pub fn bce_mean(pred: &[f64], labels: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in pred.iter().zip(labels) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    s / labels.len() as f64
}
