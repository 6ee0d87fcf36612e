//! Fixed-topology computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of primitive nodes; node ids are
//! construction order, so the list is already a topological order and
//! evaluation is a single deterministic sweep. Parameters and inputs are
//! bound by name at call time; the graph itself is immutable once built.
//!
//! This is deliberately not a general autodiff tape: the artifact needs
//! exactly the coordinate-MLP and encoder graphs, and every primitive here
//! carries a hand-written backward that is checked against central finite
//! differences in the test suite.

use std::collections::BTreeMap;

use crate::error::QtpError;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    Param { name: String },
    Constant { value: Tensor },
    MatMul(NodeId, NodeId),
    /// x (n x d) + bias (d), broadcast over rows.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// x (n x d) * gain (d), broadcast over rows.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise normalization to zero mean / unit variance (no affine).
    LayerNormRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Mean of |x| over all elements.
    AbsMean(NodeId),
    /// Mean of x^2 over all elements.
    SqMean(NodeId),
    L2Norm(NodeId),
    CosineSim(NodeId, NodeId),
    /// Fourier feature expansion: rows v of the input (n x 2) map to
    /// [sin(2*pi*B v), cos(2*pi*B v)] with frozen frequency matrix B (F x 2).
    Fourier { input: NodeId, freqs: Tensor },
    ConcatRows(NodeId, NodeId),
    Row(NodeId, usize),
    /// Multi-head self-attention over x (n x d) with full-width projection
    /// weights (d x d) and biases (d). With `mask_first` the first row is a
    /// read-only query: no query attends to key 0, so its value never mixes
    /// into the outputs.
    Attention {
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        bq: NodeId,
        bk: NodeId,
        bv: NodeId,
        bo: NodeId,
        heads: usize,
        mask_first: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant { .. } => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::AbsMean(..) => "abs_mean",
            Op::SqMean(..) => "sq_mean",
            Op::L2Norm(..) => "l2_norm",
            Op::CosineSim(..) => "cosine_sim",
            Op::Fourier { .. } => "fourier",
            Op::ConcatRows(..) => "concat_rows",
            Op::Row(..) => "row",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

/// Name -> tensor bindings for both inputs and parameters.
pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

#[derive(Debug, Default)]
pub struct Gradients {
    /// Gradients keyed by parameter name.
    pub params: BTreeMap<String, Tensor>,
    /// Gradients keyed by input name.
    pub inputs: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
        })
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param {
            name: name.to_string(),
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant { value })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul_row(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        self.push(Op::MulRow(x, gain))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LayerNormRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll(x))
    }

    pub fn abs_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::AbsMean(x))
    }

    pub fn sq_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SqMean(x))
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Norm(x))
    }

    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::CosineSim(a, b))
    }

    pub fn fourier(&mut self, input: NodeId, freqs: Tensor) -> NodeId {
        self.push(Op::Fourier { input, freqs })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn row(&mut self, x: NodeId, index: usize) -> NodeId {
        self.push(Op::Row(x, index))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        bq: NodeId,
        bk: NodeId,
        bv: NodeId,
        bo: NodeId,
        heads: usize,
        mask_first: bool,
    ) -> NodeId {
        self.push(Op::Attention {
            x,
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
            heads,
            mask_first,
        })
    }

    /// Names of all `Param` nodes in construction order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param { name } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn err(&self, node: NodeId, detail: String) -> QtpError {
        QtpError::Graph {
            node,
            op: self.nodes[node].name(),
            detail,
        }
    }

    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation, QtpError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, op) in self.nodes.iter().enumerate() {
            let v = match op {
                Op::Input { name } | Op::Param { name } => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| QtpError::MissingBinding(name.clone()))?,
                Op::Constant { value } => value.clone(),
                Op::MatMul(a, b) => {
                    let (a, b) = (&values[*a], &values[*b]);
                    if a.cols() != b.rows() {
                        return Err(self.err(
                            id,
                            format!("inner dims {} vs {} differ", a.cols(), b.rows()),
                        ));
                    }
                    matmul(a, b)
                }
                Op::AddRow(x, bias) => {
                    let (x, b) = (&values[*x], &values[*bias]);
                    if x.cols() != b.len() {
                        return Err(self.err(
                            id,
                            format!("bias length {} vs row width {}", b.len(), x.cols()),
                        ));
                    }
                    let mut out = x.clone();
                    let d = x.cols();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v += b.data()[i % d];
                    }
                    out
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    if av.shape() != bv.shape() {
                        return Err(self.err(
                            id,
                            format!("shapes {:?} vs {:?} differ", av.shape(), bv.shape()),
                        ));
                    }
                    let mut out = av.clone();
                    let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                    for (o, b) in out.data_mut().iter_mut().zip(bv.data()) {
                        *o += sign * b;
                    }
                    out
                }
                Op::MulRow(x, gain) => {
                    let (x, g) = (&values[*x], &values[*gain]);
                    if x.cols() != g.len() {
                        return Err(self.err(
                            id,
                            format!("gain length {} vs row width {}", g.len(), x.cols()),
                        ));
                    }
                    let mut out = x.clone();
                    let d = x.cols();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v *= g.data()[i % d];
                    }
                    out
                }
                Op::Scale(x, c) => {
                    let mut out = values[*x].clone();
                    out.scale_assign(*c);
                    out
                }
                Op::Gelu(x) => {
                    let mut out = values[*x].clone();
                    for v in out.data_mut() {
                        *v = gelu(*v);
                    }
                    out
                }
                Op::SoftmaxRows(x) => {
                    let x = &values[*x];
                    let mut out = x.clone();
                    let d = x.cols();
                    for row in out.data_mut().chunks_mut(d) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - m).exp();
                            sum += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= sum;
                        }
                    }
                    out
                }
                Op::LayerNormRows(x) => {
                    let x = &values[*x];
                    let mut out = x.clone();
                    let d = x.cols();
                    for row in out.data_mut().chunks_mut(d) {
                        let mu = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        for v in row.iter_mut() {
                            *v = (*v - mu) * inv;
                        }
                    }
                    out
                }
                Op::SumAll(x) => Tensor::scalar(values[*x].data().iter().sum()),
                Op::MeanAll(x) => {
                    let v = &values[*x];
                    Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
                }
                Op::AbsMean(x) => {
                    let v = &values[*x];
                    Tensor::scalar(v.data().iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64)
                }
                Op::SqMean(x) => {
                    let v = &values[*x];
                    Tensor::scalar(v.data().iter().map(|a| a * a).sum::<f64>() / v.len() as f64)
                }
                Op::L2Norm(x) => Tensor::scalar(values[*x].l2_norm()),
                Op::CosineSim(a, b) => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    if av.len() != bv.len() {
                        return Err(self.err(
                            id,
                            format!("lengths {} vs {} differ", av.len(), bv.len()),
                        ));
                    }
                    Tensor::scalar(cosine_sim(av.data(), bv.data()))
                }
                Op::Fourier { input, freqs } => {
                    let x = &values[*input];
                    if x.cols() != 2 {
                        return Err(self.err(id, format!("expected 2 columns, got {}", x.cols())));
                    }
                    let n = x.rows();
                    let f = freqs.rows();
                    let mut out = Tensor::zeros(vec![n, 2 * f]);
                    for i in 0..n {
                        let (vx, vy) = (x.at2(i, 0), x.at2(i, 1));
                        for k in 0..f {
                            let phase = 2.0
                                * std::f64::consts::PI
                                * (freqs.at2(k, 0) * vx + freqs.at2(k, 1) * vy);
                            out.data_mut()[i * 2 * f + k] = phase.sin();
                            out.data_mut()[i * 2 * f + f + k] = phase.cos();
                        }
                    }
                    out
                }
                Op::ConcatRows(a, b) => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    if av.cols() != bv.cols() {
                        return Err(self.err(
                            id,
                            format!("widths {} vs {} differ", av.cols(), bv.cols()),
                        ));
                    }
                    let mut data = av.data().to_vec();
                    data.extend_from_slice(bv.data());
                    Tensor::new(vec![av.rows() + bv.rows(), av.cols()], data)?
                }
                Op::Row(x, index) => {
                    let v = &values[*x];
                    if *index >= v.rows() {
                        return Err(self.err(
                            id,
                            format!("row {} out of range for {} rows", index, v.rows()),
                        ));
                    }
                    let d = v.cols();
                    Tensor::new(vec![d], v.data()[index * d..(index + 1) * d].to_vec())?
                }
                Op::Attention {
                    x,
                    wq,
                    wk,
                    wv,
                    wo,
                    bq,
                    bk,
                    bv,
                    bo,
                    heads,
                    mask_first,
                } => {
                    let xv = &values[*x];
                    let d = xv.cols();
                    if d % heads != 0 {
                        return Err(
                            self.err(id, format!("width {} not divisible by {} heads", d, heads))
                        );
                    }
                    if *mask_first && xv.rows() < 2 {
                        return Err(self.err(
                            id,
                            "masked attention needs at least 2 rows".to_string(),
                        ));
                    }
                    let att = attention_forward(
                        xv,
                        &values[*wq],
                        &values[*wk],
                        &values[*wv],
                        &values[*wo],
                        &values[*bq],
                        &values[*bk],
                        &values[*bv],
                        &values[*bo],
                        *heads,
                        *mask_first,
                    );
                    att.out
                }
            };
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode sweep from a scalar `loss` node. Returns gradients for
    /// every `Param` and `Input` node; accumulation order is the fixed
    /// reverse node order, so results are deterministic.
    pub fn backward(
        &self,
        eval: &Evaluation,
        loss: NodeId,
        bindings: &Bindings,
    ) -> Result<Gradients, QtpError> {
        let loss_val = &eval.values[loss];
        if !loss_val.is_scalar() {
            return Err(QtpError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0]).unwrap());

        let mut grads = Gradients::default();
        let accum = |slot: &mut Option<Tensor>, delta: Tensor| match slot {
            Some(t) => t.add_assign(&delta),
            None => *slot = Some(delta),
        };

        for id in (0..self.nodes.len()).rev() {
            let d = match adj[id].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[id] {
                Op::Input { name } => {
                    grads
                        .inputs
                        .entry(name.clone())
                        .and_modify(|t| t.add_assign(&d))
                        .or_insert(d);
                }
                Op::Param { name } => {
                    grads
                        .params
                        .entry(name.clone())
                        .and_modify(|t| t.add_assign(&d))
                        .or_insert(d);
                }
                Op::Constant { .. } => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&eval.values[*a], &eval.values[*b]);
                    accum(&mut adj[*a], matmul_nt(&d, bv));
                    accum(&mut adj[*b], matmul_tn(av, &d));
                }
                Op::AddRow(x, bias) => {
                    let w = eval.values[*x].cols();
                    let mut db = Tensor::zeros(vec![w]);
                    for (i, v) in d.data().iter().enumerate() {
                        db.data_mut()[i % w] += v;
                    }
                    accum(&mut adj[*bias], db);
                    accum(&mut adj[*x], d);
                }
                Op::Add(a, b) => {
                    accum(&mut adj[*a], d.clone());
                    accum(&mut adj[*b], d);
                }
                Op::Sub(a, b) => {
                    let mut nd = d.clone();
                    nd.scale_assign(-1.0);
                    accum(&mut adj[*a], d);
                    accum(&mut adj[*b], nd);
                }
                Op::MulRow(x, gain) => {
                    let (xv, gv) = (&eval.values[*x], &eval.values[*gain]);
                    let w = xv.cols();
                    let mut dx = d.clone();
                    for (i, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= gv.data()[i % w];
                    }
                    let mut dg = Tensor::zeros(vec![w]);
                    for (i, v) in d.data().iter().enumerate() {
                        dg.data_mut()[i % w] += v * xv.data()[i];
                    }
                    accum(&mut adj[*x], dx);
                    accum(&mut adj[*gain], dg);
                }
                Op::Scale(x, c) => {
                    let mut dx = d;
                    dx.scale_assign(*c);
                    accum(&mut adj[*x], dx);
                }
                Op::Gelu(x) => {
                    let xv = &eval.values[*x];
                    let mut dx = d;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *g *= gelu_deriv(v);
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::SoftmaxRows(x) => {
                    let s = &eval.values[id];
                    let w = s.cols();
                    let mut dx = d.clone();
                    for (drow, srow) in dx.data_mut().chunks_mut(w).zip(s.data().chunks(w)) {
                        let dot: f64 = drow.iter().zip(srow).map(|(a, b)| a * b).sum();
                        for (g, &sv) in drow.iter_mut().zip(srow) {
                            *g = sv * (*g - dot);
                        }
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::LayerNormRows(x) => {
                    let xv = &eval.values[*x];
                    let y = &eval.values[id];
                    let w = xv.cols();
                    let mut dx = d.clone();
                    for ((drow, xrow), yrow) in dx
                        .data_mut()
                        .chunks_mut(w)
                        .zip(xv.data().chunks(w))
                        .zip(y.data().chunks(w))
                    {
                        let mu = xrow.iter().sum::<f64>() / w as f64;
                        let var = xrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mean_d = drow.iter().sum::<f64>() / w as f64;
                        let mean_dy =
                            drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for (g, &yv) in drow.iter_mut().zip(yrow) {
                            *g = inv * (*g - mean_d - yv * mean_dy);
                        }
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::SumAll(x) => {
                    let xv = &eval.values[*x];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let s = d.scalar_value();
                    for v in dx.data_mut() {
                        *v = s;
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::MeanAll(x) => {
                    let xv = &eval.values[*x];
                    let s = d.scalar_value() / xv.len() as f64;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for v in dx.data_mut() {
                        *v = s;
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::AbsMean(x) => {
                    let xv = &eval.values[*x];
                    let s = d.scalar_value() / xv.len() as f64;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *g = s * sign(v);
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::SqMean(x) => {
                    let xv = &eval.values[*x];
                    let s = 2.0 * d.scalar_value() / xv.len() as f64;
                    let mut dx = xv.clone();
                    dx.scale_assign(s);
                    accum(&mut adj[*x], dx);
                }
                Op::L2Norm(x) => {
                    let xv = &eval.values[*x];
                    let norm = eval.values[id].scalar_value();
                    let mut dx = xv.clone();
                    if norm > 0.0 {
                        dx.scale_assign(d.scalar_value() / norm);
                    } else {
                        dx.scale_assign(0.0);
                    }
                    accum(&mut adj[*x], dx);
                }
                Op::CosineSim(a, b) => {
                    let (av, bv) = (&eval.values[*a], &eval.values[*b]);
                    let (da, db) = cosine_sim_backward(av.data(), bv.data(), d.scalar_value());
                    accum(&mut adj[*a], Tensor::new(av.shape().to_vec(), da)?);
                    accum(&mut adj[*b], Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Fourier { input, freqs } => {
                    let x = &eval.values[*input];
                    let n = x.rows();
                    let f = freqs.rows();
                    let y = &eval.values[id];
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let two_pi = 2.0 * std::f64::consts::PI;
                    for i in 0..n {
                        for k in 0..f {
                            let s = y.data()[i * 2 * f + k];
                            let c = y.data()[i * 2 * f + f + k];
                            let ds = d.data()[i * 2 * f + k];
                            let dc = d.data()[i * 2 * f + f + k];
                            // d sin = cos * dphase ; d cos = -sin * dphase
                            let dphase = ds * c - dc * s;
                            dx.data_mut()[i * 2] += two_pi * freqs.at2(k, 0) * dphase;
                            dx.data_mut()[i * 2 + 1] += two_pi * freqs.at2(k, 1) * dphase;
                        }
                    }
                    accum(&mut adj[*input], dx);
                }
                Op::ConcatRows(a, b) => {
                    let (av, bv) = (&eval.values[*a], &eval.values[*b]);
                    let na = av.len();
                    let da = Tensor::new(av.shape().to_vec(), d.data()[..na].to_vec())?;
                    let db = Tensor::new(bv.shape().to_vec(), d.data()[na..].to_vec())?;
                    accum(&mut adj[*a], da);
                    accum(&mut adj[*b], db);
                }
                Op::Row(x, index) => {
                    let xv = &eval.values[*x];
                    let w = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    dx.data_mut()[index * w..(index + 1) * w].copy_from_slice(d.data());
                    accum(&mut adj[*x], dx);
                }
                Op::Attention {
                    x,
                    wq,
                    wk,
                    wv,
                    wo,
                    bq,
                    bk,
                    bv,
                    bo,
                    heads,
                    mask_first,
                } => {
                    let g = attention_backward(
                        &eval.values[*x],
                        &eval.values[*wq],
                        &eval.values[*wk],
                        &eval.values[*wv],
                        &eval.values[*wo],
                        &eval.values[*bq],
                        &eval.values[*bk],
                        &eval.values[*bv],
                        &eval.values[*bo],
                        *heads,
                        *mask_first,
                        &d,
                    );
                    accum(&mut adj[*x], g.dx);
                    accum(&mut adj[*wq], g.dwq);
                    accum(&mut adj[*wk], g.dwk);
                    accum(&mut adj[*wv], g.dwv);
                    accum(&mut adj[*wo], g.dwo);
                    accum(&mut adj[*bq], g.dbq);
                    accum(&mut adj[*bk], g.dbk);
                    accum(&mut adj[*bv], g.dbv);
                    accum(&mut adj[*bo], g.dbo);
                }
            }
        }

        // Params that never received flow still get zero gradients so every
        // reachable-parameter contract holds with explicit shapes.
        for op in &self.nodes {
            if let Op::Param { name } = op {
                if !grads.params.contains_key(name) {
                    let shape = bindings
                        .get(name)
                        .map(|t| t.shape().to_vec())
                        .unwrap_or_default();
                    grads.params.insert(name.clone(), Tensor::zeros(shape));
                }
            }
        }
        Ok(grads)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn cosine_sim_backward(a: &[f64], b: &[f64], d: f64) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2 = a.iter().map(|x| x * x).sum::<f64>();
    let nb2 = b.iter().map(|x| x * x).sum::<f64>();
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let inv = 1.0 / (na * nb);
    let cs = dot * inv;
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| d * (y * inv - cs * x / na2))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| d * (x * inv - cs * y / nb2))
        .collect();
    (da, db)
}

struct AttentionForward {
    out: Tensor,
}

struct AttentionGrads {
    dx: Tensor,
    dwq: Tensor,
    dwk: Tensor,
    dwv: Tensor,
    dwo: Tensor,
    dbq: Tensor,
    dbk: Tensor,
    dbv: Tensor,
    dbo: Tensor,
}

fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = matmul(x, w);
    let d = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % d];
    }
    out
}

fn head_slice(m: &Tensor, head: usize, dh: usize) -> Tensor {
    let n = m.rows();
    let mut out = Tensor::zeros(vec![n, dh]);
    for i in 0..n {
        for j in 0..dh {
            out.data_mut()[i * dh + j] = m.at2(i, head * dh + j);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    bq: &Tensor,
    bk: &Tensor,
    bv: &Tensor,
    bo: &Tensor,
    heads: usize,
    mask_first: bool,
) -> AttentionForward {
    let n = x.rows();
    let d = x.cols();
    let dh = d / heads;
    let q = project(x, wq, bq);
    let k = project(x, wk, bk);
    let v = project(x, wv, bv);
    let mut concat = Tensor::zeros(vec![n, d]);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut scores = matmul_nt(&qh, &kh);
        scores.scale_assign(1.0 / (dh as f64).sqrt());
        if mask_first {
            mask_first_column(&mut scores);
        }
        softmax_rows_inplace(&mut scores);
        let oh = matmul(&scores, &vh);
        for i in 0..n {
            for j in 0..dh {
                concat.data_mut()[i * d + h * dh + j] = oh.at2(i, j);
            }
        }
    }
    let out = project(&concat, wo, bo);
    AttentionForward { out }
}

fn mask_first_column(m: &mut Tensor) {
    let w = m.cols();
    for row in m.data_mut().chunks_mut(w) {
        row[0] = f64::NEG_INFINITY;
    }
}

fn softmax_rows_inplace(m: &mut Tensor) {
    let w = m.cols();
    for row in m.data_mut().chunks_mut(w) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn col_sum(m: &Tensor) -> Tensor {
    let w = m.cols();
    let mut out = Tensor::zeros(vec![w]);
    for (i, v) in m.data().iter().enumerate() {
        out.data_mut()[i % w] += v;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    bq: &Tensor,
    bk: &Tensor,
    bv: &Tensor,
    _bo: &Tensor,
    heads: usize,
    mask_first: bool,
    dout: &Tensor,
) -> AttentionGrads {
    let n = x.rows();
    let d = x.cols();
    let dh = d / heads;
    // Recompute the forward intermediates; cheaper than storing every
    // per-head matrix in the evaluation.
    let q = project(x, wq, bq);
    let k = project(x, wk, bk);
    let v = project(x, wv, bv);

    let mut concat = Tensor::zeros(vec![n, d]);
    let mut attn: Vec<Tensor> = Vec::with_capacity(heads);
    let mut vh_all: Vec<Tensor> = Vec::with_capacity(heads);
    let mut qh_all: Vec<Tensor> = Vec::with_capacity(heads);
    let mut kh_all: Vec<Tensor> = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut scores = matmul_nt(&qh, &kh);
        scores.scale_assign(1.0 / (dh as f64).sqrt());
        if mask_first {
            mask_first_column(&mut scores);
        }
        softmax_rows_inplace(&mut scores);
        let oh = matmul(&scores, &vh);
        for i in 0..n {
            for j in 0..dh {
                concat.data_mut()[i * d + h * dh + j] = oh.at2(i, j);
            }
        }
        attn.push(scores);
        vh_all.push(vh);
        qh_all.push(qh);
        kh_all.push(kh);
    }

    let dwo = matmul_tn(&concat, dout);
    let dbo = col_sum(dout);
    let dconcat = matmul_nt(dout, wo);

    let mut dq = Tensor::zeros(vec![n, d]);
    let mut dk = Tensor::zeros(vec![n, d]);
    let mut dv = Tensor::zeros(vec![n, d]);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let doh = head_slice(&dconcat, h, dh);
        let a = &attn[h];
        let da = matmul_nt(&doh, &vh_all[h]);
        let dvh = matmul_tn(a, &doh);
        // softmax backward row-wise
        let mut ds = da.clone();
        let w = a.cols();
        for (dsrow, arow) in ds.data_mut().chunks_mut(w).zip(a.data().chunks(w)) {
            let dot: f64 = dsrow.iter().zip(arow).map(|(x, y)| x * y).sum();
            for (g, &av) in dsrow.iter_mut().zip(arow) {
                *g = av * (*g - dot);
            }
        }
        ds.scale_assign(scale);
        let dqh = matmul(&ds, &kh_all[h]);
        let dkh = matmul_tn(&ds, &qh_all[h]);
        for i in 0..n {
            for j in 0..dh {
                dq.data_mut()[i * d + h * dh + j] = dqh.at2(i, j);
                dk.data_mut()[i * d + h * dh + j] = dkh.at2(i, j);
                dv.data_mut()[i * d + h * dh + j] = dvh.at2(i, j);
            }
        }
    }

    let dwq = matmul_tn(x, &dq);
    let dwk = matmul_tn(x, &dk);
    let dwv = matmul_tn(x, &dv);
    let dbq = col_sum(&dq);
    let dbk = col_sum(&dk);
    let dbv = col_sum(&dv);
    let mut dx = matmul_nt(&dq, wq);
    dx.add_assign(&matmul_nt(&dk, wk));
    dx.add_assign(&matmul_nt(&dv, wv));

    AttentionGrads {
        dx,
        dwq,
        dwk,
        dwv,
        dwo,
        dbq,
        dbk,
        dbv,
        dbo,
    }
}
