//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`], which snapshots the current value from a
//! [`ParamStore`]; after [`Graph::backward`] the gradients can be added back
//! into that store. A graph is built per forward pass and thrown away.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-7;

/// Rows whose L2 norm falls below this are normalized to zero.
pub const NORM_EPS: f64 = 1e-12;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Select {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Mean(Var),
    BinaryCrossEntropy {
        probs: Var,
        target: Tensor,
    },
    CategoricalCrossEntropy {
        probs: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("variable from another graph".into()));
        }
        Ok(&self.nodes[v.index].value)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Inserts a parameter once per graph; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.check(a)?, self.check(b)?)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a × bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_t(self.check(a)?, self.check(b)?)?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`C` vector to every row of an `N×C` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.check(x)?, self.check(bias)?);
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| v * c);
        Ok(self.push(out, Op::Scale(x, c)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(gelu);
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let cols = *xv.shape().last().expect("non-empty shape");
        let mut out = xv.clone();
        tensor::softmax_rows_in_place(out.data_mut(), cols);
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            tensor::layer_norm_parts(self.check(x)?, self.check(gain)?, self.check(bias)?, eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.check(x)?;
        let (r, c) = (xv.rows(), xv.cols());
        if width == 0 || start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + width),
            ));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![r, width], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.check(parts[0])?.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.check(p)?;
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} and {}", v.rows()),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.index].value.row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.check(parts[0])?.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.check(p)?;
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {cols} and {}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.check(x)?;
        let (r, c) = (xv.rows(), xv.cols());
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, index }))
    }

    /// Flat element gather: output element `i` is input element `index[i]`.
    pub fn select(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.check(x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape("select", format!("element {bad} of {}", xv.len())));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Select { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.check(x)?.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Scales each row to unit L2 norm; rows with norm below [`NORM_EPS`]
    /// become zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n < NORM_EPS {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// Mean over elements of `-[y log p + (1-y) log(1-p)]` with clamped `p`.
    pub fn binary_cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let p = self.check(probs)?;
        if p.len() != target.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} predictions, {} targets", p.len(), target.len()),
            ));
        }
        let loss = crate::supervision::bce_value(p.data(), target.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                probs,
                target: target.clone(),
            },
        ))
    }

    /// Mean over rows of `-Σ_k y_k log p_k` with clamped `p`; rows are frames.
    pub fn categorical_cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let p = self.check(probs)?;
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "categorical_cross_entropy",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let loss = crate::supervision::cce_value(p.data(), target.data(), p.cols());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CategoricalCrossEntropy {
                probs,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter that took part in the forward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.index].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));
        let mut out = Vec::new();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                let slot = grads[v.index]
                    .get_or_insert_with(|| Tensor::zeros(self.nodes[v.index].value.shape()));
                f(slot.data_mut());
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                    let ((m, k), (_, n)) = (tensor::dims2(av), tensor::dims2(bv));
                    acc(*a, &|ga| tensor::gemm_nt(g.data(), bv.data(), ga, m, n, k));
                    acc(*b, &|gb| tensor::gemm_tn(av.data(), g.data(), gb, m, k, n));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                    let ((m, k), (n, _)) = (tensor::dims2(av), tensor::dims2(bv));
                    acc(*a, &|ga| tensor::gemm_nn(g.data(), bv.data(), ga, m, n, k));
                    acc(*b, &|gb| tensor::gemm_tn(g.data(), av.data(), gb, m, n, k));
                }
                Op::Add(a, b) => {
                    acc(*a, &|ga| add_into(ga, g.data()));
                    acc(*b, &|gb| add_into(gb, g.data()));
                }
                Op::AddRow(x, bias) => {
                    acc(*x, &|gx| add_into(gx, g.data()));
                    let c = node.value.cols();
                    acc(*bias, &|gb| {
                        for row in g.data().chunks(c) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                    acc(*a, &|ga| {
                        for ((o, gv), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += gv * y;
                        }
                    });
                    acc(*b, &|gb| {
                        for ((o, gv), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                            *o += gv * x;
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &|gx| {
                    for (o, gv) in gx.iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                }),
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.index].value;
                    acc(*x, &|gx| {
                        for ((o, gv), &xi) in gx.iter_mut().zip(g.data()).zip(xv.data()) {
                            *o += gv * gelu_parts(xi).1;
                        }
                    });
                }
                Op::Sigmoid(x) => acc(*x, &|gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * y * (1.0 - y);
                    }
                }),
                Op::SoftmaxRows(x) => {
                    let cols = *node.value.shape().last().expect("non-empty shape");
                    acc(*x, &|gx| {
                        for ((o, gr), y) in gx
                            .chunks_mut(cols)
                            .zip(g.data().chunks(cols))
                            .zip(node.value.data().chunks(cols))
                        {
                            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                o[j] += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gn = &self.nodes[gain.index].value;
                    let c = gn.len();
                    acc(*x, &|gx| {
                        for (r, (o, gr)) in gx.chunks_mut(c).zip(g.data().chunks(c)).enumerate() {
                            let xh = &xhat[r * c..(r + 1) * c];
                            let dxhat: Vec<f64> =
                                gr.iter().zip(gn.data()).map(|(a, b)| a * b).collect();
                            let sum: f64 = dxhat.iter().sum();
                            let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / c as f64;
                            for j in 0..c {
                                o[j] += k * (c as f64 * dxhat[j] - sum - xh[j] * dot);
                            }
                        }
                    });
                    acc(*gain, &|gg| {
                        for (gr, xh) in g.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += gr[j] * xh[j];
                            }
                        }
                    });
                    acc(*bias, &|gb| {
                        for gr in g.data().chunks(c) {
                            add_into(gb, gr);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.cols();
                    let c = self.nodes[x.index].value.cols();
                    acc(*x, &|gx| {
                        for (o, gr) in gx.chunks_mut(c).zip(g.data().chunks(w)) {
                            add_into(&mut o[*start..start + w], gr);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.index].value.cols();
                        let off = offset;
                        acc(*p, &|gp| {
                            for (o, gr) in gp.chunks_mut(w).zip(g.data().chunks(total)) {
                                add_into(o, &gr[off..off + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.index].value.len();
                        let off = offset;
                        acc(*p, &|gp| add_into(gp, &g.data()[off..off + n]));
                        offset += n;
                    }
                }
                Op::GatherRows { x, index } => {
                    let c = node.value.cols();
                    acc(*x, &|gx| {
                        for (&src, gr) in index.iter().zip(g.data().chunks(c)) {
                            add_into(&mut gx[src * c..(src + 1) * c], gr);
                        }
                    });
                }
                Op::Select { x, index } => acc(*x, &|gx| {
                    for (&src, gv) in index.iter().zip(g.data()) {
                        gx[src] += gv;
                    }
                }),
                Op::Reshape(x) => acc(*x, &|gx| add_into(gx, g.data())),
                Op::NormalizeRows { x, norms } => {
                    let c = node.value.cols();
                    acc(*x, &|gx| {
                        for (r, (o, gr)) in gx.chunks_mut(c).zip(g.data().chunks(c)).enumerate() {
                            let n = norms[r];
                            if n < NORM_EPS {
                                continue;
                            }
                            let y = node.value.row(r);
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                o[j] += (gr[j] - y[j] * dot) / n;
                            }
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.index].value.len() as f64;
                    let gv = g.item() / n;
                    acc(*x, &|gx| gx.iter_mut().for_each(|o| *o += gv));
                }
                Op::BinaryCrossEntropy { probs, target } => {
                    let p = &self.nodes[probs.index].value;
                    let scale = g.item() / p.len() as f64;
                    acc(*probs, &|gp| {
                        for ((o, &pv), &y) in gp.iter_mut().zip(p.data()).zip(target.data()) {
                            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                                *o += scale * (-y / pv + (1.0 - y) / (1.0 - pv));
                            }
                        }
                    });
                }
                Op::CategoricalCrossEntropy { probs, target } => {
                    let p = &self.nodes[probs.index].value;
                    let scale = g.item() / p.rows() as f64;
                    acc(*probs, &|gp| {
                        for ((o, &pv), &y) in gp.iter_mut().zip(p.data()).zip(target.data()) {
                            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                                *o -= scale * y / pv;
                            }
                        }
                    });
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads: out })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(i, t)| (*i, t))
    }

    /// Adds these gradients into the `grad` fields of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.grads {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step `h`, over every scalar of every parameter.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
/// `params` projects the owner (a bare [`ParamStore`] or a model holding
/// one) onto the store to perturb.
pub fn gradient_check<M>(
    owner: &mut M,
    params: fn(&mut M) -> &mut ParamStore,
    h: f64,
    f: impl Fn(&mut Graph, &M) -> Result<Var>,
) -> Result<GradientCheck> {
    let eval = |owner: &M| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, owner)?;
        Ok(g.value(v).item())
    };
    let mut g = Graph::new();
    let loss = f(&mut g, owner)?;
    let grads = g.backward(loss)?;
    let mut report = GradientCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<ParamId> = params(owner).iter().map(|(i, _)| i).collect();
    for id in ids {
        for k in 0..params(owner).get(id).value.len() {
            let orig = params(owner).get(id).value.data()[k];
            params(owner).get_mut(id).value.data_mut()[k] = orig + h;
            let fp = eval(owner)?;
            params(owner).get_mut(id).value.data_mut()[k] = orig - h;
            let fm = eval(owner)?;
            params(owner).get_mut(id).value.data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = format!("{}[{k}]", params(owner).get(id).name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_grads(store: &mut ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
        let report = gradient_check(store, |s| s, 1e-5, |g, s| Ok(f(g, s))).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(W x) over a 2x3 W and length-3 x: dW[i][j] = x[j].
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.input(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.matmul(wv, x).unwrap();
        let n = g.value(y).len() as f64;
        let m = g.mean(y).unwrap();
        let loss = g.scale(m, n).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_weighted_term_contributes_nothing() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::vector(vec![3.0, 4.0]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let la = g.mean(av).unwrap();
        let lb = g.mean(bv).unwrap();
        let lb0 = g.scale(lb, 0.0).unwrap();
        let loss = g.add(la, lb0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let g = Graph::new();
        let mut other = Graph::new();
        let v = other.input(Tensor::scalar(1.0));
        assert!(matches!(g.backward(v), Err(Error::NoForward)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn finite_difference_matches_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let mut store = ParamStore::new();
            let a = store.add("a", rand_tensor(&mut rng, &[3, 4]));
            let b = store.add("b", rand_tensor(&mut rng, &[4, 5]));
            let c = store.add("c", rand_tensor(&mut rng, &[3, 5]));
            let bias = store.add("bias", rand_tensor(&mut rng, &[5]));
            let gain = store.add("gain", rand_tensor(&mut rng, &[5]));
            let target = Tensor::new(
                vec![3, 5],
                (0..15).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let onehot = {
                let mut t = Tensor::zeros(&[3, 4]);
                for r in 0..3 {
                    t.data_mut()[r * 4 + (r + trial) % 4] = 1.0;
                }
                t
            };
            check_grads(&mut store, &|g, s| {
                let (a, b, c) = (g.param(s, a), g.param(s, b), g.param(s, c));
                let (bias, gain) = (g.param(s, bias), g.param(s, gain));
                let ab = g.matmul(a, b).unwrap();
                let abt = g.matmul_t(ab, c).unwrap(); // 3x3
                let sm = g.softmax_rows(abt).unwrap();
                let mixed = g.matmul(sm, c).unwrap(); // 3x5
                let ln = g.layer_norm(mixed, gain, bias, 1e-5).unwrap();
                let r = g.add_row(ln, bias).unwrap();
                let act = g.gelu(r).unwrap();
                let prod = g.mul(act, c).unwrap();
                let nrm = g.normalize_rows(prod).unwrap();
                let sl = g.slice_cols(nrm, 1, 3).unwrap();
                let cat = g.concat_cols(&[sl, ab]).unwrap(); // 3x8
                let rows = g.concat_rows(&[cat, cat]).unwrap(); // 6x8
                let gath = g.gather_rows(rows, vec![5, 0, 0, 3]).unwrap();
                let sel = g.select(gath, vec![1, 9, 17, 30, 2], vec![5]).unwrap();
                let rs = g.reshape(gath, vec![8, 4]).unwrap();
                let sig = g.sigmoid(ab).unwrap();
                let bce = g.binary_cross_entropy(sig, &target.clone().reshape(vec![3, 5]).unwrap());
                let bce = bce.unwrap();
                let probs = g.softmax_rows(a).unwrap();
                let cce = g.categorical_cross_entropy(probs, &onehot).unwrap();
                let m1 = g.mean(sel).unwrap();
                let m2 = g.mean(rs).unwrap();
                let s1 = g.add(m1, m2).unwrap();
                let s2 = g.add(bce, cce).unwrap();
                let s3 = g.scale(s2, 0.7).unwrap();
                g.add(s1, s3).unwrap()
            });
        }
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[4, 4]);
        let run = || {
            let mut g = Graph::new();
            let x = g.input(a.clone());
            let s = g.softmax_rows(x).unwrap();
            let y = g.matmul(s, x).unwrap();
            g.value(y).clone()
        };
        let (p, q) = (run(), run());
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
