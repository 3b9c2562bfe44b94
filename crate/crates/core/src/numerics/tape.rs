//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes from the loss towards the leaves, so each recorded
//! operation is visited exactly once and gradient contributions are summed
//! in a fixed order.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::store::ParamStore;
use super::tensor::{gelu, gelu_grad, matmul_t, normalize_row, softmax_masked, Scalar, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Constant,
    Variable,
    Param(String),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: S },
    Slab { x: Var, index: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-threaded record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free input whose gradient can be read back from [`Grads::wrt`].
    pub fn variable(&mut self, value: Tensor<S>) -> Result<Var, NumericsError> {
        self.push(value, Op::Variable, true, "variable")
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var, NumericsError> {
        let value = store
            .get(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        self.push(value, Op::Param(name.to_string()), true, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = matmul_t(self.value(a), false, self.value(b), false)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b, trans_b: false }, rg, "matmul")
    }

    /// `a * bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = matmul_t(self.value(a), false, self.value(b), true)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b, trans_b: true }, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a length-`d` vector to every row of an `n x d` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (_, d) = xv.rows_of_last();
        let bv = self.value(bias);
        if bv.numel() != d {
            return Err(NumericsError::Dimension(format!(
                "row bias has {} entries, rows have {d}",
                bv.numel()
            )));
        }
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + bv.data()[i % d];
        }
        let rg = self.requires(x) || self.requires(bias);
        self.push(out, Op::AddRow { x, bias }, rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(gelu);
        let rg = self.requires(x);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    /// Row-wise softmax with an additive mask of `0` / `-inf` entries.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Arc<Tensor<S>>>) -> Result<Var, NumericsError> {
        let out = softmax_masked(self.value(x), mask.as_deref())?;
        let rg = self.requires(x);
        self.push(out, Op::Softmax(x), rg, "softmax_masked")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var, NumericsError> {
        let out = super::tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg, "layer_norm")
    }

    /// Slab `index` of a rank-3 tensor `[n, r, c]`, as an `r x c` matrix.
    pub fn slab(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let [n, r, c] = xv.shape()[..] else {
            return Err(NumericsError::Dimension(format!("slab needs a rank-3 tensor, got {:?}", xv.shape())));
        };
        if index >= n {
            return Err(NumericsError::Dimension(format!("slab {index} out of range for {n}")));
        }
        let out = Tensor::new(vec![r, c], xv.data()[index * r * c..(index + 1) * r * c].to_vec())?;
        let rg = self.requires(x);
        self.push(out, Op::Slab { x, index }, rg, "slab")
    }

    /// Rows of a `v x d` table selected by index.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(NumericsError::Dimension(format!("row index {bad} out of range for table of {v}")));
        }
        if rows.is_empty() {
            return Err(NumericsError::Dimension("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&tv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.requires(table);
        self.push(out, Op::GatherRows { table, rows: rows.to_vec() }, rg, "gather_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        let mut params: BTreeMap<String, Tensor<S>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Variable => {
                    grads[idx] = Some(g);
                }
                Op::Param(name) => {
                    match params.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            params.insert(name.clone(), g);
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.requires(*a) {
                        let da = if *trans_b { matmul_t(&g, false, bv, false)? } else { matmul_t(&g, false, bv, true)? };
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires(*b) {
                        let db = if *trans_b { matmul_t(&g, true, av, false)? } else { matmul_t(av, true, &g, false)? };
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::AddRow { x, bias } => {
                    if self.requires(*bias) {
                        let bshape = self.value(*bias).shape().to_vec();
                        let d = self.value(*bias).numel();
                        let mut db = Tensor::zeros(&bshape);
                        for (i, &v) in g.data().iter().enumerate() {
                            db.data_mut()[i % d] = db.data()[i % d] + v;
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.requires(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (rows, cols) = y.dims2()?;
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let out = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gainv = self.value(*gain);
                    let (rows, d) = xv.rows_of_last();
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgain = Tensor::zeros(gainv.shape());
                    let mut dbias = Tensor::zeros(self.value(*bias).shape());
                    let dn = S::of(d as f64);
                    for r in 0..rows {
                        let (xhat, inv_std) = normalize_row(&xv.data()[r * d..(r + 1) * d], *eps);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..d {
                            dgain.data_mut()[j] = dgain.data()[j] + gr[j] * xhat[j];
                            dbias.data_mut()[j] = dbias.data()[j] + gr[j];
                            let dxh = gr[j] * gainv.data()[j];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[j];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = gr[j] * gainv.data()[j];
                            out[j] = inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    if self.requires(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.requires(*gain) {
                        accumulate(&mut grads, *gain, dgain);
                    }
                    if self.requires(*bias) {
                        accumulate(&mut grads, *bias, dbias);
                    }
                }
                Op::Slab { x, index } => {
                    let shape = self.value(*x).shape().to_vec();
                    let size = shape[1] * shape[2];
                    let mut dx = Tensor::zeros(&shape);
                    dx.data_mut()[index * size..(index + 1) * size].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { table, rows } => {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let mut dt = Tensor::zeros(&shape);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[r * d + j] = dt.data()[r * d + j] + g.data()[i * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
            }
        }
        Ok(Grads { per_node: grads, params })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<S: Scalar> {
    per_node: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of a [`Tape::variable`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`; parameters absent from the tape get zeros.
    pub fn for_params(mut self, store: &ParamStore<S>) -> BTreeMap<String, Tensor<S>> {
        store
            .iter()
            .map(|(name, p)| {
                let g = self.params.remove(name).unwrap_or_else(|| Tensor::zeros(p.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// `∂loss/∂p` for every parameter of `params`.
pub fn backward<S: Scalar>(
    loss: Var,
    tape: &Tape<S>,
    params: &ParamStore<S>,
) -> Result<BTreeMap<String, Tensor<S>>, NumericsError> {
    Ok(tape.backward(loss)?.for_params(params))
}
