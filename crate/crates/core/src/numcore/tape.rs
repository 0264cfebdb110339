//! Eager reverse-mode differentiation.
//!
//! Every op computes its value immediately and records how to push a
//! gradient back to its inputs. [`Tape::backward`] replays the record in
//! reverse and writes parameter gradients into a [`Params`] store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::params::{ParamId, Params};
use super::rng::Rng;
use super::tensor::{self, Tensor};
use crate::error::{contract, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    OuterAddRows(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    /// Scalar output whose gradient w.r.t. `x` was computed during forward.
    Loss { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter as a tape value. Repeated calls return the same [`Var`], so a
    /// parameter used by several steps accumulates one gradient.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameters that have been read into this tape.
    pub fn touched_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.keys().copied()
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(contract(format!("matmul inner extents differ: {m}x{k} · {k2}x{n}")));
        }
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt lhs")?;
        let (n, k2) = self.mat(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(contract(format!("matmul_nt inner extents differ: {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = tensor::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = tensor::transpose(self.value(a).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(contract(format!("add shape mismatch {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row")?;
        if self.value(b).numel() != n {
            return Err(contract(format!("add_row bias has {} values for {n} columns", self.value(b).numel())));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(x, b)))
    }

    /// Every pairwise row sum: row `i·p + j` is `a[i] + b[j]` for `a[m×n]`,
    /// `b[p×n]`.
    pub fn outer_add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "outer_add_rows lhs")?;
        let (p, n2) = self.mat(b, "outer_add_rows rhs")?;
        if n != n2 {
            return Err(contract("outer_add_rows column mismatch"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * p * n);
        for i in 0..m {
            for j in 0..p {
                data.extend(av[i * n..(i + 1) * n].iter().zip(&bv[j * n..(j + 1) * n]).map(|(x, y)| x + y));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m * p, n], data), Op::OuterAddRows(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(contract(format!("mul shape mismatch {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| math::tanh(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Tanh(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(contract("layer_norm gain/bias size mismatch"));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "softmax_rows")?;
        let data = softmax_rows(self.value(x).data(), m, n, None);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::Softmax(x)))
    }

    /// Row softmax where entries with `allowed[i·n + j] == false` get exactly
    /// zero probability. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.mat(x, "masked_softmax_rows")?;
        if allowed.len() != m * n {
            return Err(contract("mask size mismatch"));
        }
        if (0..m).any(|r| !allowed[r * n..(r + 1) * n].iter().any(|&a| a)) {
            return Err(contract("masked softmax row with no allowed entry"));
        }
        let data = softmax_rows(self.value(x).data(), m, n, Some(allowed));
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::Softmax(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "log_softmax_rows")?;
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let lse = math::logsumexp_unchecked(row);
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::LogSoftmax(x)))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.mat(table, "embedding")?;
        if ids.is_empty() {
            return Err(contract("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("embedding id {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&tv[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::from_parts(vec![ids.len(), n], data), Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Inverted dropout. Callers only insert this in training mode.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> =
            (0..self.value(x).numel()).map(|_| if rng.bernoulli(rate) { 0.0 } else { scale }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, keep }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.mat(*parts.first().ok_or_else(|| contract("concat of nothing"))?, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(contract("concat_cols row mismatch"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(contract("slice_cols out of range"));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.mat(*parts.first().ok_or_else(|| contract("concat of nothing"))?, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(contract("concat_rows column mismatch"));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, _) = self.mat(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(contract("slice_rows out of range"));
        }
        let t = self.value(x).slice_rows(start, len);
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Records a scalar loss computed outside the tape together with its
    /// gradient w.r.t. `x`.
    pub fn custom_loss(&mut self, x: Var, loss: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(contract("custom loss gradient size mismatch"));
        }
        Ok(self.push(Tensor::scalar(loss), Op::Loss { x, grad }))
    }

    /// Mean of scalar values.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract("mean of no values"));
        }
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    /// Reverse pass from the scalar `loss`. Every parameter's gradient in
    /// `params` is overwritten: parameters that do not reach `loss` get zero.
    pub fn backward(&self, loss: Var, params: &mut Params) -> Result<()> {
        let grads = self.gradients(loss)?;
        params.zero_grads();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                let pg = params.get_mut(id).grad.data_mut();
                if pg.len() != g.len() {
                    return Err(contract("parameter store does not match tape"));
                }
                pg.copy_from_slice(g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` w.r.t. a recorded value (e.g. a constant input).
    pub fn gradient_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut grads = self.gradients(loss)?;
        let shape = self.value(wrt).shape().to_vec();
        Ok(match grads[wrt.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        })
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(contract(format!("backward from non-scalar of shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn push_back(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = out.cols();
                let da = tensor::matmul_nt(g, self.value(*b).data(), m, n, k);
                let db = tensor::matmul_tn(self.value(*a).data(), g, m, k, n);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, k) = dims(self.value(*a));
                let n = out.cols();
                let da = tensor::matmul(g, self.value(*b).data(), m, n, k);
                let db = tensor::matmul_tn(g, self.value(*a).data(), m, n, k);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(*a));
                accumulate(grads, *a, tensor::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(x, b) => {
                let n = out.cols();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *b, db);
            }
            Op::OuterAddRows(a, b) => {
                let (m, n) = dims(self.value(*a));
                let p = self.value(*b).rows();
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; p * n];
                for i in 0..m {
                    for j in 0..p {
                        let row = &g[(i * p + j) * n..(i * p + j + 1) * n];
                        for c in 0..n {
                            da[i * n + c] += row[c];
                            db[j * n + c] += row[c];
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                accumulate(grads, *a, g.iter().zip(xv).map(|(d, &x)| d * gelu_grad(x)).collect());
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.iter().zip(out.data()).map(|(d, y)| d * (1.0 - y * y)).collect());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        dx[r * n + c] = is / nf * (nf * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let s = r * n..(r + 1) * n;
                    let inner = tensor::dot(&g[s.clone()], &y[s.clone()]);
                    for c in s {
                        dx[c] = y[c] * (g[c] - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let s = r * n..(r + 1) * n;
                    let total: f64 = g[s.clone()].iter().sum();
                    for c in s {
                        dx[c] = g[c] - math::exp(y[c]) * total;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..n {
                        dt[id * n + c] += g[r * n + c];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Dropout { x, keep } => {
                accumulate(grads, *x, g.iter().zip(keep).map(|(d, k)| d * k).collect());
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims(out);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                    }
                    accumulate(grads, p, dp);
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims(self.value(*x));
                let w = out.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / len as f64; len]);
            }
            Op::Loss { x, grad } => {
                accumulate(grads, *x, grad.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) * 0.398_942_280_401_432_7;
    cdf + x * pdf
}

pub(crate) fn softmax_rows(x: &[f64], m: usize, n: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let ok = |c: usize| allowed.map_or(true, |a| a[r * n + c]);
        let max = (0..n).filter(|&c| ok(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..n {
            if ok(c) {
                let e = math::exp(row[c] - max);
                out[r * n + c] = e;
                total += e;
            }
        }
        for o in &mut out[r * n..(r + 1) * n] {
            *o /= total;
        }
    }
    out
}
