//! Reverse-mode differentiation over a linear tape.
//!
//! Every value on the tape is a rank-2 matrix. Ops are evaluated eagerly when
//! recorded; [`Graph::backward`] walks the tape once in reverse order.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{contract, dim_err, Result};

use super::kernels;
use super::params::{ParamStore, StoreGrads};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks an absent source element in [`Graph::gather`]; the output is zero there.
pub const GATHER_ZERO: usize = usize::MAX;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    ColNorm {
        x: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    SumAll(Var),
    RowSum(Var),
    ColSum(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxPoolRows(Var, Vec<usize>),
    RowNorm(Var),
    Custom(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    param_of: HashMap<usize, (u64, usize)>,
}

fn rc(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        rc(&self.nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.rank(), 2);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(&[rows, cols], data).expect("internal shape")
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: &Tensor) -> Var {
        self.push(value.as_matrix(), Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(value.as_matrix(), Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(Self::mat(rows, cols, data), Op::Leaf, false)
    }

    /// A copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored parameter. Repeated calls return the same node; frozen
    /// stores and non-trainable entries become constants.
    pub fn param(&mut self, store: &ParamStore, id: super::params::ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !store.is_frozen() && store.is_trainable(id);
        let v = self.push(store.get(id).as_matrix(), Op::Leaf, trainable);
        self.params.insert(key, v);
        if trainable {
            self.param_of.insert(v.0, key);
        }
        v
    }

    /// Gradients of every trainable entry of `store` that appeared on this tape.
    pub fn store_grads(&self, grads: &Gradients, store: &ParamStore) -> StoreGrads {
        let mut out = StoreGrads::zeros_like(store);
        for (&node, &(uid, idx)) in &self.param_of {
            if uid == store.uid() {
                if let Some(g) = grads.wrt(Var(node)) {
                    out.grads[idx] = Some(g.to_vec());
                }
            }
        }
        out
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::mat(m, n, out), Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dim_err(format!("matmul_bt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::mat(m, n, out), Op::MatMulBt(a, b), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Self::mat(m, n, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "div")?;
        Ok(self.zip_with(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(dim_err(format!(
                "add_row: {m}x{n} with {:?}",
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Self::mat(m, n, data), Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(dim_err(format!(
                "mul_row: {m}x{n} with {:?}",
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x *= y);
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Self::mat(m, n, data), Op::MulRow(a, row), ng))
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is `m x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(dim_err(format!(
                "mul_col: {m}x{n} with {:?}",
                self.shape(col)
            )));
        }
        let c = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|x| *x *= c[i]);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Self::mat(m, n, data), Op::MulCol(a, col), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(Self::mat(m, n, data), op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Shift(a))
    }

    /// Adds a constant tensor of the same shape (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if c.len() != m * n {
            return Err(dim_err("add_const length"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Self::mat(m, n, data), Op::Shift(a), ng))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if c.len() != m * n {
            return Err(dim_err("mul_const length"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&c)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Self::mat(m, n, data), Op::MulConst(a, c), ng))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let (m, n) = self.shape(a);
        let keep = 1.0 - p;
        let mask = (0..m * n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_in_place);
        let ng = self.ng(a);
        self.push(Self::mat(m, n, data), Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        data.chunks_mut(n).for_each(kernels::log_softmax_in_place);
        let ng = self.ng(a);
        self.push(Self::mat(m, n, data), Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise layer normalisation with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(dim_err(format!("layer_norm width {d}")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let (mean, is) = kernels::mean_inv_std(row, eps);
            inv[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Self::mat(m, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            ng,
        ))
    }

    /// Normalises each column over the rows (batch statistics, population variance).
    /// Returns the normalised values plus the per-column mean and variance.
    pub fn col_norm(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (m, n) = self.shape(x);
        let src = self.value(x).data();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                mean[j] += src[i * n + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for i in 0..m {
            for j in 0..n {
                let d = src[i * n + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (src[i * n + j] - mean[j]) * inv[j];
            }
        }
        let ng = self.ng(x);
        let out = Self::mat(m, n, xhat.clone());
        let v = self.push(out, Op::ColNorm { x, xhat, inv }, ng);
        (v, mean, var)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Self::mat(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m x n -> m x 1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let ng = self.ng(a);
        self.push(Self::mat(m, 1, data), Op::RowSum(a), ng)
    }

    /// `m x n -> 1 x n`
    pub fn col_sum(&mut self, a: Var) -> Var {
        let (_, n) = self.shape(a);
        let mut data = vec![0.0; n];
        for r in self.value(a).data().chunks(n) {
            data.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        let ng = self.ng(a);
        self.push(Self::mat(1, n, data), Op::ColSum(a), ng)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = self.shape(a).0 as f64;
        let s = self.col_sum(a);
        self.scale(s, 1.0 / m)
    }

    /// Output element `i` is `a.flat[idx[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if idx.len() != rows * cols {
            return Err(dim_err("gather index length"));
        }
        let src = self.value(a).data();
        if idx.iter().any(|&i| i != GATHER_ZERO && i >= src.len()) {
            return Err(dim_err("gather index out of range"));
        }
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Self::mat(rows, cols, data), Op::Gather(a, idx), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > m {
            return Err(dim_err(format!("slice_rows {start}..{end} of {m}")));
        }
        let idx = (start * n..end * n).collect();
        self.gather(a, idx, end - start, n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(dim_err(format!("slice_cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut idx = Vec::with_capacity(m * w);
        for i in 0..m {
            idx.extend(i * n + start..i * n + end);
        }
        self.gather(a, idx, m, w)
    }

    /// Picks rows by index, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(dim_err("select_rows index"));
        }
        let mut idx = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            idx.extend(r * n..(r + 1) * n);
        }
        self.gather(a, idx, rows.len(), n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut idx = vec![0; m * n];
        for i in 0..m {
            for j in 0..n {
                idx[j * m + i] = i * n + j;
            }
        }
        self.gather(a, idx, n, m).expect("transpose indices")
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let order: Vec<usize> = (0..m).rev().collect();
        self.select_rows(a, &order).expect("reverse indices")
    }

    /// Picks one element per row: `out[i] = a[i, cols[i]]`, giving `m x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(dim_err("pick index"));
        }
        let idx = cols.iter().enumerate().map(|(i, &c)| i * n + c).collect();
        self.gather(a, idx, m, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(*parts.first().ok_or_else(|| dim_err("concat of nothing"))?).0;
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return Err(dim_err("concat_cols row mismatch"));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::mat(m, n, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(*parts.first().ok_or_else(|| dim_err("concat of nothing"))?).1;
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return Err(dim_err("concat_rows column mismatch"));
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::mat(m, n, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Max over consecutive row pairs (window 2, stride 2); an odd last row
    /// forms its own window, so the output has `ceil(m / 2)` rows.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).0;
        self.max_pool_segments(a, &[m])
            .expect("a single segment always covers the input")
    }

    /// `max_pool_rows` applied independently to consecutive row segments of
    /// the given lengths; windows never straddle a segment boundary.
    pub fn max_pool_segments(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if lens.iter().sum::<usize>() != m {
            return Err(dim_err(format!("max_pool_segments: lengths do not sum to {m}")));
        }
        let out_m: usize = lens.iter().map(|l| l.div_ceil(2)).sum();
        let src = self.value(a).data();
        let mut data = vec![0.0; out_m * n];
        let mut arg = vec![0; out_m * n];
        let (mut base, mut o) = (0, 0);
        for &len in lens {
            for w in 0..len.div_ceil(2) {
                let r0 = base + 2 * w;
                for j in 0..n {
                    let i0 = r0 * n + j;
                    let (mut best, mut bi) = (src[i0], i0);
                    if 2 * w + 1 < len {
                        let i1 = i0 + n;
                        if src[i1] > best {
                            best = src[i1];
                            bi = i1;
                        }
                    }
                    data[o * n + j] = best;
                    arg[o * n + j] = bi;
                }
                o += 1;
            }
            base += len;
        }
        let ng = self.ng(a);
        Ok(self.push(Self::mat(out_m, n, data), Op::MaxPoolRows(a, arg), ng))
    }

    /// Euclidean norm of each row, `m x 1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| kernels::dot(r, r).sqrt())
            .collect();
        let ng = self.ng(a);
        self.push(Self::mat(m, 1, data), Op::RowNorm(a), ng)
    }

    /// Records a scalar whose gradient with respect to `input` was computed
    /// by the caller (e.g. a dynamic-programming loss).
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(dim_err("custom gradient length"));
        }
        let ng = self.ng(input);
        Ok(self.push(Self::mat(1, 1, vec![value]), Op::Custom(input, grad), ng))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let (m, n) = rc(&node.value);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    kernels::matmul_bt_acc(dy, self.value(*b).data(), ga, m, n, k);
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    kernels::matmul_at_acc(av, dy, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (_, k) = self.shape(*a);
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    kernels::matmul_acc(dy, self.value(*b).data(), ga, m, n, k);
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    kernels::matmul_at_acc(dy, av, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                self.acc(grads, *row, |g| {
                    for r in dy.chunks(n) {
                        g.iter_mut().zip(r).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * rv[i % n];
                    }
                });
                self.acc(grads, *row, |g| {
                    for i in 0..dy.len() {
                        g[i % n] += dy[i] * av[i];
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                self.acc(grads, *a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[i * n + j] * cv[i];
                        }
                    }
                });
                self.acc(grads, *col, |g| {
                    for i in 0..m {
                        g[i] += kernels::dot(&dy[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * k));
            }
            Op::Shift(a) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * c[i];
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / av[i];
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * dy[i] * av[i];
                    }
                });
            }
            Op::SoftmaxRows(a) => self.acc(grads, *a, |g| {
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let s = kernels::dot(&dy[r.clone()], &y[r.clone()]);
                    for j in r {
                        g[j] += y[j] * (dy[j] - s);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => self.acc(grads, *a, |g| {
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let s: f64 = dy[r.clone()].iter().sum();
                    for j in r {
                        g[j] += dy[j] - y[j].exp() * s;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += dy[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc(grads, *bias, |g| {
                    for r in dy.chunks(n) {
                        g.iter_mut().zip(r).for_each(|(g, d)| *g += d);
                    }
                });
                self.acc(grads, *x, |g| {
                    let d = n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = dy[i * n + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = dy[i * n + j] * gv[j];
                            g[i * n + j] += inv[i] / d * (d * dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                });
            }
            Op::ColNorm { x, xhat, inv } => self.acc(grads, *x, |g| {
                let cnt = m as f64;
                for j in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..m {
                        s1 += dy[i * n + j];
                        s2 += dy[i * n + j] * xhat[i * n + j];
                    }
                    for i in 0..m {
                        g[i * n + j] += inv[j] / cnt
                            * (cnt * dy[i * n + j] - s1 - xhat[i * n + j] * s2);
                    }
                }
            }),
            Op::SumAll(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::RowSum(a) => {
                let an = self.shape(*a).1;
                self.acc(grads, *a, |g| {
                    for (i, r) in g.chunks_mut(an).enumerate() {
                        r.iter_mut().for_each(|v| *v += dy[i]);
                    }
                });
            }
            Op::ColSum(a) => self.acc(grads, *a, |g| {
                for r in g.chunks_mut(n) {
                    r.iter_mut().zip(dy).for_each(|(v, d)| *v += d);
                }
            }),
            Op::Gather(a, idx) => self.acc(grads, *a, |g| {
                for (o, &i) in idx.iter().enumerate() {
                    if i != GATHER_ZERO {
                        g[i] += dy[o];
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.acc(grads, p, |g| {
                        for i in 0..m {
                            for j in 0..w {
                                g[i * w + j] += dy[i * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |g| {
                        g.iter_mut()
                            .zip(&dy[off..off + len])
                            .for_each(|(g, d)| *g += d);
                    });
                    off += len;
                }
            }
            Op::MaxPoolRows(a, arg) => self.acc(grads, *a, |g| {
                for (o, &i) in arg.iter().enumerate() {
                    g[i] += dy[o];
                }
            }),
            Op::RowNorm(a) => {
                let av = self.value(*a).data();
                let an = self.shape(*a).1;
                self.acc(grads, *a, |g| {
                    for i in 0..m {
                        if y[i] > 0.0 {
                            for j in 0..an {
                                g[i * an + j] += dy[i] * av[i * an + j] / y[i];
                            }
                        }
                    }
                });
            }
            Op::Custom(a, local) => self.acc(grads, *a, |g| {
                g.iter_mut().zip(local).for_each(|(g, l)| *g += dy[0] * l);
            }),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.ng(v) {
            f(self.slot(grads, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.leaf(&Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, 3.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // ones(2x3) * B^T: each row equals the row sums of B.
        assert_eq!(grads.wrt(a).unwrap(), &[1.5, 4.5, 1.5, 4.5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::ones(&[1, 3]));
        let b = g.leaf(&Tensor::ones(&[1, 3]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_odd_length() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::new(&[5, 1], vec![1.0, 3.0, 2.0, 0.0, 7.0]).unwrap());
        let p = g.max_pool_rows(a);
        assert_eq!(g.value(p).data(), &[3.0, 2.0, 7.0]);
    }

    #[test]
    fn row_norm_zero_row_has_zero_grad() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[1, 3]));
        let n = g.row_norm(a);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(a).unwrap().iter().all(|v| *v == 0.0));
    }
}
