//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive op in execution order, so node ids are
//! already a topological order and the backward sweep is a single reverse
//! pass. Parameters enter the tape through [`Tape::param`] and are reported
//! back by [`ParamId`] after [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_tn_acc, transpose, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter, assigned by the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Abs(Var),
    Gather(Var, Vec<usize>),
    GroupSum(Var, usize),
    GroupMean(Var, usize),
    GroupMax(Var, Vec<usize>),
    MulRows(Var, Var),
    RowDot(Var, Var),
    RowCosine(Var, Var),
    SoftmaxRows(Var, f64),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Zero-norm threshold below which a cosine is defined as 0.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), g)
    }

    /// Applies a weight matrix `w[out×in]` to every row of `x[m×in]`: `x · wᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (m, i, o) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let wt = transpose(wv.data(), o, i);
        let mut out = vec![0.0; m * o];
        gemm_acc(xv.data(), &wt, &mut out, m, i, o);
        let value = Tensor::from_parts(vec![m, o], out);
        let g = self.needs(x) || self.needs(w);
        self.push("linear", value, Op::Linear(x, w), g)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % nb]))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let g = self.needs(a) || self.needs(b);
        self.push(name, value, op, g)
    }

    /// Elementwise sum; `b` may match the trailing extents of `a` and is
    /// broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        let g = self.needs(a);
        self.push("scale", value, Op::Scale(a, c), g)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { alpha * x })
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let g = self.needs(a);
        self.push("leaky_relu", value, Op::LeakyRelu(a, alpha), g)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x.abs()).collect());
        let g = self.needs(a);
        self.push("abs", value, Op::Abs(a), g)
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let g = self.needs(a);
        self.push("gather", value, Op::Gather(a, idx.to_vec()), g)
    }

    fn group_dims(&self, name: &'static str, a: Var, size: usize) -> Result<(usize, usize)> {
        let av = self.value(a);
        if av.rank() != 2 || size == 0 || !av.rows().is_multiple_of(size) {
            return Err(Error::shape(
                name,
                format!("{:?} cannot be split into groups of {size} rows", av.shape()),
            ));
        }
        Ok((av.rows() / size, av.cols()))
    }

    /// Sums consecutive blocks of `size` rows: `[(g·size)×d] -> [g×d]`.
    pub fn group_sum(&mut self, a: Var, size: usize) -> Result<Var> {
        let (groups, d) = self.group_dims("group_sum", a, size)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; groups * d];
        for (r, row) in av.chunks(d).enumerate() {
            let o = &mut out[(r / size) * d..(r / size + 1) * d];
            for (x, y) in o.iter_mut().zip(row) {
                *x += y;
            }
        }
        let g = self.needs(a);
        self.push("group_sum", Tensor::from_parts(vec![groups, d], out), Op::GroupSum(a, size), g)
    }

    /// Channel-wise mean over consecutive blocks of `size` rows.
    pub fn group_mean(&mut self, a: Var, size: usize) -> Result<Var> {
        let (groups, d) = self.group_dims("group_mean", a, size)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; groups * d];
        for (r, row) in av.chunks(d).enumerate() {
            let o = &mut out[(r / size) * d..(r / size + 1) * d];
            for (x, y) in o.iter_mut().zip(row) {
                *x += y;
            }
        }
        let inv = 1.0 / size as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let g = self.needs(a);
        self.push("group_mean", Tensor::from_parts(vec![groups, d], out), Op::GroupMean(a, size), g)
    }

    /// Channel-wise max over consecutive blocks of `size` rows. Ties resolve
    /// to the first row, which also receives the whole gradient.
    pub fn group_max(&mut self, a: Var, size: usize) -> Result<Var> {
        let (groups, d) = self.group_dims("group_max", a, size)?;
        let av = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; groups * d];
        let mut arg = vec![0usize; groups * d];
        for (r, row) in av.chunks(d).enumerate() {
            let base = (r / size) * d;
            for (j, &x) in row.iter().enumerate() {
                if x > out[base + j] {
                    out[base + j] = x;
                    arg[base + j] = r;
                }
            }
        }
        let g = self.needs(a);
        self.push("group_max", Tensor::from_parts(vec![groups, d], out), Op::GroupMax(a, arg), g)
    }

    /// Scales each row of `a[m×d]` by the matching entry of `s[m×1]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if av.rank() != 2 || sv.len() != av.rows() {
            return Err(Error::shape("mul_rows", format!("{:?} by {:?}", av.shape(), sv.shape())));
        }
        let d = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * sv.data()[i / d])
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let g = self.needs(a) || self.needs(s);
        self.push("mul_rows", value, Op::MulRows(a, s), g)
    }

    fn same_matrix(&self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok((sa[0], sa[1]))
    }

    /// Row-wise inner product: `[m×d]·[m×d] -> [m×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.same_matrix("row_dot", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                av[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bv[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let g = self.needs(a) || self.needs(b);
        self.push("row_dot", Tensor::from_parts(vec![m, 1], out), Op::RowDot(a, b), g)
    }

    /// Row-wise cosine similarity `[m×d], [m×d] -> [m×1]`; a row pair where
    /// either norm is below [`COSINE_EPS`] yields 0 with zero gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.same_matrix("row_cosine", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| cosine(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]))
            .collect();
        let g = self.needs(a) || self.needs(b);
        self.push("row_cosine", Tensor::from_parts(vec![m, 1], out), Op::RowCosine(a, b), g)
    }

    /// Softmax along the last axis of a matrix, with logits divided by `scale`.
    /// Rank-1 inputs are treated as a single row.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("softmax scale must be positive, got {scale}")));
        }
        let av = self.value(a);
        let n = *av.shape().last().unwrap();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row, scale);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let g = self.needs(a);
        self.push("softmax", value, Op::SoftmaxRows(a, scale), g)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut along = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = along;
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.len() / outer;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let g = self.needs(a);
        self.push("reshape", value, Op::Reshape(a), g)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let g = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), g)
    }

    /// Mean over rows of `−log softmax(logits)[label]` for `logits[m×K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= labels.len() as f64;
        let g = self.needs(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            g,
        )
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    params.push((*pid, Tensor::from_parts(node.value.shape().to_vec(), gout)));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let bt = transpose(bv.data(), k, n);
                        let mut da = vec![0.0; m * k];
                        gemm_acc(&gout, &bt, &mut da, m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn_acc(av.data(), &gout, &mut db, m, k, n);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, i, o) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; m * i];
                        gemm_acc(&gout, wv.data(), &mut dx, m, o, i);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; o * i];
                        gemm_tn_acc(&gout, xv.data(), &mut dw, m, o, i);
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.needs(*b) {
                        let nb = self.value(*b).len();
                        let mut db = vec![0.0; nb];
                        for (i, g) in gout.iter().enumerate() {
                            db[i % nb] += sign * g;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gout);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let nb = bv.len();
                    if self.needs(*a) {
                        let da = gout.iter().enumerate().map(|(i, g)| g * bv[i % nb]).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; nb];
                        for (i, g) in gout.iter().enumerate() {
                            db[i % nb] += g * av[i];
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, gout.iter().map(|g| g * c).collect());
                }
                Op::LeakyRelu(a, alpha) => {
                    let av = self.value(*a).data();
                    let da = gout
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { alpha * g })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let av = self.value(*a).data();
                    let da = gout
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let d = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            da[src * d + j] += gout[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GroupSum(a, size) | Op::GroupMean(a, size) => {
                    let av = self.value(*a);
                    let d = av.cols();
                    let f = if matches!(node.op, Op::GroupMean(..)) {
                        1.0 / *size as f64
                    } else {
                        1.0
                    };
                    let mut da = vec![0.0; av.len()];
                    for (r, row) in da.chunks_mut(d).enumerate() {
                        let g = &gout[(r / size) * d..(r / size + 1) * d];
                        for (x, y) in row.iter_mut().zip(g) {
                            *x = f * y;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GroupMax(a, arg) => {
                    let av = self.value(*a);
                    let d = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (flat, &r) in arg.iter().enumerate() {
                        da[r * d + flat % d] += gout[flat];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MulRows(a, s) => {
                    let (av, sv) = (self.value(*a), self.value(*s).data());
                    let d = av.cols();
                    if self.needs(*a) {
                        let da = gout.iter().enumerate().map(|(i, g)| g * sv[i / d]).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*s) {
                        let ds = (0..sv.len())
                            .map(|r| {
                                gout[r * d..(r + 1) * d]
                                    .iter()
                                    .zip(av.row(r))
                                    .map(|(g, x)| g * x)
                                    .sum()
                            })
                            .collect();
                        accumulate(&mut grads, *s, ds);
                    }
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let d = self.value(*a).cols();
                    if self.needs(*a) {
                        let da = bv.iter().enumerate().map(|(i, y)| gout[i / d] * y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = av.iter().enumerate().map(|(i, x)| gout[i / d] * x).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::RowCosine(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let d = self.value(*a).cols();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for (r, &g) in gout.iter().enumerate() {
                        let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let nx = norm(x);
                        let ny = norm(y);
                        if nx < COSINE_EPS || ny < COSINE_EPS {
                            continue;
                        }
                        let c = node.value.data()[r];
                        for j in 0..d {
                            da[r * d + j] = g * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                            db[r * d + j] = g * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                        }
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::SoftmaxRows(a, scale) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut da = vec![0.0; y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot) / scale;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat(parts, axis) => {
                    let outer: usize = node.value.shape()[..*axis].iter().product();
                    let mut offset = 0;
                    let mut slices: Vec<Vec<f64>> =
                        parts.iter().map(|p| Vec::with_capacity(self.value(*p).len())).collect();
                    for _ in 0..outer {
                        for (k, p) in parts.iter().enumerate() {
                            let chunk = self.value(*p).len() / outer;
                            slices[k].extend_from_slice(&gout[offset..offset + chunk]);
                            offset += chunk;
                        }
                    }
                    for (p, s) in parts.iter().zip(slices) {
                        if self.needs(*p) {
                            accumulate(&mut grads, *p, s);
                        }
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, gout),
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![gout[0]; n]);
                }
                Op::CrossEntropy(a, labels, probs) => {
                    let k = self.value(*a).cols();
                    let f = gout[0] / labels.len() as f64;
                    let mut da: Vec<f64> = probs.iter().map(|p| p * f).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        da[r * k + l] -= f;
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        // a parameter bound twice on the same tape reports the summed gradient
        let mut merged: Vec<(ParamId, Tensor)> = Vec::with_capacity(params.len());
        for (id, g) in params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => {
                    for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                _ => merged.push((id, g)),
            }
        }
        Ok(Gradients { params: merged })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (x, y) in acc.iter_mut().zip(&g) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of the angle between two vectors; 0 if either norm is below [`COSINE_EPS`].
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx < COSINE_EPS || ny < COSINE_EPS {
        return 0.0;
    }
    let c = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
    c.clamp(-1.0, 1.0)
}

/// Max-subtracted softmax of `row / scale`, in place.
pub fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / scale).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Gradients of one backward sweep, keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .binary_search_by_key(&id, |(p, _)| *p)
            .ok()
            .map(|i| &self.params[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }
}
