//! Tape-recorded forward ops and the reverse sweep.
//!
//! Every op appends a node whose parents already live on the tape, so node
//! order is a valid topological order and `backward` is one reverse pass.

use super::{NumError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Tanh(usize),
    Sigmoid(usize),
    LogSoftmax(usize),
    Softmax(usize),
    SumAll(usize),
    SumAxis { src: usize, axis: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Scale(usize, f64),
    StopGrad,
    Pick { src: usize, idx: Vec<usize> },
    MaskedMax { parts: Vec<usize>, winner: Vec<u32> },
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rank2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, t.len()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite("leaf".into()));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var, NumError> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, mk(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x[n, m] + bias[m]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (_, m) = rank2(self.value(x));
        if self.value(bias).len() != m {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (n, k, k2, p) = match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, p]) => (*n, *k, *k2, *p),
            _ => {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    left: sa,
                    right: sb,
                })
            }
        };
        if k != k2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = vec![0.0; n * p];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, p);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        if parts.is_empty() || axis > 1 {
            return Err(NumError::InvalidArgument("concat needs parts and axis 0 or 1".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| rank2(self.value(p))).collect();
        let (r0, c0) = dims[0];
        for (i, &(r, c)) in dims.iter().enumerate() {
            if (axis == 1 && r != r0) || (axis == 0 && c != c0) {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(parts[i]).to_vec(),
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat { parts: ids, axis }, rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = rank2(self.value(x));
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(NumError::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let out = if axis == 0 {
            Tensor::new(vec![len, c], src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Slice { src: x.0, axis, start }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| f(z)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |z| z * k, Op::Scale(x.0, k))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(out, Op::LogSoftmax(x.0), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Softmax(x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of a rank-2 tensor over `axis`; the reduced axis keeps size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        if axis > 1 {
            return Err(NumError::InvalidArgument(format!("sum_axis axis {axis}")));
        }
        let (r, c) = rank2(self.value(x));
        let src = self.value(x).data();
        let out = if axis == 1 {
            Tensor::new(vec![r, 1], src.chunks(c).map(|row| row.iter().sum()).collect())?
        } else {
            let mut acc = vec![0.0; c];
            for row in src.chunks(c) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            Tensor::new(vec![1, c], acc)?
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::SumAxis { src: x.0, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let (r, c) = rank2(self.value(x));
        let n = if axis == 0 { r } else { c };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Row lookup `table[ids[r], :]`, equivalent to one-hot(ids) × table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (v, d) = rank2(self.value(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumError::InvalidArgument(format!("embedding id {bad} >= vocabulary {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Same value as `x`, but no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// `x[r, idx[r]]` as a `[n, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let (r, c) = rank2(self.value(x));
        if idx.len() != r {
            return Err(NumError::ShapeMismatch {
                op: "pick",
                left: self.shape(x).to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&k| k >= c) {
            return Err(NumError::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(x).data();
        let data = idx.iter().enumerate().map(|(row, &k)| src[row * c + k]).collect();
        let out = Tensor::new(vec![r, 1], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Pick { src: x.0, idx: idx.to_vec() }, rg))
    }

    /// Elementwise max over the parts whose `mask[row * parts.len() + p]` is set.
    ///
    /// Every part is `[n, f]`. A row with no active part is an error.
    pub fn masked_max(&mut self, parts: &[Var], mask: &[bool]) -> Result<Var, NumError> {
        let k = parts.len();
        if k == 0 {
            return Err(NumError::InvalidArgument("masked_max needs parts".into()));
        }
        let (n, f) = rank2(self.value(parts[0]));
        for &p in parts {
            if rank2(self.value(p)) != (n, f) {
                return Err(NumError::ShapeMismatch {
                    op: "masked_max",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if mask.len() != n * k {
            return Err(NumError::InvalidArgument(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                n * k
            )));
        }
        let mut out = vec![f64::NEG_INFINITY; n * f];
        let mut winner = vec![u32::MAX; n * f];
        for row in 0..n {
            let active = &mask[row * k..(row + 1) * k];
            if !active.iter().any(|&m| m) {
                return Err(NumError::InvalidArgument(format!("masked_max row {row} has no active input")));
            }
            for (p, &part) in parts.iter().enumerate() {
                if !active[p] {
                    continue;
                }
                let src = &self.value(part).data()[row * f..(row + 1) * f];
                let dst = &mut out[row * f..(row + 1) * f];
                let win = &mut winner[row * f..(row + 1) * f];
                for c in 0..f {
                    if src[c] > dst[c] {
                        dst[c] = src[c];
                        win[c] = p as u32;
                    }
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        let out = Tensor::new(vec![n, f], out)?;
        Ok(self.push(out, Op::MaskedMax { parts: ids, winner }, rg))
    }

    /// Forward value is the row-wise one-hot argmax of `soft`; the gradient
    /// passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let v = self.value(soft);
        let c = v.cols();
        let hot = v.argmax_rows();
        let mut data = vec![0.0; v.len()];
        for (r, k) in hot.into_iter().enumerate() {
            data[r * c + k] = 1.0;
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[soft.0]);
        self.push(out, Op::StraightThrough(soft.0), rg)
    }

    /// Reverse sweep from a one-element `loss`. Overwrites previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; zeros when none reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) if self.nodes[v.0].requires_grad => Tensor::new(shape, g.clone()).expect("grad shape"),
            _ => Tensor::zeros(&shape),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let acc = |target: usize, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(&mut [f64])| {
            if !nodes[target].requires_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                acc(*a, grads, &|buf| add_into(buf, g));
                acc(*b, grads, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &|buf| add_into(buf, g));
                acc(*b, grads, &|buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, grads, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                acc(*b, grads, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, grads, &|buf| add_into(buf, g));
                acc(*b, grads, &|buf| {
                    let m = buf.len();
                    for row in g.chunks(m) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (n, k) = rank2(ta);
                let (_, p) = rank2(tb);
                acc(*a, grads, &|buf| matmul_nt_acc(g, tb.data(), buf, n, p, k));
                acc(*b, grads, &|buf| matmul_tn_acc(ta.data(), g, buf, n, k, p));
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(p, grads, &|buf| add_into(buf, &g[off..off + len]));
                        off += len;
                    }
                } else {
                    let (rows, total) = rank2(&node.value);
                    let mut off = 0;
                    for &p in parts {
                        let (_, c) = rank2(&nodes[p].value);
                        acc(p, grads, &|buf| {
                            for r in 0..rows {
                                add_into(&mut buf[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                            }
                        });
                        off += c;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = rank2(&nodes[*src].value);
                let (_, len) = rank2(&node.value);
                acc(*src, grads, &|buf| {
                    if *axis == 0 {
                        add_into(&mut buf[start * c..start * c + g.len()], g);
                    } else {
                        for row in 0..r {
                            add_into(&mut buf[row * c + start..row * c + start + len], &g[row * len..(row + 1) * len]);
                        }
                    }
                });
            }
            Op::Tanh(x) => acc(*x, grads, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(x) => acc(*x, grads, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Scale(x, k) => acc(*x, grads, &|buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(*x, grads, &|buf| {
                    for ((b, gr), y) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for i in 0..c {
                            b[i] += gr[i] - y[i].exp() * s;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                acc(*x, grads, &|buf| {
                    for ((b, gr), y) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            b[i] += y[i] * (gr[i] - s);
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, grads, &|buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SumAxis { src, axis } => {
                let (_, c) = rank2(&nodes[*src].value);
                acc(*src, grads, &|buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        if *axis == 1 {
                            row.iter_mut().for_each(|o| *o += g[r]);
                        } else {
                            add_into(row, g);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, grads, &|buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Pick { src, idx } => {
                let c = nodes[*src].value.cols();
                acc(*src, grads, &|buf| {
                    for (r, &k) in idx.iter().enumerate() {
                        buf[r * c + k] += g[r];
                    }
                });
            }
            Op::MaskedMax { parts, winner } => {
                for (p, &part) in parts.iter().enumerate() {
                    acc(part, grads, &|buf| {
                        for (i, &w) in winner.iter().enumerate() {
                            if w as usize == p {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::StraightThrough(x) => acc(*x, grads, &|buf| add_into(buf, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    row.iter_mut().for_each(|z| *z /= s);
}

// C[n,p] = A[n,k] B[k,p]; zero entries of A are skipped (one-hot inputs are common).
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            crow.iter_mut().zip(brow).for_each(|(c, &bv)| *c += av * bv);
        }
    }
}

// dA[n,k] += dC[n,p] B[k,p]^T
fn matmul_nt_acc(dc: &[f64], b: &[f64], da: &mut [f64], n: usize, p: usize, k: usize) {
    for i in 0..n {
        let drow = &dc[i * p..(i + 1) * p];
        if drow.iter().all(|&v| v == 0.0) {
            continue;
        }
        let darow = &mut da[i * k..(i + 1) * k];
        for (out, brow) in darow.iter_mut().zip(b.chunks_exact(p)) {
            *out += dot(drow, brow);
        }
    }
}

// Four independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for q in 0..4 {
            s[q] += x[q] * y[q];
        }
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

// dB[k,p] += A[n,k]^T dC[n,p]
fn matmul_tn_acc(a: &[f64], dc: &[f64], db: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let drow = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &mut db[kk * p..(kk + 1) * p];
            brow.iter_mut().zip(drow).for_each(|(o, &d)| *o += av * d);
        }
    }
}
