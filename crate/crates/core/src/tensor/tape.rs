use std::rc::Rc;

use super::{axis_extents, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    SegmentSoftmax { x: Var, segments: Rc<[usize]> },
    GatherRows { x: Var, index: Rc<[usize]> },
    ScatterAddRows { x: Var, index: Rc<[usize]> },
    ScaleRows { x: Var, scale: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Conv1d { x: Var, kernel: Var },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    /// Records a leaf that gradients are accumulated for.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn matrix(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err!("expected a 2-D tensor, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a)?;
        let (k2, n) = self.matrix(b)?;
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {m}x{k} · {k2}x{n}"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a)?;
        let t = Tensor::new(vec![c, r], transpose_raw(self.value(a).data(), r, c))?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Transpose(a), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Scale(a, factor), tracked)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Square(a), tracked)
    }

    /// Adds a bias vector along `axis` of a matrix: `axis = 1` adds `bias[j]`
    /// to every column `j`, `axis = 0` adds `bias[i]` to every row `i`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix(x)?;
        let want = match axis {
            0 => r,
            1 => c,
            _ => return Err(shape_err!("bias axis {axis} out of range for a matrix")),
        };
        if self.value(bias).len() != want || self.shape(bias).len() != 1 {
            return Err(shape_err!(
                "bias of shape {:?} does not fit axis {axis} of {r}x{c}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += if axis == 0 { b[i] } else { b[j] };
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias, axis }, tracked))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Relu(a), tracked)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_extents(self.shape(x), axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (data[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    data[idx(k)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, tracked))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_extents(self.shape(x), axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|k| (data[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..n {
                    data[idx(k)] -= lse;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, tracked))
    }

    /// Softmax of a 1-D tensor computed independently within each segment;
    /// `segments[e]` names the group element `e` belongs to.
    pub fn segment_softmax(&mut self, x: Var, segments: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 1 || v.len() != segments.len() {
            return Err(shape_err!(
                "segment softmax needs a vector matching {} segment ids, got {:?}",
                segments.len(),
                v.shape()
            ));
        }
        let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&s, &e) in segments.iter().zip(v.data()) {
            max[s] = max[s].max(e);
        }
        let mut data: Vec<f64> = segments
            .iter()
            .zip(v.data())
            .map(|(&s, &e)| (e - max[s]).exp())
            .collect();
        let mut total = vec![0.0; groups];
        for (&s, &e) in segments.iter().zip(&data) {
            total[s] += e;
        }
        for (&s, e) in segments.iter().zip(data.iter_mut()) {
            *e /= total[s];
        }
        let t = Tensor::new(vec![data.len()], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::SegmentSoftmax { x, segments }, tracked))
    }

    /// Selects rows of a matrix (or elements of a vector) by index.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2().map(|(r, c)| if v.rank() == 1 { (c, 1) } else { (r, c) })?;
        if index.is_empty() {
            return Err(shape_err!("gather with an empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            if i >= rows {
                return Err(shape_err!("gather index {i} out of range for {rows} rows"));
            }
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let shape = if v.rank() == 1 { vec![index.len()] } else { vec![index.len(), cols] };
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::GatherRows { x, index }, tracked))
    }

    /// Sums row `e` of `x` into output row `index[e]` of an `n`-row result.
    pub fn scatter_add_rows(&mut self, x: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x)?;
        if rows != index.len() {
            return Err(shape_err!("scatter: {rows} rows but {} indices", index.len()));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * cols];
        for (e, &dst) in index.iter().enumerate() {
            if dst >= n {
                return Err(shape_err!("scatter index {dst} out of range for {n} rows"));
            }
            for j in 0..cols {
                data[dst * cols + j] += src[e * cols + j];
            }
        }
        let t = Tensor::new(vec![n, cols], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::ScatterAddRows { x, index }, tracked))
    }

    /// Multiplies row `i` of a matrix by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(x)?;
        if self.value(scale).len() != rows {
            return Err(shape_err!(
                "scale_rows: {rows} rows but scale of shape {:?}",
                self.shape(scale)
            ));
        }
        let s = self.value(scale).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v * s[k / cols])
            .collect();
        let t = Tensor::new(vec![rows, cols], data)?;
        let tracked = self.tracked(&[x, scale]);
        Ok(self.push(t, Op::ScaleRows { x, scale }, tracked))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let off_axis_match = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !off_axis_match {
                return Err(shape_err!("concat: {s:?} does not match {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis)?;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let chunk = n * inner;
                data.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Valid (unpadded, stride 1) cross-correlation of `x: [c_in, L]` with
    /// `kernel: [c_out, c_in, K]`, giving `[c_out, L - K + 1]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (c_in, len) = self.matrix(x)?;
        let (c_out, kc, k) = match self.shape(kernel) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(shape_err!("conv1d kernel must be 3-D, got {s:?}")),
        };
        if kc != c_in {
            return Err(shape_err!("conv1d kernel expects {kc} channels, input has {c_in}"));
        }
        if k > len {
            return Err(shape_err!("conv1d kernel size {k} exceeds length {len}"));
        }
        let out_len = len - k + 1;
        let xs = self.value(x).data();
        let ws = self.value(kernel).data();
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            for c in 0..c_in {
                let xrow = &xs[c * len..(c + 1) * len];
                let wrow = &ws[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (t, y) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (dk, w) in wrow.iter().enumerate() {
                        acc += xrow[t + dk] * w;
                    }
                    *y += acc;
                }
            }
        }
        let t = Tensor::new(vec![c_out, out_len], out)?;
        let tracked = self.tracked(&[x, kernel]);
        Ok(self.push(t, Op::Conv1d { x, kernel }, tracked))
    }

    /// Max over non-overlapping pairs along the last axis of `[c, L]`; an odd
    /// trailing element is dropped. Ties resolve to the first element.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let (c, len) = self.matrix(x)?;
        if len < 2 {
            return Err(shape_err!("maxpool1d needs length >= 2, got {len}"));
        }
        let half = len / 2;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(c * half);
        let mut argmax = Vec::with_capacity(c * half);
        for ch in 0..c {
            for t in 0..half {
                let i = ch * len + 2 * t;
                let pick = if xs[i + 1] > xs[i] { i + 1 } else { i };
                out.push(xs[pick]);
                argmax.push(pick);
            }
        }
        let t = Tensor::new(vec![c, half], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::MaxPool1d { x, argmax }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Mean(x), tracked)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix(*a)?;
                let (_, n) = self.matrix(*b)?;
                if self.nodes[a.0].tracked {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let ga = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.nodes[b.0].tracked {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let gb = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.matrix(*a)?;
                let ga = transpose_raw(gd, c, r);
                self.accumulate(grads, *a, Tensor::new(vec![r, c], ga)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let ga = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let gb = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Square(a) => {
                let va = self.value(*a);
                let ga = gd.iter().zip(va.data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
            }
            Op::AddBias { x, bias, axis } => {
                let (r, c) = self.matrix(*x)?;
                self.accumulate(grads, *x, g.clone());
                let mut gb = vec![0.0; if *axis == 0 { r } else { c }];
                for i in 0..r {
                    for j in 0..c {
                        gb[if *axis == 0 { i } else { j }] += gd[i * c + j];
                    }
                }
                let shape = self.shape(*bias).to_vec();
                self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let ga = gd
                    .iter()
                    .zip(va.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let total: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = gd[idx(k)] - y[idx(k)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; groups];
                for (e, &s) in segments.iter().enumerate() {
                    dot[s] += gd[e] * y[e];
                }
                let gx = segments
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y[e] * (gd[e] - dot[s]))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vec![y.len()], gx)?);
            }
            Op::GatherRows { x, index } => {
                let shape = self.shape(*x).to_vec();
                let rows_out = index.len();
                let cols = gd.len() / rows_out;
                let mut gx = Tensor::zeros(&shape);
                let buf = gx.data_mut();
                for (e, &i) in index.iter().enumerate() {
                    for j in 0..cols {
                        buf[i * cols + j] += gd[e * cols + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows { x, index } => {
                let (rows, cols) = self.matrix(*x)?;
                let mut gx = Vec::with_capacity(rows * cols);
                for &dst in index.iter() {
                    gx.extend_from_slice(&gd[dst * cols..(dst + 1) * cols]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx)?);
            }
            Op::ScaleRows { x, scale } => {
                let (rows, cols) = self.matrix(*x)?;
                let xs = self.value(*x).data();
                let s = self.value(*scale).data();
                let gx = gd.iter().enumerate().map(|(k, g)| g * s[k / cols]).collect();
                let mut gs = vec![0.0; rows];
                for (k, g) in gd.iter().enumerate() {
                    gs[k / cols] += g * xs[k];
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx)?);
                let sshape = self.shape(*scale).to_vec();
                self.accumulate(grads, *scale, Tensor::new(sshape, gs)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis)?;
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    if self.nodes[p.0].tracked {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        let shape = self.shape(*p).to_vec();
                        self.accumulate(grads, *p, Tensor::new(shape, gp)?);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Conv1d { x, kernel } => {
                let (c_in, len) = self.matrix(*x)?;
                let shape_k = self.shape(*kernel).to_vec();
                let (c_out, k) = (shape_k[0], shape_k[2]);
                let out_len = len - k + 1;
                let xs = self.value(*x).data();
                let ws = self.value(*kernel).data();
                let mut gx = vec![0.0; c_in * len];
                let mut gw = vec![0.0; c_out * c_in * k];
                for o in 0..c_out {
                    let grow = &gd[o * out_len..(o + 1) * out_len];
                    for c in 0..c_in {
                        let base = (o * c_in + c) * k;
                        for dk in 0..k {
                            let w = ws[base + dk];
                            let mut acc = 0.0;
                            for (t, gv) in grow.iter().enumerate() {
                                gx[c * len + t + dk] += gv * w;
                                acc += gv * xs[c * len + t + dk];
                            }
                            gw[base + dk] += acc;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c_in, len], gx)?);
                self.accumulate(grads, *kernel, Tensor::new(shape_k, gw)?);
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let buf = gx.data_mut();
                for (g, &i) in gd.iter().zip(argmax) {
                    buf[i] += g;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0] / n));
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numeric_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let q = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let y = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut expected = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.get2(i, k) * b.get2(k, j);
                }
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let y = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::full(&[1, 4], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 2], 1.0));
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 2.0]);

        let k = tape.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(tape.conv1d(x, k).is_err());
    }

    #[test]
    fn conv1d_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 9], &mut rng);
        let k = random(&[3, 2, 4], &mut rng);
        let out_len = 9 - 4 + 1;
        let mut expected = vec![0.0; 3 * out_len];
        for o in 0..3 {
            for t in 0..out_len {
                for c in 0..2 {
                    for d in 0..4 {
                        expected[o * out_len + t] +=
                            x.data()[c * 9 + t + d] * k.data()[(o * 2 + c) * 4 + d];
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let (vx, vk) = (tape.constant(x), tape.constant(k));
        let y = tape.conv1d(vx, vk).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_examples_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 3.0, 2.0, 2.0]).unwrap());
        let y = tape.maxpool1d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);

        let x = tape.param(Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap());
        let y = tape.maxpool1d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0]);

        let short = tape.constant(Tensor::zeros(&[1, 1]));
        assert!(tape.maxpool1d(short).is_err());
    }

    #[test]
    fn maxpool_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 80], &mut rng);
        let expected: Vec<f64> = x.data().chunks(2).map(|p| p[0].max(p[1])).collect();
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let y = tape.maxpool1d(vx).unwrap();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0, 0.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 0.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);

        let z = tape.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let s = tape.softmax(z, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn concat_along_both_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0], &[6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let d = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(d), &[4, 2]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_mse_self_is_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 3], 0.7));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(p).data().iter().all(|&v| v == 1.0));

        let l = tape.mse(p, p).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_untouched() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2], 1.0));
        let q = tape.param(Tensor::full(&[3], 1.0));
        assert!(matches!(tape.backward(p), Err(crate::Error::Contract(_))));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(q).data(), &[0.0; 3]);
    }

    /// Checks one op against central differences: `loss = Σ op(x) ⊙ w` for a
    /// fixed random `w`, so every output element gets a distinct upstream gradient.
    fn check_op(
        seed: u64,
        shapes: &[Vec<usize>],
        op: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = op(&mut tape, &vars);
            tape.shape(y).to_vec()
        };
        let weights = random(&out_shape, &mut rng);
        let eval = |xs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = op(&mut tape, &vars);
            tape.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = op(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let yw = tape.mul(y, w).unwrap();
        let loss = tape.sum(yw);
        let grads = tape.backward(loss).unwrap();

        for (i, v) in vars.iter().enumerate() {
            let numeric = numeric_gradient(
                |t| {
                    let mut xs = inputs.clone();
                    xs[i] = t.clone();
                    eval(&xs)
                },
                &inputs[i],
                1e-5,
            );
            let analytic = grads.wrt(*v);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let err = relative_error(*a, *n);
                assert!(err < 1e-4, "seed {seed} input {i}: analytic {a} numeric {n} err {err}");
            }
        }
    }

    #[test]
    fn finite_difference_every_op() {
        for seed in 0..10 {
            check_op(seed, &[vec![3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1]).unwrap());
            check_op(seed, &[vec![3, 4]], |t, v| t.transpose(v[0]).unwrap());
            check_op(seed, &[vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1]).unwrap());
            check_op(seed, &[vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1]).unwrap());
            check_op(seed, &[vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1]).unwrap());
            check_op(seed, &[vec![5]], |t, v| t.scale(v[0], -2.5));
            check_op(seed, &[vec![5]], |t, v| t.square(v[0]));
            check_op(seed, &[vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1], 1).unwrap());
            check_op(seed, &[vec![3, 4], vec![3]], |t, v| t.add_bias(v[0], v[1], 0).unwrap());
            check_op(seed, &[vec![4, 6]], |t, v| t.relu(v[0]));
            check_op(seed, &[vec![3, 5]], |t, v| t.softmax(v[0], 1).unwrap());
            check_op(seed, &[vec![3, 5]], |t, v| t.softmax(v[0], 0).unwrap());
            check_op(seed, &[vec![3, 5]], |t, v| t.log_softmax(v[0], 1).unwrap());
            check_op(seed, &[vec![7]], |t, v| {
                t.segment_softmax(v[0], Rc::from(vec![0, 0, 1, 2, 2, 2, 1])).unwrap()
            });
            check_op(seed, &[vec![5, 3]], |t, v| {
                t.gather_rows(v[0], Rc::from(vec![4, 0, 0, 2])).unwrap()
            });
            check_op(seed, &[vec![4, 3]], |t, v| {
                t.scatter_add_rows(v[0], Rc::from(vec![1, 0, 1, 2]), 3).unwrap()
            });
            check_op(seed, &[vec![4, 3], vec![4]], |t, v| t.scale_rows(v[0], v[1]).unwrap());
            check_op(seed, &[vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
            check_op(seed, &[vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
            check_op(seed, &[vec![2, 6]], |t, v| t.reshape(v[0], vec![3, 4]).unwrap());
            check_op(seed, &[vec![3, 12], vec![4, 3, 5]], |t, v| t.conv1d(v[0], v[1]).unwrap());
            check_op(seed, &[vec![3, 11]], |t, v| t.maxpool1d(v[0]).unwrap());
            check_op(seed, &[vec![3, 4]], |t, v| t.sum(v[0]));
            check_op(seed, &[vec![3, 4]], |t, v| t.mean(v[0]));
            check_op(seed, &[vec![3, 4], vec![3, 4]], |t, v| t.mse(v[0], v[1]).unwrap());
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x = random(&[4, 9], &mut rng).map(|v| v * 50.0);
            let mut tape = Tape::new();
            let vx = tape.constant(x);
            let s = tape.softmax(vx, 1).unwrap();
            for row in tape.value(s).to_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.param(random(&[2, 10], &mut rng));
            let k = tape.param(random(&[3, 2, 3], &mut rng));
            let y = tape.conv1d(x, k).unwrap();
            let p = tape.maxpool1d(y).unwrap();
            let l = tape.sum(p);
            let g = tape.backward(l).unwrap();
            (g.wrt(x), g.wrt(k))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.relu(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }
}
