use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{gemm, log_softmax_in_place, softmax_in_place};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Append-only record of tensor operations for one forward pass.
///
/// Every node's inputs precede it, so a single reverse sweep over the node
/// list is a valid backward pass. A tape supports exactly one backward call.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    backward_done: Cell<bool>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax(usize),
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
    Dropout {
        x: usize,
        keep: Vec<F>,
    },
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Scalar> Copy for Var<'_, F> {}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Vec<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            backward_done: Cell::new(false),
        }
    }

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the cut must not be used afterwards.
    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Usage(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage(
                "backward on a detached tensor: the loss depends on no parameter".into(),
            ));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    id: usize,
) -> Option<&'a mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); nodes[id].value.numel()]))
}

fn backprop<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), F::one(), da);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), F::one(), db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = da[j * r + i] + g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                if let Some(dx) = acc(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                let n = db.len();
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * bv[i];
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    db[i] = db[i] + g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *s);
            }
        }
        Op::Relu(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                for (i, &y) in out.data().iter().enumerate() {
                    if y > F::zero() {
                        da[i] = da[i] + g[i];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = out.cols();
            let gv = nodes[*gain].value.data();
            if let Some(dg) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] = dg[j] + grow[j] * hrow[j];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                for grow in g.chunks(n) {
                    db.iter_mut().zip(grow).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let nf = F::of(n as f64);
                let mut dxhat = vec![F::zero(); n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &g[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<F>() / nf;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(&d, &h)| d * h).sum::<F>() / nf;
                    let dst = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = dst[j] + rs * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = out.cols();
            if let Some(dt) = acc(nodes, grads, *table) {
                for (i, &row) in ids.iter().enumerate() {
                    let dst = &mut dt[row * d..(row + 1) * d];
                    dst.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(t, &gi)| *t = *t + gi);
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            let p = at(j);
                            dx[p] = dx[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                let n = out.cols();
                for (r, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let total: F = grow.iter().copied().sum();
                    for j in 0..n {
                        let p = r * n + j;
                        dx[p] = dx[p] + grow[j] - yrow[j].exp() * total;
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        dx[i] = dx[i] + g[i];
                    }
                }
            }
        }
        Op::ConcatCols(inputs) => {
            let total = out.cols();
            let mut offset = 0;
            for &inp in inputs {
                let w = nodes[inp].value.cols();
                if let Some(di) = acc(nodes, grads, inp) {
                    for (r, drow) in di.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        drow.iter_mut().zip(src).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let w = out.cols();
            let full = nodes[*x].value.cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (r, grow) in g.chunks(w).enumerate() {
                    let dst = &mut dx[r * full + start..r * full + start + w];
                    dst.iter_mut().zip(grow).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => {
            let v = nodes[*logits].value.cols();
            let scale = g[0] / F::of(*count as f64);
            if let Some(dl) = acc(nodes, grads, *logits) {
                let mut kept = 0;
                for (r, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
                    if skip {
                        continue;
                    }
                    let prow = &probs[kept * v..(kept + 1) * v];
                    let dst = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        dst[j] = dst[j] + scale * prow[j];
                    }
                    dst[t] = dst[t] - scale;
                    kept += 1;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                let s = g[0] / F::of(da.len() as f64);
                da.iter_mut().for_each(|d| *d = *d + s);
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * keep[i];
                }
            }
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a 2-D tensor, got shape {shape:?}"
        ))),
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.borrow_value().clone()
    }

    /// Borrows the node value; do not record new ops while holding it.
    pub fn borrow_value(&self) -> Ref<'t, Tensor<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.borrow_value().shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        self.borrow_value().data()[0]
    }

    fn same_tape(&self, other: &Var<'_, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.requires_grad(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'_, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, rhs: Var<'_, F>) -> Result<Var<'t, F>> {
        self.same_tape(&rhs)?;
        let value = {
            let (a, b) = (self.borrow_value(), rhs.borrow_value());
            let (m, k) = matrix_dims(a.shape(), "matmul")?;
            let (k2, n) = matrix_dims(b.shape(), "matmul")?;
            if k != k2 {
                return Err(Error::Dimension(format!(
                    "matmul inner extents differ: {:?} × {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut c = vec![F::zero(); m * n];
            gemm(
                m,
                k,
                n,
                a.data(),
                (k, 1),
                b.data(),
                (n, 1),
                F::zero(),
                &mut c,
            );
            Tensor::new([m, n], c)?
        };
        Ok(self.binary(&rhs, value, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        let value = {
            let a = self.borrow_value();
            let (r, c) = matrix_dims(a.shape(), "transpose")?;
            let d = a.data();
            let mut out = Vec::with_capacity(r * c);
            for j in 0..c {
                for i in 0..r {
                    out.push(d[i * c + j]);
                }
            }
            Tensor::new([c, r], out)?
        };
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    fn zip_same_shape(
        &self,
        rhs: &Var<'_, F>,
        what: &str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        self.same_tape(rhs)?;
        let (a, b) = (self.borrow_value(), rhs.borrow_value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{what} needs equal shapes: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(self, rhs: Var<'_, F>) -> Result<Var<'t, F>> {
        let value = self.zip_same_shape(&rhs, "add", |x, y| x + y)?;
        Ok(self.binary(&rhs, value, Op::Add(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Var<'_, F>) -> Result<Var<'t, F>> {
        let value = self.zip_same_shape(&rhs, "mul", |x, y| x * y)?;
        Ok(self.binary(&rhs, value, Op::Mul(self.id, rhs.id)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'_, F>) -> Result<Var<'t, F>> {
        self.same_tape(&bias)?;
        let value = {
            let (a, b) = (self.borrow_value(), bias.borrow_value());
            let n = a.cols();
            if b.numel() != n {
                return Err(Error::Dimension(format!(
                    "row bias of shape {:?} does not fit rows of {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, &y)| *x = *x + y);
            }
            Tensor::new(a.shape(), data)?
        };
        Ok(self.binary(&bias, value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, s: F) -> Var<'t, F> {
        let value = {
            let a = self.borrow_value();
            Tensor {
                shape: a.shape,
                data: a.data().iter().map(|&x| x * s).collect(),
                grad: None,
            }
        };
        self.unary(value, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Var<'t, F> {
        let value = {
            let a = self.borrow_value();
            Tensor {
                shape: a.shape,
                data: a.data().iter().map(|&x| x.max(F::zero())).collect(),
                grad: None,
            }
        };
        self.unary(value, Op::Relu(self.id))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'_, F>, bias: Var<'_, F>) -> Result<Var<'t, F>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let (value, xhat, rstd) = {
            let (x, gv, bv) = (
                self.borrow_value(),
                gain.borrow_value(),
                bias.borrow_value(),
            );
            let n = x.cols();
            if gv.numel() != n || bv.numel() != n {
                return Err(Error::Dimension(format!(
                    "layer_norm gain {:?} / bias {:?} do not match rows of {:?}",
                    gv.shape(),
                    bv.shape(),
                    x.shape()
                )));
            }
            let ones = vec![F::one(); n];
            let zeros = vec![F::zero(); n];
            let mut out = vec![F::zero(); x.numel()];
            let mut xhat = vec![F::zero(); x.numel()];
            let mut rstd = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(n).enumerate() {
                let rs = super::layer_norm_row(row, &ones, &zeros, &mut xhat[r * n..(r + 1) * n]);
                rstd.push(rs);
                for j in 0..n {
                    out[r * n + j] = xhat[r * n + j] * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, rstd)
        };
        let rg = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.tape.requires_grad(i));
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `V×d` table; the backward pass scatters into it.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let t = self.borrow_value();
            let (v, d) = matrix_dims(t.shape(), "embedding table")?;
            if ids.is_empty() {
                return Err(Error::Dimension("embedding lookup of zero ids".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for (pos, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::Index(format!(
                        "id {id} at position {pos} outside table of {v} rows"
                    )));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::new([ids.len(), d], out)?
        };
        Ok(self.unary(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let value = {
            let x = self.borrow_value();
            if axis >= x.shape().len() {
                return Err(Error::Dimension(format!(
                    "softmax axis {axis} invalid for shape {:?}",
                    x.shape()
                )));
            }
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = x.data().to_vec();
            let mut buf = vec![F::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = out[o * len * inner + j * inner + i];
                    }
                    softmax_in_place(&mut buf);
                    for (j, &b) in buf.iter().enumerate() {
                        out[o * len * inner + j * inner + i] = b;
                    }
                }
            }
            Tensor::new(x.shape(), out)?
        };
        Ok(self.unary(value, Op::Softmax { x: self.id, axis }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t, F> {
        let value = {
            let x = self.borrow_value();
            let mut out = x.clone();
            out.grad = None;
            let n = out.cols();
            out.data_mut().chunks_mut(n).for_each(log_softmax_in_place);
            out
        };
        self.unary(value, Op::LogSoftmax(self.id))
    }

    /// Replaces entries where `mask` is true with `fill` (typically `-inf`
    /// ahead of a softmax).
    pub fn masked_fill(self, mask: &[bool], fill: F) -> Result<Var<'t, F>> {
        let value = {
            let x = self.borrow_value();
            if mask.len() != x.numel() {
                return Err(Error::Dimension(format!(
                    "mask of length {} for shape {:?}",
                    mask.len(),
                    x.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { fill } else { v })
                .collect();
            Tensor {
                shape: x.shape,
                data,
                grad: None,
            }
        };
        Ok(self.unary(
            value,
            Op::MaskedFill {
                x: self.id,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.borrow_value()).collect();
            let rows = vals[0].rows();
            for (p, v) in parts.iter().zip(&vals) {
                first.same_tape(p)?;
                matrix_dims(v.shape(), "concat")?;
                if v.rows() != rows {
                    return Err(Error::Dimension(format!(
                        "concat row mismatch: {:?} vs {:?}",
                        vals[0].shape(),
                        v.shape()
                    )));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    out.extend_from_slice(v.row(r));
                }
            }
            Tensor::new([rows, total], out)?
        };
        let rg = parts.iter().any(|p| tape.requires_grad(p.id));
        Ok(tape.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, F>> {
        let value = {
            let x = self.borrow_value();
            let (r, c) = matrix_dims(x.shape(), "slice_cols")?;
            if start >= end || end > c {
                return Err(Error::Dimension(format!(
                    "column range {start}..{end} invalid for shape {:?}",
                    x.shape()
                )));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&x.row(i)[start..end]);
            }
            Tensor::new([r, end - start], out)?
        };
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self` (`L×V` logits), skipping rows where `ignore` is true.
    pub fn cross_entropy(self, targets: &[usize], ignore: &[bool]) -> Result<Var<'t, F>> {
        let (value, probs, count) = {
            let x = self.borrow_value();
            let (l, v) = matrix_dims(x.shape(), "cross_entropy")?;
            if targets.len() != l || ignore.len() != l {
                return Err(Error::Dimension(format!(
                    "cross_entropy: {l} rows but {} targets / {} mask entries",
                    targets.len(),
                    ignore.len()
                )));
            }
            let mut probs = Vec::new();
            let mut loss = F::zero();
            let mut count = 0usize;
            let mut buf = vec![F::zero(); v];
            for (r, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
                if skip {
                    continue;
                }
                if t >= v {
                    return Err(Error::Index(format!(
                        "target id {t} at row {r} outside vocabulary of {v}"
                    )));
                }
                buf.copy_from_slice(x.row(r));
                log_softmax_in_place(&mut buf);
                loss = loss - buf[t];
                probs.extend(buf.iter().map(|lp| lp.exp()));
                count += 1;
            }
            if count == 0 {
                return Err(Error::Validation(
                    "cross_entropy: every position is masked".into(),
                ));
            }
            (Tensor::scalar(loss / F::of(count as f64)), probs, count)
        };
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(self) -> Var<'t, F> {
        let value = Tensor::scalar(self.borrow_value().data().iter().copied().sum());
        self.unary(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, F> {
        let value = {
            let x = self.borrow_value();
            Tensor::scalar(x.data().iter().copied().sum::<F>() / F::of(x.numel() as f64))
        };
        self.unary(value, Op::Mean(self.id))
    }

    /// Inverted dropout: `keep` holds a 0/1 mask and survivors are scaled by
    /// `1/(1-rate)`.
    pub fn dropout(self, keep_mask: &[bool], rate: F) -> Result<Var<'t, F>> {
        let scale = F::one() / (F::one() - rate);
        let keep: Vec<F> = keep_mask
            .iter()
            .map(|&k| if k { scale } else { F::zero() })
            .collect();
        let value = {
            let x = self.borrow_value();
            if keep.len() != x.numel() {
                return Err(Error::Dimension(format!(
                    "dropout mask of length {} for shape {:?}",
                    keep.len(),
                    x.shape()
                )));
            }
            Tensor {
                shape: x.shape,
                data: x.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect(),
                grad: None,
            }
        };
        Ok(self.unary(value, Op::Dropout { x: self.id, keep }))
    }
}
