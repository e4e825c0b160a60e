//! Reverse-mode differentiation over an append-only record of primitives.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes once in reverse and accumulates adjoints into the
//! inputs of each visited node.

use super::kernels::{
    gelu_grad_scalar, gelu_scalar, gemm, log_softmax_row, row_stats, softmax_row,
};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a tensor recorded in a [`ComputationRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Argument order of the distillation KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`: the teacher distribution is the target.
    #[default]
    TeacherTarget,
    /// `KL(student ‖ teacher)`.
    StudentTarget,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Softmax { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T, stats: Vec<(T, T)> },
    ConcatLast { parts: Vec<Var> },
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, index: usize },
    Sum { x: Var },
    /// Loss node; `dlogits` is the gradient of the loss w.r.t. its input.
    Loss { logits: Var, dlogits: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of the primitives applied during a forward pass.
pub struct ComputationRecord<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for ComputationRecord<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`ComputationRecord::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros-on-demand behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Number of recorded primitives whose adjoint rule was replayed.
    pub fn adjoint_visits(&self) -> usize {
        self.visits
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> ComputationRecord<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of recorded primitives (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// `a[..., m, k] · b[k, n]` with `b` shared across leading indices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = super::kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` for `b[B, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batches, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            gemm(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                (m, k, n),
                false,
                trans_b,
            );
        }
        let value = Tensor::from_parts(vec![batches, m, n], out);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s (bias add, positional add).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sx, sb));
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let w = bv.numel();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(w) {
            for (o, &v) in chunk.iter_mut().zip(bv.data()) {
                *o = *o + v;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::AddBroadcast { x, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale { x, c })
    }

    /// Stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut out = vec![T::zero(); xv.numel()];
        for (xr, or) in xv.data().chunks(w).zip(out.chunks_mut(w)) {
            softmax_row(xr, or);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().ok_or_else(|| shape_err("layer_norm", xv.shape(), gv.shape()))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = vec![T::zero(); xv.numel()];
        let mut stats = Vec::with_capacity(xv.numel() / d);
        for (xr, or) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mean, std) = row_stats(xr);
            let denom = std + eps;
            for j in 0..d {
                or[j] = (xr[j] - mean) / denom * gv.data()[j] + bv.data()[j];
            }
            stats.push((mean, std));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps, stats }))
    }

    /// Concatenation along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?);
        let lead = first[..first.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last", &lead, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::ConcatLast { parts: parts.to_vec() }))
    }

    /// Prepends `token[D]` to every sequence of `x[B, P, D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(token).to_vec());
        if sx.len() != 3 || st != [sx[2]] {
            return Err(shape_err("prepend_token", &sx, &st));
        }
        let (b, p, d) = (sx[0], sx[1], sx[2]);
        let (xd, td) = (self.value(x).data(), self.value(token).data());
        let mut out = Vec::with_capacity(b * (p + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[bi * p * d..(bi + 1) * p * d]);
        }
        let value = Tensor::from_parts(vec![b, p + 1, d], out);
        Ok(self.push(value, Op::PrependToken { x, token }))
    }

    /// Row `index` of every sequence in `x[B, N, D]`, giving `[B, D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(Error::Contract(format!("select_token {index} from {sx:?}")));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let at = (bi * n + index) * d;
            out.extend_from_slice(&xd[at..at + d]);
        }
        let value = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(value, Op::SelectToken { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, dlogits) = cross_entropy_batch(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(value), Op::Loss { logits, dlogits }))
    }

    /// Batch-mean `τ²·KL` between temperature-softened distributions.
    pub fn soft_distill(
        &mut self,
        student: Var,
        teacher_logits: &Tensor<T>,
        tau: T,
        direction: KlDirection,
    ) -> Result<Var> {
        let (value, dlogits) =
            soft_distill_batch(self.value(student), teacher_logits, tau, direction)?;
        Ok(self.push(Tensor::scalar(value), Op::Loss { logits: student, dlogits }))
    }

    /// Replays adjoints from a scalar `loss` back to every recorded tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut visits = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            visits += 1;
            let Some(g) = grads[idx].take() else { continue };
            self.adjoint(&node.op, &node.value, g, &mut grads)?;
        }
        visits += self.nodes[loss.0 + 1..]
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visits,
        })
    }

    fn adjoint(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k;
                let mut da = vec![T::zero(); rows * k];
                gemm(g.data(), bv.data(), &mut da, (rows, n, k), false, true);
                let mut db = vec![T::zero(); k * n];
                gemm(av.data(), g.data(), &mut db, (k, rows, n), true, false);
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batches, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                for bi in 0..batches {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let das = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // out = a · bᵀ, b is n×k
                        gemm(gs, bsl, das, (m, n, k), false, false);
                        gemm(gs, asl, dbs, (n, m, k), true, false);
                    } else {
                        gemm(gs, bsl, das, (m, n, k), false, true);
                        gemm(asl, gs, dbs, (k, m, n), true, false);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::AddBroadcast { x, b } => {
                let bshape = self.value(*b).shape().to_vec();
                let w: usize = bshape.iter().product();
                let mut db = vec![T::zero(); w];
                for chunk in g.data().chunks(w) {
                    for (d, &v) in db.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *b, Tensor::from_parts(bshape, db));
                accumulate(grads, *x, g);
            }
            Op::Mul { a, b } => {
                let da = g.zip_map(self.value(*b), "mul'", |u, v| u * v)?;
                let db = g.zip_map(self.value(*a), "mul'", |u, v| u * v)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale { x, c } => accumulate(grads, *x, g.scale(*c)),
            Op::Softmax { x } => {
                let w = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); out.numel()];
                for ((yr, gr), dr) in out.data().chunks(w).zip(g.data().chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &gv)| s + y * gv);
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Gelu { x } => {
                let dx = g.zip_map(self.value(*x), "gelu'", |u, v| u * gelu_grad_scalar(v))?;
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps, stats } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let d = gv.numel();
                let dn = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut ghat = vec![T::zero(); d];
                for (r, &(mean, std)) in stats.iter().enumerate() {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let s = std + *eps;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) / s;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                        ghat[j] = gr[j] * gv.data()[j];
                    }
                    let gmean = ghat.iter().copied().sum::<T>() / dn;
                    // δ is not differentiable at zero spread; its term vanishes there
                    let proj = if std > T::zero() {
                        ghat.iter()
                            .zip(xr)
                            .fold(T::zero(), |a, (&gh, &xj)| a + gh * (xj - mean))
                            / (dn * std * s * s)
                    } else {
                        T::zero()
                    };
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] = (ghat[j] - gmean) / s - (xr[j] - mean) * proj;
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![d], dgamma));
                accumulate(grads, *beta, Tensor::from_parts(vec![d], dbeta));
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), dp));
                }
            }
            Op::PrependToken { x, token } => {
                let s = out.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let mut dtok = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(b * (n - 1) * d);
                for bi in 0..b {
                    let seq = &g.data()[bi * n * d..(bi + 1) * n * d];
                    for (t, &v) in dtok.iter_mut().zip(&seq[..d]) {
                        *t = *t + v;
                    }
                    dx.extend_from_slice(&seq[d..]);
                }
                accumulate(grads, *token, Tensor::from_parts(vec![d], dtok));
                accumulate(grads, *x, Tensor::from_parts(vec![b, n - 1, d], dx));
            }
            Op::SelectToken { x, index } => {
                let s = self.shape(*x).to_vec();
                let (b, n, d) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    let at = (bi * n + index) * d;
                    dx[at..at + d].copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                accumulate(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Sum { x } => {
                let gs = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x), gs));
            }
            Op::Loss { logits, dlogits } => {
                let gs = g.data()[0];
                let d = dlogits.iter().map(|&v| v * gs).collect();
                accumulate(grads, *logits, Tensor::from_parts(self.shape(*logits).to_vec(), d));
            }
        }
        Ok(())
    }
}

fn batch_dims<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.shape() {
        [c] => Ok((1, *c)),
        [b, c] => Ok((*b, *c)),
        s => Err(Error::Contract(format!("logits must be [C] or [B, C], got {s:?}"))),
    }
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy_batch<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let (b, c) = batch_dims(logits)?;
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for batch of {b}", labels.len())));
    }
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * c];
    let mut ls = vec![T::zero(); c];
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
        }
        log_softmax_row(&logits.data()[r * c..(r + 1) * c], &mut ls);
        total = total - ls[y];
        for j in 0..c {
            let p = ls[j].exp();
            let onehot = if j == y { T::one() } else { T::zero() };
            grad[r * c + j] = (p - onehot) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Batch-mean `τ²·KL` and its gradient w.r.t. the student logits.
pub(crate) fn soft_distill_batch<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    tau: T,
    direction: KlDirection,
) -> Result<(T, Vec<T>)> {
    if !(tau > T::zero()) {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau:?}")));
    }
    if student.shape() != teacher.shape() {
        return Err(shape_err("soft_distill", student.shape(), teacher.shape()));
    }
    let (b, c) = batch_dims(student)?;
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * c];
    let (mut zs, mut zt) = (vec![T::zero(); c], vec![T::zero(); c]);
    let (mut ls, mut lt) = (vec![T::zero(); c], vec![T::zero(); c]);
    for r in 0..b {
        for j in 0..c {
            zs[j] = student.data()[r * c + j] / tau;
            zt[j] = teacher.data()[r * c + j] / tau;
        }
        log_softmax_row(&zs, &mut ls);
        log_softmax_row(&zt, &mut lt);
        let row = &mut grad[r * c..(r + 1) * c];
        let kl = match direction {
            KlDirection::TeacherTarget => {
                let mut kl = T::zero();
                for j in 0..c {
                    let pt = lt[j].exp();
                    kl = kl + pt * (lt[j] - ls[j]);
                    row[j] = tau * (ls[j].exp() - pt) * inv_b;
                }
                kl
            }
            KlDirection::StudentTarget => {
                let kl = (0..c).fold(T::zero(), |k, j| k + ls[j].exp() * (ls[j] - lt[j]));
                for j in 0..c {
                    row[j] = tau * ls[j].exp() * ((ls[j] - lt[j]) - kl) * inv_b;
                }
                kl
            }
        };
        total = total + kl;
    }
    Ok((tau * tau * total * inv_b, grad))
}
