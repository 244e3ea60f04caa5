//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records primitive applications in execution order; each
//! primitive returns a [`Var`] handle to its output. [`Tape::backward`]
//! walks the record once in reverse and accumulates analytic gradients into
//! every node that (transitively) depends on a leaf created with
//! `requires_grad`. Tapes are rebuilt for every forward pass.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::targets::{varifocal, varifocal_dp, smooth_l1, smooth_l1_grad, VflConfig};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, rows: Vec<Option<usize>> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GroupReduce { x: Var, group: usize, winners: Option<Vec<usize>> },
    Varifocal { p: Var, q: Vec<T>, weight: Vec<T>, cfg: VflConfig<T> },
    SmoothL1 { pred: Var, target: Vec<T>, row_weight: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `x·w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, i) = xv
            .rows_cols()
            .ok_or_else(|| Error::shape("affine", &xv.shape, &wv.shape))?;
        let (wi, o) = wv
            .rows_cols()
            .ok_or_else(|| Error::shape("affine", &xv.shape, &wv.shape))?;
        if wi != i {
            return Err(Error::shape("affine", &xv.shape, &wv.shape));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape != [o] {
                return Err(Error::shape("affine bias", &wv.shape, &bv.shape));
            }
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(&bv.data);
            }
        }
        let (xd, wd) = (&xv.data, &wv.data);
        for r in 0..n {
            let orow = &mut out[r * o..(r + 1) * o];
            for k in 0..i {
                let a = xd[r * i + k];
                if a == T::zero() {
                    continue;
                }
                let wrow = &wd[k * o..(k + 1) * o];
                for (acc, &wv) in orow.iter_mut().zip(wrow) {
                    *acc += a * wv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![n, o],
                data: out,
            },
            Op::Affine { x, w, b },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::shape(name, &av.shape, &bv.shape));
        }
        Ok(Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * k).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, k), rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(*first).shape.clone();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Row gather from `x: [n, c]`; `None` yields a zero row.
    pub fn gather(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv
            .rows_cols()
            .ok_or_else(|| Error::shape("gather", &xv.shape, &[rows.len()]))?;
        if rows.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        let mut data = vec![T::zero(); rows.len() * c];
        for (dst, idx) in data.chunks_exact_mut(c).zip(&rows) {
            if let Some(r) = *idx {
                if r >= n {
                    return Err(Error::shape("gather index", &xv.shape, &[r]));
                }
                dst.copy_from_slice(&xv.data[r * c..(r + 1) * c]);
            }
        }
        let shape = vec![rows.len(), c];
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, rows }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &xv.shape, shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data.iter().copied().sum();
        let m = s / T::lit(xv.data.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reduces consecutive groups of `group` rows of `x: [n·group, c]` to `[n, c]`.
    pub fn group_reduce(&mut self, x: Var, group: usize, kind: Reduce) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv
            .rows_cols()
            .ok_or_else(|| Error::shape("group_reduce", &xv.shape, &[group]))?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_reduce", &xv.shape, &[group]));
        }
        let n = rows / group;
        let mut data = vec![T::zero(); n * c];
        let mut winners = match kind {
            Reduce::Max => Some(vec![0usize; n * c]),
            Reduce::Sum => None,
        };
        for g in 0..n {
            let out = &mut data[g * c..(g + 1) * c];
            let base = g * group;
            match winners.as_mut() {
                None => {
                    for m in 0..group {
                        let src = &xv.data[(base + m) * c..(base + m + 1) * c];
                        for (acc, &v) in out.iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                Some(win) => {
                    for ch in 0..c {
                        let mut best = base;
                        let mut best_v = xv.data[base * c + ch];
                        for m in 1..group {
                            let v = xv.data[(base + m) * c + ch];
                            if v > best_v {
                                best_v = v;
                                best = base + m;
                            }
                        }
                        out[ch] = best_v;
                        win[g * c + ch] = best;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::GroupReduce { x, group, winners },
            rg,
        ))
    }

    /// `Σ weight_k · VFL(p_k, q_k)` over all elements of `p`.
    pub fn varifocal(&mut self, p: Var, q: Vec<T>, weight: Vec<T>, cfg: VflConfig<T>) -> Result<Var> {
        let pv = self.value(p);
        if q.len() != pv.data.len() || weight.len() != pv.data.len() {
            return Err(Error::shape("varifocal", &pv.shape, &[q.len(), weight.len()]));
        }
        let mut total = T::zero();
        for ((&pk, &qk), &wk) in pv.data.iter().zip(&q).zip(&weight) {
            if wk != T::zero() {
                total += wk * varifocal(pk, qk, &cfg);
            }
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Varifocal { p, q, weight, cfg },
            rg,
        ))
    }

    /// `Σ_r row_weight_r · Σ_k SmoothL1(pred_rk − target_rk)` for `pred: [n, k]`.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<T>, row_weight: Vec<T>) -> Result<Var> {
        let pv = self.value(pred);
        let (n, k) = pv
            .rows_cols()
            .ok_or_else(|| Error::shape("smooth_l1", &pv.shape, &[target.len()]))?;
        if target.len() != n * k || row_weight.len() != n {
            return Err(Error::shape("smooth_l1", &pv.shape, &[target.len(), row_weight.len()]));
        }
        let mut total = T::zero();
        for r in 0..n {
            let w = row_weight[r];
            if w == T::zero() {
                continue;
            }
            let mut row = T::zero();
            for c in 0..k {
                row += smooth_l1(pv.data[r * k + c] - target[r * k + c]);
            }
            total += w * row;
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target,
                row_weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        // Each contribution is formed in its own buffer and then added, so a
        // leaf reached by several branches sums whole per-branch gradients.
        let n = self.nodes[v.0].value.len();
        let mut local = vec![T::zero(); n];
        f(&mut local, &self.nodes[v.0].value);
        match self.grads[v.0].as_mut() {
            Some(g) => g.iter_mut().zip(&local).for_each(|(a, &b)| *a += b),
            None => self.grads[v.0] = Some(local),
        }
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, i) = self.value(*x).rows_cols().unwrap();
                let o = self.value(*w).shape[1];
                if self.rg(*x) {
                    let wd = self.value(*w).data.clone();
                    self.acc(*x, |gx, _| {
                        for r in 0..n {
                            let grow = &g[r * o..(r + 1) * o];
                            for k in 0..i {
                                let wrow = &wd[k * o..(k + 1) * o];
                                let mut s = T::zero();
                                for (a, b) in grow.iter().zip(wrow) {
                                    s += *a * *b;
                                }
                                gx[r * i + k] += s;
                            }
                        }
                    });
                }
                if self.rg(*w) {
                    let xd = self.value(*x).data.clone();
                    self.acc(*w, |gw, _| {
                        for r in 0..n {
                            let grow = &g[r * o..(r + 1) * o];
                            for k in 0..i {
                                let a = xd[r * i + k];
                                if a == T::zero() {
                                    continue;
                                }
                                for (acc, &gv) in gw[k * o..(k + 1) * o].iter_mut().zip(grow) {
                                    *acc += a * gv;
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    self.acc(*b, |gb, _| {
                        for row in g.chunks_exact(o) {
                            for (acc, &gv) in gb.iter_mut().zip(row) {
                                *acc += gv;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let out = &self.nodes[id].value.data;
                let mask: Vec<bool> = out.iter().map(|&v| v > T::zero()).collect();
                self.acc(*x, |gx, _| {
                    for ((acc, &gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        if m {
                            *acc += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[id].value.data.clone();
                self.acc(*x, |gx, _| {
                    for ((acc, &gv), &s) in gx.iter_mut().zip(g).zip(&out) {
                        *acc += gv * s * (T::one() - s);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(v, |gv, _| {
                        for (acc, &x) in gv.iter_mut().zip(g) {
                            *acc += x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data.clone();
                let bd = self.value(*b).data.clone();
                self.acc(*a, |ga, _| {
                    for ((acc, &gv), &y) in ga.iter_mut().zip(g).zip(&bd) {
                        *acc += gv * y;
                    }
                });
                self.acc(*b, |gb, _| {
                    for ((acc, &gv), &y) in gb.iter_mut().zip(g).zip(&ad) {
                        *acc += gv * y;
                    }
                });
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.acc(*x, |gx, _| {
                    for (acc, &gv) in gx.iter_mut().zip(g) {
                        *acc += gv * k;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[id].value.shape.clone();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    self.acc(*v, |gv, _| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (acc, &x) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *acc += x;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { x, rows } => {
                let c = self.shape(*x)[1];
                self.acc(*x, |gx, _| {
                    for (src, idx) in g.chunks_exact(c).zip(rows) {
                        if let Some(r) = *idx {
                            for (acc, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(*x, |gx, _| {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc += v;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let g0 = g[0] / n;
                self.acc(*x, |gx, _| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::GroupReduce { x, group, winners } => {
                let c = self.shape(*x)[1];
                let group = *group;
                self.acc(*x, |gx, _| match winners {
                    None => {
                        for (gi, src) in g.chunks_exact(c).enumerate() {
                            for m in 0..group {
                                let row = gi * group + m;
                                for (acc, &v) in gx[row * c..(row + 1) * c].iter_mut().zip(src) {
                                    *acc += v;
                                }
                            }
                        }
                    }
                    Some(win) => {
                        for (k, &gv) in g.iter().enumerate() {
                            let ch = k % c;
                            gx[win[k] * c + ch] += gv;
                        }
                    }
                });
            }
            Op::Varifocal { p, q, weight, cfg } => {
                let g0 = g[0];
                self.acc(*p, |gp, pv| {
                    for (k, acc) in gp.iter_mut().enumerate() {
                        if weight[k] != T::zero() {
                            *acc += g0 * weight[k] * varifocal_dp(pv.data[k], q[k], cfg);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                row_weight,
            } => {
                let g0 = g[0];
                let k = self.shape(*pred)[1];
                self.acc(*pred, |gp, pv| {
                    for (r, &w) in row_weight.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..k {
                            let i = r * k + c;
                            gp[i] += g0 * w * smooth_l1_grad(pv.data[i] - target[i]);
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Relative-error gradient check of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)` where the
/// numeric gradient is a central difference with step `eps`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several input tensors at once; returns the worst coordinate.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |vals: &[Tensor<T>], track: bool| -> Result<(T, Vec<Option<Tensor<T>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out).item().ok_or_else(|| {
            Error::contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.shape(out)
            ))
        })?;
        if !track {
            return Ok((y, Vec::new()));
        }
        tape.backward(out)?;
        Ok((y, vars.iter().map(|v| tape.grad(*v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let guard = T::lit(1e-12);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (t, an) in analytic.iter().enumerate() {
        for k in 0..inputs[t].len() {
            let orig = inputs[t].data[k];
            probe[t].data[k] = orig + eps;
            let (fp, _) = eval(&probe, false)?;
            probe[t].data[k] = orig - eps;
            let (fm, _) = eval(&probe, false)?;
            probe[t].data[k] = orig;
            let numeric = (fp - fm) / (two * eps);
            let a = an.as_ref().map_or(T::zero(), |g| g.data[k]);
            let err = (a - numeric).abs() / guard.max(a.abs() + numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert_eq!(Tensor::<f64>::zeros(&[2, 2]).len(), 4);
    }

    #[test]
    fn relu_backward_kills_negative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mul_backward_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.param(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.affine(a, b, None) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(tape.add(a, b).is_err());
        assert!(tape.group_reduce(a, 4, Reduce::Sum).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_and_gather_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.shape(r), &[4, 2]);
        let g = tape.gather(b, vec![Some(1), None, Some(0)]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 0.0, 0.0, 3.0, 4.0]);
        assert!(tape.gather(b, vec![Some(2)]).is_err());
    }

    #[test]
    fn quadratic_check_is_exact() {
        // Central differences carry no truncation error on a quadratic, so a
        // wide step keeps roundoff out of the way.
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_checks_to_zero() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, _x| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let res = grad_check(|t, x| Ok(t.relu(x)), &x, 1e-6);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[5, 4]);
            let w = rand_tensor(&mut rng, &[4, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let other = rand_tensor(&mut rng, &[5, 3]);
            let coeff = rand_tensor(&mut rng, &[5, 3]);
            let err = grad_check_many(
                |t, v| {
                    let a = t.affine(v[0], v[1], Some(v[2]))?;
                    let s = t.sigmoid(a);
                    let r = t.relu(a);
                    let m = t.mul(s, v[3])?;
                    let sum = t.add(m, r)?;
                    let k = t.constant(coeff.clone());
                    let weighted = t.mul(sum, k)?;
                    let sc = t.scale(weighted, 0.7);
                    Ok(t.mean(sc))
                },
                &[x.clone(), w.clone(), b.clone(), other.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "affine chain: {err}");

            let err = grad_check_many(
                |t, v| {
                    let c = t.concat(&[v[0], v[1]], 1)?;
                    let g = t.gather(c, vec![Some(4), None, Some(0), Some(4), Some(2), Some(1)])?;
                    let r = t.reshape(g, &[3, 14])?;
                    let r2 = t.reshape(r, &[6, 7])?;
                    let k = t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[6, 7]));
                    let p = t.mul(r2, k)?;
                    Ok(t.sum(p))
                },
                &[x.clone(), other.clone()],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "concat/gather: {err}");

            for kind in [Reduce::Sum, Reduce::Max] {
                let err = grad_check(
                    |t, v| {
                        let r = t.group_reduce(v, 5, kind)?;
                        let k = t.constant(Tensor::new(vec![1, 4], vec![0.3, -1.1, 0.8, 2.0]).unwrap());
                        let p = t.mul(r, k)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-6, "{kind:?}: {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let w = rand_tensor(&mut rng, &[2, 2]);
        let build = |tape: &mut Tape<f64>, which: u8| {
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let a1 = tape.affine(xv, wv, None).unwrap();
            let s = tape.sigmoid(a1);
            let l1 = tape.sum(s);
            let a2 = tape.affine(xv, wv, None).unwrap();
            let r = tape.relu(a2);
            let l2 = tape.mean(r);
            let out = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(out).unwrap();
            tape.grad(wv).unwrap().into_data()
        };
        let g1 = build(&mut Tape::new(), 0);
        let g2 = build(&mut Tape::new(), 1);
        let g12 = build(&mut Tape::new(), 2);
        for k in 0..g12.len() {
            assert_eq!(g12[k], g1[k] + g2[k]);
        }
    }
}
