use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Gradients keyed by parameter, each with the shape of its parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Concat(Vec<Var>),
    MeanRows(Var),
    L2Normalize { x: Var, norm: f64 },
    Dot(Var, Var),
    Exp(Var),
    Log(Var),
    ClipGate(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    SumAll(Var),
    Sum(Vec<Var>),
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf without a parameter id. Its adjoint is still available
    /// through [`Adjoints::wrt`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None))
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Leaf(Some(id)))
    }

    /// `x·W + b` with `x` of shape `[n, in]` or `[in]`, `W` of shape
    /// `[in, out]` and `b` of shape `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert!(xv.rank() == 1 || xv.rank() == 2, "affine input rank");
        assert_eq!(wv.rank(), 2, "affine weight rank");
        let (n, din) = (xv.rows(), xv.cols());
        let (win, dout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(din, win, "affine inner dimension");
        assert_eq!(bv.shape(), &[dout], "affine bias shape");
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let orow = &mut out[r * dout..(r + 1) * dout];
            orow.copy_from_slice(bd);
            let xrow = &xd[r * din..(r + 1) * din];
            for (k, &xk) in xrow.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wrow = &wd[k * dout..(k + 1) * dout];
                for (o, &wkj) in orow.iter_mut().zip(wrow) {
                    *o += xk * wkj;
                }
            }
        }
        let shape = if xv.rank() == 1 {
            vec![dout]
        } else {
            vec![n, dout]
        };
        let value = Tensor::new(shape, out).expect("affine output shape");
        self.push(value, Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    /// Concatenation along the last axis. Inputs are either all vectors or
    /// all matrices with the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rank = self.value(parts[0]).rank();
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rank(), rank, "concat rank");
            assert_eq!(v.rows(), rows, "concat rows");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor::new(shape, out).expect("concat shape");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Mean over the rows of a matrix, giving a vector.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 2, "mean_rows expects a matrix");
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::vector(out), Op::MeanRows(x))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 1, "l2_normalize expects a vector");
        let norm = xv.norm();
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateVector {
                norm,
                eps: NORM_EPS,
            });
        }
        let value = xv.map(|v| v / norm);
        Ok(self.push(value, Op::L2Normalize { x, norm }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "dot shapes");
        let s = crate::tensor::dot(av.data(), bv.data());
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        if !value.is_finite() {
            return Err(Error::NonFinite("exp"));
        }
        Ok(self.push(value, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonFinite("log of non-positive value"));
        }
        let value = xv.map(f64::ln);
        Ok(self.push(value, Op::Log(x)))
    }

    /// `[t]_{1+}`: passes `t` where `t > 1`, zero elsewhere.
    pub fn clip_gate(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|t| if t > 1.0 { t } else { 0.0 });
        self.push(value, Op::ClipGate(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Offset(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    /// Element-wise sum of same-shaped nodes, accumulated in slice order.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            assert_eq!(v.shape(), acc.shape(), "sum shapes");
            acc.add_assign(v);
        }
        self.push(acc, Op::Sum(xs.to_vec()))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x).data()[i];
        self.push(Tensor::scalar(v), Op::Index(x, i))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("elementwise shape")
    }

    /// Distance of the closest recorded input to a point where the tape is
    /// not differentiable: a relu argument at 0 or a gate argument at 1.
    /// Infinite when the tape has no such operation.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (x, kink) = match node.op {
                Op::Relu(x) => (x, 0.0),
                Op::ClipGate(x) => (x, 1.0),
                _ => continue,
            };
            for &v in self.value(x).data() {
                margin = margin.min((v - kink).abs());
            }
        }
        margin
    }

    /// Reverse sweep from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Adjoints<'_>> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        self.backward_with(output, Tensor::full(out.shape(), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient shaped like
    /// `output`. Used to chain a loss computed on a separate tape back into
    /// per-sample encoder tapes.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Adjoints<'_>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj, tape: self })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.shape()[1];
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut gx = vec![0.0; n * din];
                let mut gw = vec![0.0; din * dout];
                let mut gb = vec![0.0; dout];
                for r in 0..n {
                    let grow = &gd[r * dout..(r + 1) * dout];
                    let xrow = &xd[r * din..(r + 1) * din];
                    for (bj, gj) in gb.iter_mut().zip(grow) {
                        *bj += gj;
                    }
                    for k in 0..din {
                        let wrow = &wd[k * dout..(k + 1) * dout];
                        let mut acc = 0.0;
                        for (wkj, gj) in wrow.iter().zip(grow) {
                            acc += wkj * gj;
                        }
                        gx[r * din + k] = acc;
                        let xk = xrow[k];
                        if xk != 0.0 {
                            let gwrow = &mut gw[k * dout..(k + 1) * dout];
                            for (gwkj, gj) in gwrow.iter_mut().zip(grow) {
                                *gwkj += xk * gj;
                            }
                        }
                    }
                }
                let gx = Tensor::new(xv.shape().to_vec(), gx).expect("gx");
                let gw = Tensor::new(wv.shape().to_vec(), gw).expect("gw");
                accumulate(adj, *x, gx);
                accumulate(adj, *w, gw);
                accumulate(adj, *b, Tensor::vector(gb));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(
                    adj,
                    *x,
                    Tensor::new(xv.shape().to_vec(), data).expect("relu"),
                );
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + start..r * total + start + c]);
                    }
                    accumulate(
                        adj,
                        p,
                        Tensor::new(pv.shape().to_vec(), data).expect("concat"),
                    );
                    start += c;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows();
                let inv = 1.0 / n as f64;
                let mut data = Vec::with_capacity(xv.len());
                for _ in 0..n {
                    data.extend(g.data().iter().map(|v| v * inv));
                }
                accumulate(
                    adj,
                    *x,
                    Tensor::new(xv.shape().to_vec(), data).expect("mean"),
                );
            }
            Op::L2Normalize { x, norm } => {
                // d(v/|v|) = (I - y yᵀ)/|v|
                let y = &node.value;
                let yg = crate::tensor::dot(y.data(), g.data());
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| (gi - yi * yg) / norm)
                    .collect();
                accumulate(adj, *x, Tensor::new(y.shape().to_vec(), data).expect("l2"));
            }
            Op::Dot(a, b) => {
                let s = g.item();
                let ga = self.value(*b).map(|v| v * s);
                let gb = self.value(*a).map(|v| v * s);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Exp(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gv)| y * gv)
                    .collect();
                accumulate(
                    adj,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), data).expect("exp"),
                );
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| gv / v)
                    .collect();
                accumulate(
                    adj,
                    *x,
                    Tensor::new(xv.shape().to_vec(), data).expect("log"),
                );
            }
            Op::ClipGate(x) => {
                // Subgradient 0 at the threshold itself.
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&t, &gv)| if t > 1.0 { gv } else { 0.0 })
                    .collect();
                accumulate(
                    adj,
                    *x,
                    Tensor::new(xv.shape().to_vec(), data).expect("gate"),
                );
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("mul");
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("mul");
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Scale(x, f) => accumulate(adj, *x, g.map(|v| v * f)),
            Op::Offset(x) => accumulate(adj, *x, g.clone()),
            Op::SumAll(x) => {
                let s = g.item();
                accumulate(adj, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Sum(xs) => {
                for &x in xs {
                    accumulate(adj, x, g.clone());
                }
            }
            Op::Index(x, k) => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                t.data_mut()[*k] = g.item();
                accumulate(adj, *x, t);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep: the adjoint of every node reachable from the
/// output.
pub struct Adjoints<'t> {
    adj: Vec<Option<Tensor>>,
    tape: &'t Tape,
}

impl Adjoints<'_> {
    /// Gradient with respect to `v`; zeros if `v` does not influence the
    /// output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.adj.get(v.0).and_then(|a| a.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.tape.value(v).shape()),
        }
    }

    /// Gradients of every parameter leaf recorded on the tape. Parameters
    /// that do not reach the output get a zero gradient.
    pub fn params(&self) -> GradientSet {
        let mut set = GradientSet::new();
        for (i, node) in self.tape.nodes.iter().enumerate() {
            if let Op::Leaf(Some(id)) = node.op {
                let g = self.wrt(Var(i));
                match set.grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        set.grads.insert(id, g);
                    }
                }
            }
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;

    #[test]
    fn dot_with_self_gives_twice_x() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let y = t.dot(x, x);
        let g = t.backward(y).unwrap().wrt(x);
        assert_eq!(g.data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_sum_gates_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum_all(r);
        let g = t.backward(s).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let r = t.relu(x);
        assert!(matches!(t.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_gate_boundary_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 1.5, 0.5]));
        let c = t.clip_gate(x);
        let s = t.sum_all(c);
        assert_eq!(t.scalar(s), 1.5);
        let g = t.backward(s).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let c = [0.3, -0.7];
        let f = |x: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let u = t.l2_normalize(v)?;
            let k = t.constant(Tensor::vector(c.to_vec()));
            let d = t.dot(u, k);
            Ok(t.scalar(d))
        };
        let x = Tensor::vector(vec![1.0, 1.0]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let u = t.l2_normalize(v).unwrap();
        let k = t.constant(Tensor::vector(c.to_vec()));
        let d = t.dot(u, k);
        let analytic = t.backward(d).unwrap().wrt(v);
        let numeric = finite_diff_grad(f, &x, 1e-5).unwrap();
        assert!(crate::autodiff::max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn repeated_param_leaves_accumulate() {
        let mut t = Tape::new();
        let a = t.param(ParamId(0), Tensor::vector(vec![2.0]));
        let b = t.param(ParamId(0), Tensor::vector(vec![2.0]));
        let p = t.mul(a, b);
        let s = t.sum_all(p);
        let set = t.backward(s).unwrap().params();
        assert_eq!(set.get(ParamId(0)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn affine_on_vector_keeps_rank() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = t.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap());
        let b = t.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let y = t.affine(x, w, b);
        assert_eq!(t.value(y).shape(), &[3]);
        assert_eq!(t.value(y).data(), &[1.5, 2.5, 0.5]);
    }

    #[test]
    fn kink_margin_sees_relu_and_gate() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3, -0.05, 2.0]));
        assert_eq!(t.kink_margin(), f64::INFINITY);
        t.relu(x);
        assert!((t.kink_margin() - 0.05).abs() < 1e-15);
        let g = t.constant(Tensor::vector(vec![1.01]));
        t.clip_gate(g);
        assert!((t.kink_margin() - 0.01).abs() < 1e-12);
    }
}
