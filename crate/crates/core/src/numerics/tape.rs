//! Wengert-list reverse-mode differentiation over the handful of primitives
//! the multi-task network is built from.
//!
//! Values recorded on the tape borrow parameters and inputs where possible;
//! only intermediate results are owned. `backward` walks the list once in
//! reverse and returns adjoints for every node that requires a gradient.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{dot, log_sum_exp, softmax_in_place, sparse_support, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Input,
    Param,
    Affine {
        w: usize,
        x: usize,
        b: Option<usize>,
        support: Option<Vec<usize>>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax(usize),
    Mean(Vec<usize>),
    Stack(Vec<usize>),
    Dot(usize, usize),
    Mse { pred: usize, target: Vec<f64> },
    CrossEntropy { logits: usize, class: usize },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications for one forward pass.
pub struct GradTape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Parameters that did not
    /// influence the loss get an all-zero gradient of their own shape.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.adjoints.get(var.index)?.as_deref()
    }
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {var:?} is not recorded on tape {}", self.id)));
        }
        Ok(var.index)
    }

    fn is_vector(&self, k: usize) -> bool {
        self.nodes[k].cols == 1
    }

    fn dim(&self, k: usize) -> usize {
        self.nodes[k].value.len()
    }

    fn expect_same_dim(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if !self.is_vector(a) || !self.is_vector(b) || self.dim(a) != self.dim(b) {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.nodes[a].rows, self.nodes[a].cols),
                format!("{}x{}", self.nodes[b].rows, self.nodes[b].cols),
            ));
        }
        Ok(())
    }

    /// A constant vector (no gradient).
    pub fn input(&mut self, x: &'a [f64]) -> Var {
        self.push(Cow::Borrowed(x), x.len(), 1, false, Op::Input)
    }

    /// An owned constant vector (no gradient).
    pub fn input_owned(&mut self, x: Vec<f64>) -> Var {
        let n = x.len();
        self.push(Cow::Owned(x), n, 1, false, Op::Input)
    }

    pub fn param_matrix(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m.as_slice()), m.rows(), m.cols(), true, Op::Param)
    }

    pub fn param_vector(&mut self, v: &'a [f64]) -> Var {
        self.push(Cow::Borrowed(v), v.len(), 1, true, Op::Param)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.index].value
    }

    /// `w·x + b`; `b` may be omitted.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (w, x) = (self.idx(w)?, self.idx(x)?);
        let b = b.map(|b| self.idx(b)).transpose()?;
        let (rows, cols) = (self.nodes[w].rows, self.nodes[w].cols);
        if !self.is_vector(x) || self.dim(x) != cols {
            return Err(Error::shape("affine", format!("W {rows}x{cols}"), format!("x dim {}", self.dim(x))));
        }
        if let Some(b) = b {
            if !self.is_vector(b) || self.dim(b) != rows {
                return Err(Error::shape("affine", format!("W {rows}x{cols}"), format!("b dim {}", self.dim(b))));
            }
        }
        let support = sparse_support(&self.nodes[x].value);
        let mut out = vec![0.0; rows];
        {
            let wm = MatrixView {
                rows,
                cols,
                data: &self.nodes[w].value,
            };
            let bias = b.map(|b| &*self.nodes[b].value);
            wm.affine_into(&self.nodes[x].value, bias, support.as_deref(), &mut out);
        }
        let requires = self.nodes[w].requires_grad
            || self.nodes[x].requires_grad
            || b.is_some_and(|b| self.nodes[b].requires_grad);
        Ok(self.push(Cow::Owned(out), rows, 1, requires, Op::Affine { w, x, b, support }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.expect_same_dim("add", a, b)?;
        let out: Vec<f64> = self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(x, y)| x + y).collect();
        let requires = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Add(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.expect_same_dim("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a].value.iter().zip(self.nodes[b].value.iter()).map(|(x, y)| x * y).collect();
        let requires = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x * factor).collect();
        let (rows, cols) = (self.nodes[a].rows, self.nodes[a].cols);
        let requires = self.nodes[a].requires_grad;
        Ok(self.push(Cow::Owned(out), rows, cols, requires, Op::Scale(a, factor)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let requires = self.nodes[a].requires_grad;
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Relu(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        if self.dim(a) == 0 {
            return Err(Error::Domain("softmax of an empty vector".into()));
        }
        let mut out = self.nodes[a].value.to_vec();
        softmax_in_place(&mut out);
        let requires = self.nodes[a].requires_grad;
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Softmax(a)))
    }

    /// Element-wise mean of equally sized vectors.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var> {
        let ids = vars.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::Domain("mean of zero vectors".into()));
        };
        let n = self.dim(first);
        let mut out = vec![0.0; n];
        for &k in &ids {
            self.expect_same_dim("mean", first, k)?;
            for (o, v) in out.iter_mut().zip(self.nodes[k].value.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let requires = ids.iter().any(|&k| self.nodes[k].requires_grad);
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Mean(ids)))
    }

    /// Concatenates scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let ids = scalars.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(ids.len());
        for &k in &ids {
            if self.dim(k) != 1 {
                return Err(Error::shape("stack", "scalar", format!("dim {}", self.dim(k))));
            }
            out.push(self.nodes[k].value[0]);
        }
        let requires = ids.iter().any(|&k| self.nodes[k].requires_grad);
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, requires, Op::Stack(ids)))
    }

    /// Inner product, producing a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.expect_same_dim("dot", a, b)?;
        let v = dot(&self.nodes[a].value, &self.nodes[b].value);
        let requires = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Cow::Owned(vec![v]), 1, 1, requires, Op::Dot(a, b)))
    }

    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pred = self.idx(pred)?;
        let p = &self.nodes[pred].value;
        let loss = super::mse_loss(p, target)?;
        let requires = self.nodes[pred].requires_grad;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            requires,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let logits = self.idx(logits)?;
        let loss = super::cross_entropy_loss(&self.nodes[logits].value, class)?;
        let requires = self.nodes[logits].requires_grad;
        Ok(self.push(Cow::Owned(vec![loss]), 1, 1, requires, Op::CrossEntropy { logits, class }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.dim(root) != 1 {
            return Err(Error::Tape(format!("backward needs a scalar loss, got dim {}", self.dim(root))));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);

        for k in (0..=root).rev() {
            let Some(g) = adj[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.requires_grad {
                adj[k] = Some(g);
                continue;
            }
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Affine { w, x, b, support } => {
                    let (w, x) = (*w, *x);
                    let (rows, cols) = (self.nodes[w].rows, self.nodes[w].cols);
                    let xv = &self.nodes[x].value;
                    if self.nodes[w].requires_grad {
                        let dw = self.slot(&mut adj, w);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &mut dw[r * cols..(r + 1) * cols];
                            match support {
                                Some(nz) => nz.iter().for_each(|&c| row[c] += gr * xv[c]),
                                None => row.iter_mut().zip(xv.iter()).for_each(|(d, xc)| *d += gr * xc),
                            }
                        }
                    }
                    if self.nodes[x].requires_grad {
                        let wv = &self.nodes[w].value;
                        let dx = self.slot(&mut adj, x);
                        for (r, &gr) in g.iter().enumerate().take(rows) {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            dx.iter_mut().zip(row).for_each(|(d, wrc)| *d += gr * wrc);
                        }
                    }
                    if let Some(b) = *b {
                        if self.nodes[b].requires_grad {
                            accumulate(self.slot(&mut adj, b), &g, 1.0);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &i in &[*a, *b] {
                        if self.nodes[i].requires_grad {
                            accumulate(self.slot(&mut adj, i), &g, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let bv = &self.nodes[b].value;
                        let da = self.slot(&mut adj, a);
                        da.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(d, (gi, bi))| *d += gi * bi);
                    }
                    if self.nodes[b].requires_grad {
                        let av = &self.nodes[a].value;
                        let db = self.slot(&mut adj, b);
                        db.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(d, (gi, ai))| *d += gi * ai);
                    }
                }
                Op::Scale(a, factor) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(self.slot(&mut adj, *a), &g, *factor);
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[*a].requires_grad {
                        let out = &node.value;
                        let da = self.slot(&mut adj, *a);
                        // subgradient 0 at 0
                        da.iter_mut()
                            .zip(g.iter().zip(out.iter()))
                            .for_each(|(d, (gi, yi))| if *yi > 0.0 { *d += gi });
                    }
                }
                Op::Softmax(a) => {
                    if self.nodes[*a].requires_grad {
                        let y = &node.value;
                        let gy = dot(&g, y);
                        let da = self.slot(&mut adj, *a);
                        da.iter_mut()
                            .zip(g.iter().zip(y.iter()))
                            .for_each(|(d, (gi, yi))| *d += yi * (gi - gy));
                    }
                }
                Op::Mean(ids) => {
                    let inv = 1.0 / ids.len() as f64;
                    for &i in ids {
                        if self.nodes[i].requires_grad {
                            accumulate(self.slot(&mut adj, i), &g, inv);
                        }
                    }
                }
                Op::Stack(ids) => {
                    for (pos, &i) in ids.iter().enumerate() {
                        if self.nodes[i].requires_grad {
                            self.slot(&mut adj, i)[0] += g[pos];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let bv = &self.nodes[b].value;
                        accumulate(self.slot(&mut adj, a), bv, g[0]);
                    }
                    if self.nodes[b].requires_grad {
                        let av = &self.nodes[a].value;
                        accumulate(self.slot(&mut adj, b), av, g[0]);
                    }
                }
                Op::Mse { pred, target } => {
                    let p = &self.nodes[*pred].value;
                    let scale = 2.0 * g[0] / p.len() as f64;
                    let dp = self.slot(&mut adj, *pred);
                    dp.iter_mut()
                        .zip(p.iter().zip(target))
                        .for_each(|(d, (pi, ti))| *d += scale * (pi - ti));
                }
                Op::CrossEntropy { logits, class } => {
                    let z = &self.nodes[*logits].value;
                    let lse = log_sum_exp(z);
                    let dz = self.slot(&mut adj, *logits);
                    for (c, (d, zc)) in dz.iter_mut().zip(z.iter()).enumerate() {
                        let p = (zc - lse).exp();
                        *d += g[0] * (p - if c == *class { 1.0 } else { 0.0 });
                    }
                }
            }
            adj[k] = Some(g);
        }

        // Parameters that never received an adjoint still get a zero gradient.
        for (k, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && adj[k].is_none() {
                adj[k] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }

    fn slot<'g>(&self, adj: &'g mut [Option<Vec<f64>>], k: usize) -> &'g mut [f64] {
        let n = self.nodes[k].value.len();
        adj[k].get_or_insert_with(|| vec![0.0; n])
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
}

struct MatrixView<'v> {
    rows: usize,
    cols: usize,
    data: &'v [f64],
}

impl MatrixView<'_> {
    fn affine_into(&self, x: &[f64], b: Option<&[f64]>, support: Option<&[usize]>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = match support {
                Some(nz) => nz.iter().map(|&c| row[c] * x[c]).sum(),
                None => dot(row, x),
            };
            if let Some(b) = b {
                acc += b[r];
            }
            *o = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cross_entropy_loss, mse_loss, softmax};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_derivative() {
        let w = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let one = [1.0];
        let mut tape = GradTape::new();
        let wv = tape.param_matrix(&w);
        let x = tape.input(&one);
        let pred = tape.affine(wv, x, None).unwrap();
        let loss = tape.mse(pred, &[0.0]).unwrap();
        assert_eq!(tape.value(loss), &[9.0]);
        let grads = tape.backward(loss).unwrap();
        assert_abs_diff_eq!(grads.wrt(wv).unwrap()[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let w = Matrix::from_vec(1, 1, vec![-2.0]).unwrap();
        let one = [1.0];
        let mut tape = GradTape::new();
        let wv = tape.param_matrix(&w);
        let x = tape.input(&one);
        let pre = tape.affine(wv, x, None).unwrap();
        let act = tape.relu(pre).unwrap();
        let loss = tape.mse(act, &[5.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(wv).unwrap(), &[0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let b = vec![0.0];
        let mut tape = GradTape::new();
        let bv = tape.param_vector(&b);
        let act = tape.relu(bv).unwrap();
        let loss = tape.mse(act, &[1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(bv).unwrap(), &[0.0]);
    }

    #[test]
    fn detached_variable_is_rejected() {
        let x = [1.0];
        let mut other = GradTape::new();
        let foreign = other.input(&x);
        let loss = other.mse(foreign, &[0.0]).unwrap();
        let tape = GradTape::new();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
        let mut tape = GradTape::new();
        let v = tape.input(&x);
        assert!(matches!(tape.add(v, foreign), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = [1.0, 2.0];
        let mut tape = GradTape::new();
        let v = tape.input(&x);
        assert!(matches!(tape.backward(v), Err(Error::Tape(_))));
    }

    /// Every primitive against central differences of a scalar function
    /// evaluated with the free-function kernels.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
            let w = Matrix::from_vec(3, 4, draw(12)).unwrap();
            let b = draw(3);
            let v = draw(3);
            let x = draw(4);
            let target = draw(3);
            let class = (seed % 3) as usize;

            // loss = mse(softmax(relu(Wx+b)) ⊙ v, t) + CE(Wx+b, c) + 0.5 * (v·v)
            let eval = |w: &Matrix, b: &[f64], v: &[f64]| -> f64 {
                let pre = crate::numerics::affine(w, &x, b).unwrap();
                let act = crate::numerics::relu(&pre);
                let s = softmax(&act);
                let prod: Vec<f64> = s.iter().zip(v).map(|(p, q)| p * q).collect();
                let vv: f64 = v.iter().map(|q| q * q).sum();
                mse_loss(&prod, &target).unwrap() + cross_entropy_loss(&pre, class).unwrap() + 0.5 * vv
            };

            let mut tape = GradTape::new();
            let wv = tape.param_matrix(&w);
            let bv = tape.param_vector(&b);
            let vv = tape.param_vector(&v);
            let xv = tape.input(&x);
            let pre = tape.affine(wv, xv, Some(bv)).unwrap();
            let act = tape.relu(pre).unwrap();
            let s = tape.softmax(act).unwrap();
            let prod = tape.mul(s, vv).unwrap();
            let l1 = tape.mse(prod, &target).unwrap();
            let l2 = tape.cross_entropy(pre, class).unwrap();
            let vdot = tape.dot(vv, vv).unwrap();
            let l3 = tape.scale(vdot, 0.5).unwrap();
            let l12 = tape.add(l1, l2).unwrap();
            let loss = tape.add(l12, l3).unwrap();
            assert_abs_diff_eq!(tape.value(loss)[0], eval(&w, &b, &v), epsilon = 1e-12);
            let grads = tape.backward(loss).unwrap();

            let h = 1e-5;
            let check = |analytic: f64, plus: f64, minus: f64| {
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-9,
                    "seed {seed}: analytic {analytic} numeric {numeric}"
                );
            };
            for k in 0..12 {
                let mut wp = w.clone();
                wp.as_mut_slice()[k] += h;
                let mut wm = w.clone();
                wm.as_mut_slice()[k] -= h;
                check(grads.wrt(wv).unwrap()[k], eval(&wp, &b, &v), eval(&wm, &b, &v));
            }
            for k in 0..3 {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[k] += h;
                bm[k] -= h;
                check(grads.wrt(bv).unwrap()[k], eval(&w, &bp, &v), eval(&w, &bm, &v));
                let (mut vp, mut vm) = (v.clone(), v.clone());
                vp[k] += h;
                vm[k] -= h;
                check(grads.wrt(vv).unwrap()[k], eval(&w, &b, &vp), eval(&w, &b, &vm));
            }
        }
    }

    #[test]
    fn mean_and_stack_route_gradients() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, -1.0];
        let mut tape = GradTape::new();
        let av = tape.param_vector(&a);
        let bv = tape.param_vector(&b);
        let m = tape.mean(&[av, bv]).unwrap();
        assert_eq!(tape.value(m), &[2.0, 0.5]);
        let d0 = tape.dot(m, av).unwrap();
        let d1 = tape.dot(m, bv).unwrap();
        let s = tape.stack(&[d0, d1]).unwrap();
        let loss = tape.mse(s, &[0.0, 0.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Checked against the closed form of f(a, b) = ((m·a)² + (m·b)²) / 2.
        let m0 = [2.0, 0.5];
        let (ma, mb) = (m0[0] * a[0] + m0[1] * a[1], m0[0] * b[0] + m0[1] * b[1]);
        for k in 0..2 {
            let da = ma * (m0[k] + 0.5 * a[k]) + mb * 0.5 * b[k];
            let db = mb * (m0[k] + 0.5 * b[k]) + ma * 0.5 * a[k];
            assert_abs_diff_eq!(grads.wrt(av).unwrap()[k], da, epsilon = 1e-12);
            assert_abs_diff_eq!(grads.wrt(bv).unwrap()[k], db, epsilon = 1e-12);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let a = vec![1.0];
        let unused = vec![4.0, 4.0];
        let mut tape = GradTape::new();
        let av = tape.param_vector(&a);
        let uv = tape.param_vector(&unused);
        let loss = tape.mse(av, &[0.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(uv).unwrap(), &[0.0, 0.0]);
    }
}
