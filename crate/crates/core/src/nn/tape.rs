//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep is a single reverse pass. Only
//! nodes that transitively depend on a parameter receive gradients.
//!
//! Shape errors inside graph construction are programming errors and panic;
//! public model APIs validate user input before building a graph.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sqrt(usize),
    Square(usize),
    Elu(usize),
    Relu(usize),
    Tanh(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumCols(usize),
    SumRows(usize),
    LogSoftmaxRows(usize),
    SliceCols(usize, usize),
    Transpose(usize),
    PairwiseSqDist(usize, usize, usize),
    StrainHardening(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes the gradient out, substituting zeros of the given shape when the
    /// loss does not depend on `v`.
    pub fn take(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf. The name is used in non-finite gradient errors.
    pub fn param(&mut self, name: impl Into<String>, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = &self.nodes[v.0].value;
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar node");
        x[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let needs = self.needs(&[a.0]);
        self.push(value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Div(a.0, b.0), needs)
    }

    /// `a + r` with the 1×m row `r` broadcast over rows of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "add_row shape");
        let value = self.value(a) + self.value(r);
        let needs = self.needs(&[a.0, r.0]);
        self.push(value, Op::AddRow(a.0, r.0), needs)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r), (1, self.shape(a).1), "mul_row shape");
        let value = self.value(a) * self.value(r);
        let needs = self.needs(&[a.0, r.0]);
        self.push(value, Op::MulRow(a.0, r.0), needs)
    }

    /// `a + c` with the n×1 column `c` broadcast over columns of `a`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "add_col shape");
        let value = self.value(a) + self.value(c);
        let needs = self.needs(&[a.0, c.0]);
        self.push(value, Op::AddCol(a.0, c.0), needs)
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "mul_col shape");
        let value = self.value(a) * self.value(c);
        let needs = self.needs(&[a.0, c.0]);
        self.push(value, Op::MulCol(a.0, c.0), needs)
    }

    pub fn div_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.shape(c), (self.shape(a).0, 1), "div_col shape");
        let value = self.value(a) / self.value(c);
        let needs = self.needs(&[a.0, c.0]);
        self.push(value, Op::DivCol(a.0, c.0), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a.0, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a.0), f64::recip)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a.0), elu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.needs(&[a.0]);
        self.push(value, Op::SumAll(a.0), needs)
    }

    /// Row sums: n×m → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(&[a.0]);
        self.push(value, Op::SumCols(a.0), needs)
    }

    /// Column sums: n×m → 1×m.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.needs(&[a.0]);
        self.push(value, Op::SumRows(a.0), needs)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let needs = self.needs(&[a.0]);
        self.push(value, Op::LogSoftmaxRows(a.0), needs)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self
            .value(a)
            .slice(s![.., start..start + width])
            .to_owned();
        let needs = self.needs(&[a.0]);
        self.push(value, Op::SliceCols(a.0, start), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Transpose(a.0), needs)
    }

    /// `out[i, k] = Σ_j (a[i, j] − m[k, j])² · p[k, j]` for `a: n×l`,
    /// `m, p: k×l`.
    pub fn pairwise_sq_dist(&mut self, a: Var, m: Var, p: Var) -> Var {
        let (n, l) = self.shape(a);
        let (k, lm) = self.shape(m);
        assert_eq!(l, lm, "pairwise_sq_dist width");
        assert_eq!(self.shape(p), (k, l), "pairwise_sq_dist weights");
        let (av, mv, pv) = (self.value(a), self.value(m), self.value(p));
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..l {
                    let d = av[[i, j]] - mv[[c, j]];
                    acc += d * d * pv[[c, j]];
                }
                out[[i, c]] = acc;
            }
        }
        let needs = self.needs(&[a.0, m.0, p.0]);
        self.push(out, Op::PairwiseSqDist(a.0, m.0, p.0), needs)
    }

    /// Piecewise-linear hardening curves. `params` is C×3 with columns
    /// (elastic modulus, yield point, plastic modulus); output is C×T.
    pub fn strain_hardening(&mut self, params: Var, t: &[f64]) -> Var {
        let (c, k) = self.shape(params);
        assert_eq!(k, 3, "strain_hardening expects 3 parameters");
        let pv = self.value(params);
        let mut out = Array2::zeros((c, t.len()));
        for r in 0..c {
            let (ee, ty, ep) = (pv[[r, 0]], pv[[r, 1]], pv[[r, 2]]);
            for (n, &tn) in t.iter().enumerate() {
                out[[r, n]] = if tn > ty {
                    ee * ty + ep * (tn - ty)
                } else {
                    ee * tn
                };
            }
        }
        let needs = self.needs(&[params.0]);
        self.push(out, Op::StrainHardening(params.0, t.to_vec()), needs)
    }

    /// Reverse sweep from a 1×1 loss node.
    ///
    /// Fails if any named parameter receives a non-finite gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            // keep interior gradients only where callers may ask for them
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.name, &grads[id]) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, delta: Array2<f64>| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |i: usize| self.nodes[i].needs_grad;

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, g.dot(&val(b).t()));
                }
                if wants(b) {
                    acc(b, val(a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, -g);
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g * val(b));
                }
                if wants(b) {
                    acc(b, g * val(a));
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    acc(a, g / val(b));
                }
                if wants(b) {
                    let mut d = g * y;
                    d /= val(b);
                    acc(b, -d);
                }
            }
            Op::AddRow(a, r) => {
                acc(a, g.clone());
                if wants(r) {
                    acc(r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if wants(a) {
                    acc(a, g * val(r));
                }
                if wants(r) {
                    acc(r, (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(a, c) => {
                acc(a, g.clone());
                if wants(c) {
                    acc(c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulCol(a, c) => {
                if wants(a) {
                    acc(a, g * val(c));
                }
                if wants(c) {
                    acc(c, (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::DivCol(a, c) => {
                if wants(a) {
                    acc(a, g / val(c));
                }
                if wants(c) {
                    let d = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1)) / val(c);
                    acc(c, -d);
                }
            }
            Op::Scale(a, k) => acc(a, g * k),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Exp(a) => acc(a, g * y),
            Op::Log(a) => acc(a, g / val(a)),
            Op::Recip(a) => acc(a, -(g * y * y)),
            Op::Sqrt(a) => acc(a, g * &y.mapv(|v| 0.5 / v)),
            Op::Square(a) => acc(a, g * val(a) * 2.0),
            Op::Elu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(a))
                    .and(y)
                    .for_each(|d, &x, &yv| {
                        if x <= 0.0 {
                            *d *= yv + 1.0;
                        }
                    });
                acc(a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(a, d);
            }
            Op::Tanh(a) => acc(a, g * &y.mapv(|t| 1.0 - t * t)),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                acc(a, d);
            }
            Op::SumAll(a) => acc(a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            Op::SumCols(a) => {
                let d = g
                    .broadcast(val(a).dim())
                    .expect("sum_cols broadcast")
                    .to_owned();
                acc(a, d);
            }
            Op::SumRows(a) => {
                let d = g
                    .broadcast(val(a).dim())
                    .expect("sum_rows broadcast")
                    .to_owned();
                acc(a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let total: f64 = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &ly| *d -= ly.exp() * total);
                }
                acc(a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(a).dim());
                d.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                acc(a, d);
            }
            Op::Transpose(a) => acc(a, g.t().to_owned()),
            Op::PairwiseSqDist(a, m, p) => {
                let (av, mv, pv) = (val(a), val(m), val(p));
                let (n, l) = av.dim();
                let k = mv.nrows();
                let mut ga = Array2::zeros((n, l));
                let mut gm = Array2::zeros((k, l));
                let mut gp = Array2::zeros((k, l));
                for i in 0..n {
                    for c in 0..k {
                        let gic = g[[i, c]];
                        if gic == 0.0 {
                            continue;
                        }
                        for j in 0..l {
                            let d = av[[i, j]] - mv[[c, j]];
                            let w = 2.0 * gic * d * pv[[c, j]];
                            ga[[i, j]] += w;
                            gm[[c, j]] -= w;
                            gp[[c, j]] += gic * d * d;
                        }
                    }
                }
                acc(a, ga);
                acc(m, gm);
                acc(p, gp);
            }
            Op::StrainHardening(pid, ref t) => {
                let pv = val(pid);
                let mut gp = Array2::zeros(pv.dim());
                for r in 0..pv.nrows() {
                    let (ee, ty, ep) = (pv[[r, 0]], pv[[r, 1]], pv[[r, 2]]);
                    for (n, &tn) in t.iter().enumerate() {
                        let gv = g[[r, n]];
                        if tn > ty {
                            gp[[r, 0]] += gv * ty;
                            gp[[r, 1]] += gv * (ee - ep);
                            gp[[r, 2]] += gv * (tn - ty);
                        } else {
                            gp[[r, 0]] += gv * tn;
                        }
                    }
                }
                acc(pid, gp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite-difference check of d(loss)/d(param) for a graph
    /// builder `f` taking the parameter value.
    fn check<F>(x0: Array2<f64>, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param("x", x0.clone());
        let loss = f(&mut tape, x);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let v = t.param("x", xp);
                let out = f(&mut t, v);
                t.scalar(out)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = g.as_slice().unwrap()[idx];
            let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(err < 1e-6, "entry {idx}: ad {ad} fd {fd}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param("x", sample());
        let sq = tape.square(x);
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x, (2, 3)), sample());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", sample());
        let c = tape.constant(array![[4.0]]);
        let mut grads = tape.backward(c).unwrap();
        assert_eq!(grads.take(x, (2, 3)), Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |t, x| {
            let e = t.exp(x);
            let q = t.square(x);
            let a = t.add(e, q);
            let th = t.tanh(a);
            let el = t.elu(x);
            let m = t.mul(th, el);
            let sh = t.add_scalar(q, 1.0);
            let d = t.div(m, sh);
            let r = t.recip(sh);
            let lg = t.log(r);
            let sq = t.sqrt(sh);
            let u = t.sub(d, lg);
            let w = t.mul(u, sq);
            t.sum_all(w)
        });
    }

    #[test]
    fn broadcast_and_reduction_ops() {
        check(sample(), |t, x| {
            let row = t.sum_rows(x);
            let col = t.sum_cols(x);
            let a = t.add_row(x, row);
            let b = t.mul_col(a, col);
            let sq = t.square(col);
            let pos = t.add_scalar(sq, 0.5);
            let c = t.div_col(b, pos);
            let r2 = t.exp(row);
            let d = t.mul_row(c, r2);
            let e = t.add_col(d, col);
            let tr = t.transpose(e);
            let mm = t.matmul(tr, x);
            let ls = t.log_softmax_rows(mm);
            let sl = t.slice_cols(ls, 1, 2);
            t.sum_all(sl)
        });
    }

    #[test]
    fn matmul_both_sides() {
        let w = array![[0.2, -0.3], [0.5, 0.1], [-0.4, 0.9]];
        check(sample(), move |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let yy = t.matmul(y, y);
            let r = t.relu(yy);
            t.sum_all(r)
        });
    }

    #[test]
    fn pairwise_distance_gradients() {
        let m = array![[0.1, 0.2, -0.3], [1.0, -0.5, 0.25]];
        let p = array![[1.5, 0.5, 2.0], [0.7, 1.1, 0.3]];
        let (m2, p2) = (m.clone(), p.clone());
        check(sample(), move |t, x| {
            let mv = t.constant(m2.clone());
            let pv = t.constant(p2.clone());
            let d = t.pairwise_sq_dist(x, mv, pv);
            let s = t.sin_like(d);
            t.sum_all(s)
        });
        let a = sample();
        check(m.clone(), move |t, mv| {
            let av = t.constant(a.clone());
            let pv = t.constant(p.clone());
            let d = t.pairwise_sq_dist(av, mv, pv);
            let s = t.sin_like(d);
            t.sum_all(s)
        });
        let a = sample();
        check(array![[1.5, 0.5, 2.0], [0.7, 1.1, 0.3]], move |t, pv| {
            let av = t.constant(a.clone());
            let mv = t.constant(m.clone());
            let d = t.pairwise_sq_dist(av, mv, pv);
            let s = t.sin_like(d);
            t.sum_all(s)
        });
    }

    impl Tape {
        /// A smooth nonlinearity so the reduction is not linear in `d`.
        fn sin_like(&mut self, d: Var) -> Var {
            let sq = self.square(d);
            self.tanh(sq)
        }
    }

    #[test]
    fn strain_hardening_gradients() {
        let t: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        check(array![[2.0, 0.33, 0.5], [5.0, 0.71, -1.0]], move |tp, p| {
            let c = tp.strain_hardening(p, &t);
            let sq = tp.square(c);
            tp.sum_all(sq)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.param("x", array![[-2.0, 0.5, 3.0]]);
        let c = tape.clamp(x, -1.0, 1.0);
        let s = tape.sum_all(c);
        let mut grads = tape.backward(s).unwrap();
        assert_eq!(grads.take(x, (1, 3)), array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut tape = Tape::new();
        let x = tape.param("encoder.w0", array![[0.0]]);
        let l = tape.log(x);
        let s = tape.sum_all(l);
        match tape.backward(s) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("encoder.w0")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
