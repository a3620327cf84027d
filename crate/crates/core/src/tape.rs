//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as a list of nodes, each holding its
//! value and the operation that produced it. [`Tape::backward`] walks the list
//! in reverse and accumulates vector-Jacobian products, so every node created
//! before the loss receives a gradient. Parameters are ordinary leaves whose
//! gradients are read back with [`Gradients::get`].

use std::sync::Arc;

use crate::tensor::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Mean aggregation over in-neighbours: `out[v] = mean_{u ∈ sources[v]} x[u]`.
/// Nodes without sources receive a zero row.
#[derive(Clone, Debug)]
pub struct MeanAggregator {
    pub sources: Vec<Vec<usize>>,
}

impl MeanAggregator {
    pub fn num_nodes(&self) -> usize {
        self.sources.len()
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(self.sources.len(), x.cols);
        for (v, srcs) in self.sources.iter().enumerate() {
            if srcs.is_empty() {
                continue;
            }
            let w = 1.0 / srcs.len() as f64;
            let row = out.row_mut(v);
            for &u in srcs {
                for (o, xv) in row.iter_mut().zip(x.row(u)) {
                    *o += w * xv;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &Mat, n_src: usize) -> Mat {
        let mut out = Mat::zeros(n_src, grad.cols);
        for (v, srcs) in self.sources.iter().enumerate() {
            if srcs.is_empty() {
                continue;
            }
            let w = 1.0 / srcs.len() as f64;
            for &u in srcs {
                let g = grad.row(v).to_vec();
                for (o, gv) in out.row_mut(u).iter_mut().zip(g) {
                    *o += w * gv;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    RowSum(Var),
    L2Normalize(Var),
    Dot(Var, Var),
    ConcatCols(Vec<Var>),
    VStack(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Aggregate(Var, Arc<MeanAggregator>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    WeightedNll(Var, Arc<[f64]>, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// Leaf node (parameter or constant).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + 1·bias` where `bias` is a single row broadcast over `a`'s rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, b.cols);
        let bias_row = b.data.clone();
        for r in 0..v.rows {
            for (x, bv) in v.row_mut(r).iter_mut().zip(&bias_row) {
                *x += bv;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            v.add_assign(self.value(x));
        }
        self.push(v, Op::Sum(xs.to_vec()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// n×m → n×1
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        self.push(Mat::column(data), Op::RowSum(a))
    }

    /// Divides by the L2 norm; a zero input maps to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.norm();
        let v = if n > 0.0 { m.map(|x| x / n) } else { m.clone() };
        self.push(v, Op::L2Normalize(a))
    }

    /// Frobenius inner product → 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Mat::scalar(v), Op::Dot(a, b))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let m = self.value(x);
                assert_eq!(m.rows, rows, "concat_cols row mismatch");
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn vstack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let m = self.value(x);
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::VStack(xs.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(idx.len(), m.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn aggregate(&mut self, a: Var, agg: Arc<MeanAggregator>) -> Var {
        let v = agg.apply(self.value(a));
        self.push(v, Op::Aggregate(a, agg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), rows * cols);
        let v = Mat::from_vec(rows, cols, m.data.clone());
        self.push(v, Op::Reshape(a))
    }

    /// Softmax over all entries (used on row or column vectors).
    pub fn softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_vec(m.rows, m.cols, crate::tensor::softmax(&m.data));
        self.push(v, Op::Softmax(a))
    }

    /// `−Σ_i y_i · ln(p_i + eps)` → 1×1.
    pub fn weighted_nll(&mut self, p: Var, y: Arc<[f64]>, eps: f64) -> Var {
        let m = self.value(p);
        assert_eq!(m.len(), y.len());
        let v: f64 = -m
            .data
            .iter()
            .zip(y.iter())
            .filter(|(_, &w)| w != 0.0)
            .map(|(pv, w)| w * (pv + eps).ln())
            .sum::<f64>();
        self.push(Mat::scalar(v), Op::WeightedNll(p, y, eps))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.matmul_nt(bv));
                    acc(&mut grads, *b, av.matmul_tn(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *bias, gb);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        acc(&mut grads, x, g.clone());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let av = self.value(*a);
                    acc(&mut grads, *s, Mat::scalar(g.dot(av)));
                    acc(&mut grads, *a, g.map(|x| x * sv));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let data = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * silu_grad(*xv)).collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let data = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        let gr = g.data[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2Normalize(a) => {
                    let x = self.value(*a);
                    let n = x.norm();
                    if n > 0.0 {
                        // d(x/|x|) = (g − y·⟨y, g⟩) / |x|
                        let y = &node.value;
                        let yg = y.dot(&g);
                        let data = g.data.iter().zip(&y.data).map(|(gv, yv)| (gv - yv * yg) / n).collect();
                        acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                    } else {
                        acc(&mut grads, *a, Mat::zeros(x.rows, x.cols));
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g.data[0];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, bv.map(|x| x * gs));
                    acc(&mut grads, *b, av.map(|x| x * gs));
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let m = self.value(x);
                        let mut gx = Mat::zeros(m.rows, m.cols);
                        for r in 0..m.rows {
                            gx.row_mut(r).copy_from_slice(&g.row(r)[off..off + m.cols]);
                        }
                        off += m.cols;
                        acc(&mut grads, x, gx);
                    }
                }
                Op::VStack(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let m = self.value(x);
                        let n = m.len();
                        acc(&mut grads, x, Mat::from_vec(m.rows, m.cols, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Aggregate(a, agg) => {
                    let n_src = self.value(*a).rows;
                    acc(&mut grads, *a, agg.apply_transpose(&g, n_src));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Mat::from_vec(av.rows, av.cols, g.data.clone()));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let yg = y.dot(&g);
                    let data = g.data.iter().zip(&y.data).map(|(gv, yv)| yv * (gv - yg)).collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::WeightedNll(p, y, eps) => {
                    let gs = g.data[0];
                    let pv = self.value(*p);
                    let data = pv
                        .data
                        .iter()
                        .zip(y.iter())
                        .map(|(pi, yi)| if *yi == 0.0 { 0.0 } else { -gs * yi / (pi + eps) })
                        .collect();
                    acc(&mut grads, *p, Mat::from_vec(pv.rows, pv.cols, data));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on a single leaf, for op-level checks.
    fn numeric_grad(build: &dyn Fn(&mut Tape, Var) -> Var, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let mut t = Tape::new();
            let v = t.leaf(xp);
            let fp = build(&mut t, v);
            let fp = t.scalar(fp);
            let mut t = Tape::new();
            let v = t.leaf(xm);
            let fm = build(&mut t, v);
            let fm = t.scalar(fm);
            out.data[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: Mat) {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out);
        let analytic = g.get(v).cloned().unwrap_or_else(|| Mat::zeros(x.rows, x.cols));
        let numeric = numeric_grad(build, &x);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let w = sample(3, 2, 9);
        check(
            &move |t, x| {
                let wv = t.leaf(w.clone());
                let m = t.matmul(x, wv);
                let a = t.tanh(m);
                let b = t.silu(a);
                let s = t.row_sum(b);
                let n = t.l2_normalize(s);
                let e = t.exp(n);
                let d = t.dot(e, n);
                t.scale(d, 0.7)
            },
            sample(4, 3, 1),
        );
    }

    #[test]
    fn structural_ops() {
        let agg = Arc::new(MeanAggregator {
            sources: vec![vec![], vec![0], vec![0, 1], vec![2, 2, 1]],
        });
        check(
            &move |t, x| {
                let a = t.aggregate(x, agg.clone());
                let g = t.gather_rows(a, Arc::from(vec![3usize, 1, 3]));
                let c = t.concat_cols(&[g, g]);
                let v = t.vstack(&[c, c]);
                let r = t.reshape(v, 4, 6);
                let tr = t.transpose(r);
                let rs = t.row_sum(tr);
                let sm = t.softmax(rs);
                t.weighted_nll(sm, Arc::from(vec![0.25, 0.0, 0.5, 0.0, 0.25, 0.0]), 1e-9)
            },
            sample(4, 2, 3),
        );
    }

    #[test]
    fn scale_by_scalar_node() {
        check(
            &|t, x| {
                let s = t.dot(x, x);
                let e = t.scale(s, -0.5);
                let alpha = t.exp(e);
                let y = t.scale_by(x, alpha);
                let bias = t.leaf(Mat::row_vector(vec![0.3, -0.2]));
                let z = t.add_row(y, bias);
                let z2 = t.add(z, y);
                let z3 = t.sum(&[z2, z, y]);
                let q = t.tanh(z3);
                let q = t.row_sum(q);
                t.dot(q, q)
            },
            sample(3, 2, 5),
        );
    }

    #[test]
    fn zero_vector_normalization_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(3, 1));
        let n = t.l2_normalize(x);
        assert_eq!(t.value(n).data, vec![0.0; 3]);
        let s = t.dot(n, n);
        let g = t.backward(s);
        assert!(g.get(x).unwrap().data.iter().all(|v| *v == 0.0));
    }
}
