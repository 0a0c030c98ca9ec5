//! Reverse-mode autodiff over [`Matrix`] values.
//!
//! A `Tape` records the forward computation as a flat list of nodes and
//! replays it backwards to accumulate gradients. The op set is exactly what
//! the two models and their losses need; every backward rule is checked
//! against central finite differences in the gradient-check harness.

use super::matrix::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (r x k) * b (k x c)
    MatMul(Var, Var),
    /// a (r x k) * bᵀ with b stored as (c x k)
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// softmax over each row of a / scale
    SoftmaxRows(Var, f64),
    /// layer norm over all entries (used on column vectors), population variance
    LayerNorm(Var, f64),
    /// -log softmax(flat(a))[label], scalar output
    CrossEntropy(Var, usize),
    /// InfoNCE over rows of a against constant anchor rows, scalar output
    InfoNceRows(Var, Matrix, f64),
    /// mean squared difference against a constant, scalar output
    MeanSq(Var, Matrix),
    /// mean absolute difference against a constant, scalar output
    MeanAbs(Var, Matrix),
    /// mean over rows, giving 1 x cols
    MeanRows(Var),
    /// stack 1 x c row vectors into an n x c matrix
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.data.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| matrix::leaky_relu(v, slope));
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Var {
        let value = matrix::softmax_rows(self.value(a), scale);
        self.push(value, Op::SoftmaxRows(a, scale))
    }

    /// Layer norm over every entry of the matrix; intended for vectors.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let normed = matrix::layer_norm(&src.data, eps).expect("layer_norm input length >= 2");
        let value = Matrix {
            rows: src.rows,
            cols: src.cols,
            data: normed,
        };
        self.push(value, Op::LayerNorm(a, eps))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let loss = matrix::cross_entropy(&self.value(logits).data, label)
            .expect("label checked by caller");
        self.push(
            Matrix::from_vec(1, 1, vec![loss]).unwrap(),
            Op::CrossEntropy(logits, label),
        )
    }

    /// -(1/N) Σ_k log( exp(a_k·c_k/τ) / Σ_k' exp(a_k·c_k'/τ) ) with constant anchors.
    pub fn info_nce_rows(&mut self, a: Var, anchors: Matrix, tau: f64) -> Var {
        let loss = info_nce_value(self.value(a), &anchors, tau);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]).unwrap(),
            Op::InfoNceRows(a, anchors, tau),
        )
    }

    /// (1/(rows·cols)) ‖a − target‖²_F against a constant target.
    pub fn mean_sq(&mut self, a: Var, target: Matrix) -> Var {
        assert!(self.value(a).same_shape(&target), "mean_sq shape");
        let n = (target.rows * target.cols) as f64;
        let loss = self.value(a).sub(&target).frobenius_sq() / n;
        self.push(
            Matrix::from_vec(1, 1, vec![loss]).unwrap(),
            Op::MeanSq(a, target),
        )
    }

    /// (1/(rows·cols)) Σ |a − target| against a constant target.
    pub fn mean_abs(&mut self, a: Var, target: Matrix) -> Var {
        assert!(self.value(a).same_shape(&target), "mean_abs shape");
        let n = (target.rows * target.cols) as f64;
        let loss = self
            .value(a)
            .sub(&target)
            .data
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
            / n;
        self.push(
            Matrix::from_vec(1, 1, vec![loss]).unwrap(),
            Op::MeanAbs(a, target),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, 1, "concat_rows expects row vectors");
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        self.push(
            Matrix::from_vec(parts.len(), cols, data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Seed the output gradient with 1 and sweep the tape backwards.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(
            self.nodes[output.0].value.data.len(),
            1,
            "backward expects a scalar output"
        );
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[output.0].grad.data[0] = 1.0;

        for i in (0..=output.0).rev() {
            // Take the node apart to appease the borrow checker: gradients
            // flow only to parents, which have smaller indices.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.data.iter().all(|v| *v == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // y = A·B; dA = dY·Bᵀ, dB = Aᵀ·dY
                    let da = node.grad.matmul_nt(&before[b.0].value);
                    let db = before[a.0].value.matmul_tn(&node.grad);
                    before[a.0].grad.add_assign(&da);
                    before[b.0].grad.add_assign(&db);
                }
                Op::MatMulNT(a, b) => {
                    // y = A·Bᵀ; dA = dY·B, dB = dYᵀ·A
                    let da = node.grad.matmul(&before[b.0].value);
                    let db = node.grad.matmul_tn(&before[a.0].value);
                    before[a.0].grad.add_assign(&da);
                    before[b.0].grad.add_assign(&db);
                }
                Op::Add(a, b) => {
                    let g = node.grad.clone();
                    before[a.0].grad.add_assign(&g);
                    before[b.0].grad.add_assign(&g);
                }
                Op::Sub(a, b) => {
                    before[a.0].grad.add_assign(&node.grad);
                    let neg = node.grad.scale(-1.0);
                    before[b.0].grad.add_assign(&neg);
                }
                Op::Scale(a, s) => {
                    let g = node.grad.scale(*s);
                    before[a.0].grad.add_assign(&g);
                }
                Op::Relu(a) => {
                    let g = before[a.0]
                        .value
                        .zip(&node.grad, |x, dy| if x > 0.0 { dy } else { 0.0 });
                    before[a.0].grad.add_assign(&g);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let g = before[a.0]
                        .value
                        .zip(&node.grad, |x, dy| if x >= 0.0 { dy } else { slope * dy });
                    before[a.0].grad.add_assign(&g);
                }
                Op::SoftmaxRows(a, scale) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dyr = node.grad.row(r);
                        let dotp = matrix::dot(yr, dyr);
                        for c in 0..y.cols {
                            dx.set(r, c, yr[c] * (dyr[c] - dotp) / scale);
                        }
                    }
                    before[a.0].grad.add_assign(&dx);
                }
                Op::LayerNorm(a, eps) => {
                    let x = &before[a.0].value;
                    let n = x.data.len() as f64;
                    let mean = x.data.iter().sum::<f64>() / n;
                    let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = &node.value;
                    let dy = &node.grad;
                    let mean_dy = dy.data.iter().sum::<f64>() / n;
                    let mean_dy_y = dy
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(d, yy)| d * yy)
                        .sum::<f64>()
                        / n;
                    let mut dx = Matrix::zeros(x.rows, x.cols);
                    for i in 0..x.data.len() {
                        dx.data[i] = inv * (dy.data[i] - mean_dy - y.data[i] * mean_dy_y);
                    }
                    before[a.0].grad.add_assign(&dx);
                }
                Op::CrossEntropy(a, label) => {
                    let up = node.grad.data[0];
                    let probs = matrix::softmax_vec(&before[a.0].value.data);
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        before[a.0].grad.data[i] += up * (p - onehot);
                    }
                }
                Op::InfoNceRows(a, anchors, tau) => {
                    let up = node.grad.data[0];
                    let x = &before[a.0].value;
                    let n = x.rows as f64;
                    let sims = x.matmul_nt(anchors);
                    let probs = matrix::softmax_rows(&sims, *tau);
                    let mut dx = Matrix::zeros(x.rows, x.cols);
                    for k in 0..x.rows {
                        for kp in 0..anchors.rows {
                            let delta = if k == kp { 1.0 } else { 0.0 };
                            let coef = up * (probs.get(k, kp) - delta) / (n * tau);
                            if coef == 0.0 {
                                continue;
                            }
                            for c in 0..x.cols {
                                dx.data[k * x.cols + c] += coef * anchors.get(kp, c);
                            }
                        }
                    }
                    before[a.0].grad.add_assign(&dx);
                }
                Op::MeanSq(a, target) => {
                    let up = node.grad.data[0];
                    let n = (target.rows * target.cols) as f64;
                    let g = before[a.0].value.zip(target, |x, t| up * 2.0 * (x - t) / n);
                    before[a.0].grad.add_assign(&g);
                }
                Op::MeanAbs(a, target) => {
                    let up = node.grad.data[0];
                    let n = (target.rows * target.cols) as f64;
                    let g = before[a.0]
                        .value
                        .zip(target, |x, t| up * (x - t).signum() / n);
                    before[a.0].grad.add_assign(&g);
                }
                Op::MeanRows(a) => {
                    let rows = before[a.0].value.rows;
                    let mut g = Matrix::zeros(rows, node.value.cols);
                    for r in 0..rows {
                        for c in 0..node.value.cols {
                            g.set(r, c, node.grad.data[c] / rows as f64);
                        }
                    }
                    before[a.0].grad.add_assign(&g);
                }
                Op::ConcatRows(parts) => {
                    for (r, p) in parts.iter().enumerate() {
                        let slice = node.grad.row(r).to_vec();
                        let g = Matrix::row_vec(&slice);
                        before[p.0].grad.add_assign(&g);
                    }
                }
            }
        }
    }
}

/// Forward value of the row-wise InfoNCE loss against constant anchors.
pub fn info_nce_value(a: &Matrix, anchors: &Matrix, tau: f64) -> f64 {
    assert_eq!(a.cols, anchors.cols, "info_nce dims");
    assert_eq!(a.rows, anchors.rows, "info_nce row count");
    let n = a.rows as f64;
    let sims = a.matmul_nt(anchors);
    let mut loss = 0.0;
    for k in 0..a.rows {
        let scaled: Vec<f64> = sims.row(k).iter().map(|s| s / tau).collect();
        loss += matrix::log_sum_exp(&scaled) - scaled[k];
    }
    loss / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: &mut impl FnMut(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data.iter().zip(&b.data) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / denom <= tol,
                "grad mismatch: {} vs {}",
                x,
                y
            );
        }
    }

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix {
        let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = pseudo(8, 1, 3);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.layer_norm(xv, 1e-5);
        let w = pseudo(8, 1, 4);
        let loss = t.mean_sq(y, w);
        t.backward(loss);
        let analytic = t.grad(xv).clone();

        let mut f = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(m.clone());
            let y = t.layer_norm(xv, 1e-5);
            let loss = t.mean_sq(y, pseudo(8, 1, 4));
            t.scalar(loss)
        };
        let numeric = finite_diff(&mut f, &x, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = pseudo(3, 5, 7);
        let target = pseudo(3, 5, 8);
        let run = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(m.clone());
            let y = t.softmax_rows(xv, 2.0);
            let loss = t.mean_sq(y, target.clone());
            (t, xv, loss)
        };
        let (mut t, xv, loss) = run(&x);
        t.backward(loss);
        let analytic = t.grad(xv).clone();
        let mut f = |m: &Matrix| {
            let (t, _, loss) = run(m);
            t.scalar(loss)
        };
        let numeric = finite_diff(&mut f, &x, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let x = pseudo(1, 4, 11);
        let run = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(m.clone());
            let loss = t.cross_entropy(xv, 2);
            (t, xv, loss)
        };
        let (mut t, xv, loss) = run(&x);
        t.backward(loss);
        let analytic = t.grad(xv).clone();
        // gradient = softmax - onehot
        let probs = matrix::softmax_vec(&x.data);
        for i in 0..4 {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((analytic.data[i] - expect).abs() < 1e-12);
        }
        let mut f = |m: &Matrix| {
            let (t, _, loss) = run(m);
            t.scalar(loss)
        };
        let numeric = finite_diff(&mut f, &x, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let x = pseudo(4, 6, 13);
        let anchors = pseudo(4, 6, 14);
        let run = |m: &Matrix| {
            let mut t = Tape::new();
            let xv = t.leaf(m.clone());
            let loss = t.info_nce_rows(xv, anchors.clone(), 0.5);
            (t, xv, loss)
        };
        let (mut t, xv, loss) = run(&x);
        t.backward(loss);
        let analytic = t.grad(xv).clone();
        let mut f = |m: &Matrix| {
            let (t, _, loss) = run(m);
            t.scalar(loss)
        };
        let numeric = finite_diff(&mut f, &x, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn composite_graph_gradient_matches_finite_differences() {
        // A miniature attention-like graph touching most ops.
        let h = pseudo(5, 3, 21);
        let u = pseudo(2, 3, 22);
        let w = pseudo(3, 3, 23);
        let run = |wm: &Matrix| {
            let mut t = Tape::new();
            let hv = t.leaf(h.clone());
            let uv = t.leaf(u.clone());
            let wv = t.leaf(wm.clone());
            let q = t.matmul(uv, wv);
            let k = t.matmul(hv, wv);
            let scores = t.matmul_nt(q, k);
            let a = t.softmax_rows(scores, 3.0_f64.sqrt());
            let v = t.matmul(a, hv);
            let pooled = t.mean_rows(v);
            let loss = t.mean_sq(pooled, pseudo(1, 3, 24));
            (t, wv, loss)
        };
        let (mut t, wv, loss) = run(&w);
        t.backward(loss);
        let analytic = t.grad(wv).clone();
        let mut f = |m: &Matrix| {
            let (t, _, loss) = run(m);
            t.scalar(loss)
        };
        let numeric = finite_diff(&mut f, &w, 1e-6);
        assert_close(&analytic, &numeric, 1e-5);
    }
}
