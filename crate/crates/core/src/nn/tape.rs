//! Reverse-mode differentiation on a tape of matrix-valued nodes.
//!
//! Every operation records its inputs by index, so the backward sweep can
//! walk the tape once in reverse and accumulate vector-Jacobian products.
//! Structured operations (Cayley transform, PSD inverse square root,
//! block-sparse operator application, masked softmax NLL) get hand-derived
//! adjoints instead of being decomposed into scalar ops.
//!
//! Constant nodes absorb no gradient: noise inputs stay gradient-free by
//! construction. Shape errors are programming bugs and panic; operations
//! whose forward value can genuinely fail (eigensolve, log-determinant)
//! return `Result`.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymEig};
use crate::rotations;
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueRef(usize);

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Elu,
    Ln,
    Softplus,
    Logistic,
    Recip,
    Square,
}

#[derive(Clone, Debug)]
enum Op<S> {
    /// Trainable leaf: gradient is accumulated.
    Param,
    /// Non-trainable leaf (inputs, noise): gradient is discarded.
    Const,
    MatMul(ValueRef, ValueRef),
    Add(ValueRef, ValueRef),
    Sub(ValueRef, ValueRef),
    Hadamard(ValueRef, ValueRef),
    AddN(Vec<ValueRef>),
    /// alpha·x + beta, elementwise.
    AffineConst(ValueRef, S, S),
    Transpose(ValueRef),
    Reshape(ValueRef),
    Sum(ValueRef),
    Unary(ValueRef, UnaryKind),
    /// x·wᵀ + broadcast bias row.
    Affine { x: ValueRef, w: ValueRef, b: ValueRef },
    /// Row 2e = [x_u ∥ x_v], row 2e+1 = [x_v ∥ x_u] per pair (u,v).
    GatherPairs { x: ValueRef, pairs: Vec<(usize, usize)> },
    Row(ValueRef, usize),
    Cols(ValueRef, usize, usize),
    DiagFromVec(ValueRef),
    SkewFromCoords(ValueRef),
    Cayley(ValueRef),
    /// s·A for a 1×1 scalar node s.
    ScaleByScalar { a: ValueRef, s: ValueRef },
    InvSqrtPsd { a: ValueRef, eps: S },
    /// (I_n ⊗ W) X: per-node-block left multiplication.
    BlockLmul { w: ValueRef, x: ValueRef, n: usize, d: usize },
    /// Σ over blocks (i,j,B): rows i of output += B · rows j of x.
    BlockApply { blocks: Vec<(usize, usize, ValueRef)>, x: ValueRef, n: usize, d: usize },
    /// Z − κ·I for a 1×1 scalar node κ.
    SubScaledIdentity { z: ValueRef, kappa: ValueRef },
    LogDet(ValueRef),
    /// Σ over listed rows of −log softmax(logits_row)[label_row].
    MaskedNll { logits: ValueRef, labels: Vec<usize>, rows: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Matrix<S>,
    grad: Matrix<S>,
    op: Op<S>,
    /// Saved eigendecomposition for `InvSqrtPsd`.
    aux: Option<SymEig<S>>,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> ValueRef {
        self.push_aux(value, op, None)
    }

    fn push_aux(&mut self, value: Matrix<S>, op: Op<S>, aux: Option<SymEig<S>>) -> ValueRef {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op, aux });
        ValueRef(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix<S>) -> ValueRef {
        self.push(value, Op::Param)
    }

    pub fn constant(&mut self, value: Matrix<S>) -> ValueRef {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, v: S) -> ValueRef {
        self.constant(Matrix::from_vec(1, 1, vec![v]))
    }

    pub fn value(&self, r: ValueRef) -> &Matrix<S> {
        &self.nodes[r.0].value
    }

    pub fn grad(&self, r: ValueRef) -> &Matrix<S> {
        &self.nodes[r.0].grad
    }

    pub fn scalar_value(&self, r: ValueRef) -> S {
        let v = self.value(r);
        assert!(v.rows() == 1 && v.cols() == 1, "not a scalar node");
        v[(0, 0)]
    }

    fn shape(&self, r: ValueRef) -> (usize, usize) {
        (self.nodes[r.0].value.rows(), self.nodes[r.0].value.cols())
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn add_n(&mut self, terms: Vec<ValueRef>) -> ValueRef {
        assert!(!terms.is_empty(), "add_n needs at least one term");
        let mut v = self.value(terms[0]).clone();
        for t in &terms[1..] {
            v = v.add(self.value(*t));
        }
        self.push(v, Op::AddN(terms))
    }

    /// alpha·x + beta elementwise.
    pub fn affine_const(&mut self, x: ValueRef, alpha: S, beta: S) -> ValueRef {
        let v = self.value(x).map(|e| alpha * e + beta);
        self.push(v, Op::AffineConst(x, alpha, beta))
    }

    pub fn scale(&mut self, x: ValueRef, alpha: S) -> ValueRef {
        self.affine_const(x, alpha, S::zero())
    }

    pub fn transpose(&mut self, a: ValueRef) -> ValueRef {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reshape preserving data order.
    pub fn reshape(&mut self, a: ValueRef, rows: usize, cols: usize) -> ValueRef {
        let src = self.value(a);
        assert_eq!(src.rows() * src.cols(), rows * cols, "reshape must preserve size");
        let v = Matrix::from_vec(rows, cols, src.data().to_vec());
        self.push(v, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: ValueRef) -> ValueRef {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    fn unary(&mut self, a: ValueRef, kind: UnaryKind) -> ValueRef {
        let v = self.value(a).map(|x| unary_eval(x, kind));
        self.push(v, Op::Unary(a, kind))
    }

    pub fn elu(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Elu)
    }

    pub fn ln(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Ln)
    }

    pub fn softplus(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn logistic(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Logistic)
    }

    pub fn recip(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Recip)
    }

    pub fn square(&mut self, a: ValueRef) -> ValueRef {
        self.unary(a, UnaryKind::Square)
    }

    /// x·wᵀ + b with x: s×in, w: out×in, b: 1×out.
    pub fn affine(&mut self, x: ValueRef, w: ValueRef, b: ValueRef) -> ValueRef {
        let (s, xin) = self.shape(x);
        let (out, win) = self.shape(w);
        let (brows, bout) = self.shape(b);
        assert_eq!(xin, win, "affine input width mismatch");
        assert!(brows == 1 && bout == out, "affine bias shape mismatch");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut v = Matrix::zeros(s, out);
        for r in 0..s {
            for c in 0..out {
                let mut acc = bv[(0, c)];
                for k in 0..xin {
                    acc += xv[(r, k)] * wv[(c, k)];
                }
                v[(r, c)] = acc;
            }
        }
        self.push(v, Op::Affine { x, w, b })
    }

    /// Per-pair concatenations: row 2e = [x_u ∥ x_v], row 2e+1 = [x_v ∥ x_u].
    pub fn gather_pairs(&mut self, x: ValueRef, pairs: Vec<(usize, usize)>) -> ValueRef {
        let (n, k) = self.shape(x);
        let xv = self.value(x);
        let mut v = Matrix::zeros(2 * pairs.len(), 2 * k);
        for (e, &(u, vtx)) in pairs.iter().enumerate() {
            assert!(u < n && vtx < n, "pair index out of range");
            for c in 0..k {
                v[(2 * e, c)] = xv[(u, c)];
                v[(2 * e, k + c)] = xv[(vtx, c)];
                v[(2 * e + 1, c)] = xv[(vtx, c)];
                v[(2 * e + 1, k + c)] = xv[(u, c)];
            }
        }
        self.push(v, Op::GatherPairs { x, pairs })
    }

    pub fn row(&mut self, x: ValueRef, r: usize) -> ValueRef {
        let (rows, cols) = self.shape(x);
        assert!(r < rows, "row out of range");
        let v = Matrix::from_vec(1, cols, self.value(x).row(r).to_vec());
        self.push(v, Op::Row(x, r))
    }

    pub fn cols(&mut self, x: ValueRef, lo: usize, hi: usize) -> ValueRef {
        let (rows, cols) = self.shape(x);
        assert!(lo < hi && hi <= cols, "column range out of bounds");
        let xv = self.value(x);
        let v = Matrix::from_fn(rows, hi - lo, |r, c| xv[(r, lo + c)]);
        self.push(v, Op::Cols(x, lo, hi))
    }

    /// 1×d row vector to d×d diagonal matrix.
    pub fn diag_from_vec(&mut self, x: ValueRef) -> ValueRef {
        let (rows, d) = self.shape(x);
        assert_eq!(rows, 1, "diag_from_vec expects a row vector");
        let v = Matrix::diag(self.value(x).row(0));
        let _ = d;
        self.push(v, Op::DiagFromVec(x))
    }

    /// 1×(d(d−1)/2) packed coordinates to the skew-symmetric d×d matrix,
    /// strict lower triangle in column-major order.
    pub fn skew_from_coords(&mut self, x: ValueRef, d: usize) -> Result<ValueRef> {
        let (rows, k) = self.shape(x);
        assert_eq!(rows, 1, "skew_from_coords expects a row vector");
        assert_eq!(k, d * (d - 1) / 2, "coordinate count mismatch");
        // Shape is asserted above, so the only failure left is numerical
        // (coordinates overflowed to inf/NaN upstream).
        let sv = rotations::SkewVector::new(d, self.value(x).row(0).to_vec())
            .map_err(|e| Error::Domain(e.to_string()))?;
        let v = rotations::skew_from_vec(&sv);
        Ok(self.push(v, Op::SkewFromCoords(x)))
    }

    /// Cayley transform of a skew-symmetric node.
    pub fn cayley(&mut self, a: ValueRef) -> Result<ValueRef> {
        let v = rotations::cayley(self.value(a))?.into_matrix();
        Ok(self.push(v, Op::Cayley(a)))
    }

    /// s·A for a 1×1 node s.
    pub fn scale_by_scalar(&mut self, a: ValueRef, s: ValueRef) -> ValueRef {
        let sv = self.scalar_value(s);
        let v = self.value(a).scale(sv);
        self.push(v, Op::ScaleByScalar { a, s })
    }

    /// Inverse square root of a symmetric PSD node, eigenvalues floored at
    /// eps. The eigendecomposition is saved for the backward sweep.
    pub fn inv_sqrt_psd(&mut self, a: ValueRef, eps: S) -> Result<ValueRef> {
        let eig = linalg::sym_eig(self.value(a))?;
        let d = self.value(a).rows();
        let mut scaled = Matrix::zeros(d, d);
        for (k, &lam) in eig.values.iter().enumerate() {
            let floored = lam.max(eps);
            if floored <= S::zero() {
                return Err(Error::Singular(format!(
                    "PSD block has nonpositive eigenvalue {lam} and the floor is 0"
                )));
            }
            let w = floored.sqrt().recip();
            for r in 0..d {
                scaled[(r, k)] = eig.vectors[(r, k)] * w;
            }
        }
        let v = scaled.matmul(&eig.vectors.transpose());
        Ok(self.push_aux(v, Op::InvSqrtPsd { a, eps }, Some(eig)))
    }

    /// (I_n ⊗ W) X without materializing the Kronecker product.
    pub fn block_lmul(&mut self, w: ValueRef, x: ValueRef, n: usize, d: usize) -> ValueRef {
        let (wr, wc) = self.shape(w);
        let (xr, f) = self.shape(x);
        assert!(wr == d && wc == d, "W must be d×d");
        assert_eq!(xr, n * d, "X must have n·d rows");
        let wv = self.value(w);
        let xv = self.value(x);
        let mut v = Matrix::zeros(n * d, f);
        for u in 0..n {
            for r in 0..d {
                for k in 0..d {
                    let wrk = wv[(r, k)];
                    if wrk == S::zero() {
                        continue;
                    }
                    for c in 0..f {
                        v[(u * d + r, c)] += wrk * xv[(u * d + k, c)];
                    }
                }
            }
        }
        self.push(v, Op::BlockLmul { w, x, n, d })
    }

    /// Applies a block-sparse operator given as (block row, block col, node)
    /// triples to an nd×f node.
    pub fn block_apply(
        &mut self,
        blocks: Vec<(usize, usize, ValueRef)>,
        x: ValueRef,
        n: usize,
        d: usize,
    ) -> ValueRef {
        let (xr, f) = self.shape(x);
        assert_eq!(xr, n * d, "X must have n·d rows");
        let mut v = Matrix::zeros(n * d, f);
        for &(i, j, b) in &blocks {
            assert!(i < n && j < n, "block index out of range");
            let bv = self.value(b);
            assert!(bv.rows() == d && bv.cols() == d, "blocks must be d×d");
            let xv = self.value(x);
            for r in 0..d {
                for k in 0..d {
                    let w = bv[(r, k)];
                    if w == S::zero() {
                        continue;
                    }
                    for c in 0..f {
                        v[(i * d + r, c)] += w * xv[(j * d + k, c)];
                    }
                }
            }
        }
        self.push(v, Op::BlockApply { blocks, x, n, d })
    }

    /// Z − κ·I for square Z and a 1×1 node κ.
    pub fn sub_scaled_identity(&mut self, z: ValueRef, kappa: ValueRef) -> ValueRef {
        let (r, c) = self.shape(z);
        assert_eq!(r, c, "needs a square matrix");
        let kv = self.scalar_value(kappa);
        let mut v = self.value(z).clone();
        for i in 0..r {
            v[(i, i)] -= kv;
        }
        self.push(v, Op::SubScaledIdentity { z, kappa })
    }

    /// log det of a node with positive determinant.
    pub fn log_det(&mut self, z: ValueRef) -> Result<ValueRef> {
        let det = linalg::det(self.value(z));
        if det <= S::of(1e-300) {
            return Err(Error::Domain(format!("log_det needs a positive determinant, got {det}")));
        }
        let v = Matrix::from_vec(1, 1, vec![det.ln()]);
        Ok(self.push(v, Op::LogDet(z)))
    }

    /// Σ over `rows` of −log softmax(logits_row)[labels_row].
    pub fn masked_nll(&mut self, logits: ValueRef, labels: &[usize], rows: &[usize]) -> ValueRef {
        let (n, c) = self.shape(logits);
        assert_eq!(labels.len(), n, "one label per logits row");
        let lv = self.value(logits);
        let mut total = S::zero();
        for &r in rows {
            assert!(r < n, "masked row out of range");
            assert!(labels[r] < c, "label out of range");
            let row = lv.row(r);
            total += log_sum_exp(row) - row[labels[r]];
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::MaskedNll { logits, labels: labels.to_vec(), rows: rows.to_vec() },
        )
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss node. Every node's gradient
    /// slot is filled; `Const` leaves stay zero.
    pub fn backward(&mut self, loss: ValueRef) {
        {
            let l = &mut self.nodes[loss.0];
            assert!(
                l.value.rows() == 1 && l.value.cols() == 1,
                "backward needs a scalar loss"
            );
            l.grad = Matrix::from_vec(1, 1, vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if matches!(node.op, Op::Param | Op::Const) {
                continue;
            }
            if node.grad.max_abs() == S::zero() {
                continue;
            }
            backward_one(before, node);
        }
    }
}

fn unary_eval<S: Real>(x: S, kind: UnaryKind) -> S {
    match kind {
        UnaryKind::Elu => {
            if x >= S::zero() {
                x
            } else {
                x.exp() - S::one()
            }
        }
        UnaryKind::Ln => x.ln(),
        UnaryKind::Softplus => {
            // ln(1+e^x), saturating safely at both ends.
            if x > S::of(30.0) {
                x
            } else {
                (S::one() + x.exp()).ln()
            }
        }
        UnaryKind::Logistic => {
            if x >= S::zero() {
                (S::one() + (-x).exp()).recip()
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        }
        UnaryKind::Recip => x.recip(),
        UnaryKind::Square => x * x,
    }
}

fn unary_derivative<S: Real>(x: S, y: S, kind: UnaryKind) -> S {
    match kind {
        UnaryKind::Elu => {
            if x >= S::zero() {
                S::one()
            } else {
                y + S::one()
            }
        }
        UnaryKind::Ln => x.recip(),
        UnaryKind::Softplus => unary_eval(x, UnaryKind::Logistic),
        UnaryKind::Logistic => y * (S::one() - y),
        UnaryKind::Recip => -y * y,
        UnaryKind::Square => S::of(2.0) * x,
    }
}

fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let s: S = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn add_grad<S: Real>(nodes: &mut [Node<S>], r: ValueRef, delta: &Matrix<S>) {
    let node = &mut nodes[r.0];
    if matches!(node.op, Op::Const) {
        return;
    }
    node.grad = node.grad.add(delta);
}

fn backward_one<S: Real>(before: &mut [Node<S>], node: &Node<S>) {
    let g = &node.grad;
    match &node.op {
        Op::Param | Op::Const => {}
        Op::MatMul(a, b) => {
            let ga = g.matmul(&before[b.0].value.transpose());
            let gb = before[a.0].value.transpose().matmul(g);
            add_grad(before, *a, &ga);
            add_grad(before, *b, &gb);
        }
        Op::Add(a, b) => {
            add_grad(before, *a, g);
            add_grad(before, *b, g);
        }
        Op::Sub(a, b) => {
            add_grad(before, *a, g);
            let neg = g.scale(-S::one());
            add_grad(before, *b, &neg);
        }
        Op::Hadamard(a, b) => {
            let ga = g.hadamard(&before[b.0].value);
            let gb = g.hadamard(&before[a.0].value);
            add_grad(before, *a, &ga);
            add_grad(before, *b, &gb);
        }
        Op::AddN(terms) => {
            for t in terms {
                add_grad(before, *t, g);
            }
        }
        Op::AffineConst(a, alpha, _) => {
            let ga = g.scale(*alpha);
            add_grad(before, *a, &ga);
        }
        Op::Transpose(a) => {
            let ga = g.transpose();
            add_grad(before, *a, &ga);
        }
        Op::Reshape(a) => {
            let (r, c) = (before[a.0].value.rows(), before[a.0].value.cols());
            let ga = Matrix::from_vec(r, c, g.data().to_vec());
            add_grad(before, *a, &ga);
        }
        Op::Sum(a) => {
            let w = g[(0, 0)];
            let (r, c) = (before[a.0].value.rows(), before[a.0].value.cols());
            let ga = Matrix::from_fn(r, c, |_, _| w);
            add_grad(before, *a, &ga);
        }
        Op::Unary(a, kind) => {
            let av = &before[a.0].value;
            let ga = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                g[(r, c)] * unary_derivative(av[(r, c)], node.value[(r, c)], *kind)
            });
            add_grad(before, *a, &ga);
        }
        Op::Affine { x, w, b } => {
            let gx = g.matmul(&before[w.0].value);
            let gw = g.transpose().matmul(&before[x.0].value);
            let mut gb = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    gb[(0, c)] += g[(r, c)];
                }
            }
            add_grad(before, *x, &gx);
            add_grad(before, *w, &gw);
            add_grad(before, *b, &gb);
        }
        Op::GatherPairs { x, pairs } => {
            let k = before[x.0].value.cols();
            let mut gx = Matrix::zeros(before[x.0].value.rows(), k);
            for (e, &(u, v)) in pairs.iter().enumerate() {
                for c in 0..k {
                    gx[(u, c)] += g[(2 * e, c)] + g[(2 * e + 1, k + c)];
                    gx[(v, c)] += g[(2 * e, k + c)] + g[(2 * e + 1, c)];
                }
            }
            add_grad(before, *x, &gx);
        }
        Op::Row(x, r) => {
            let (rows, cols) = (before[x.0].value.rows(), before[x.0].value.cols());
            let mut gx = Matrix::zeros(rows, cols);
            for c in 0..cols {
                gx[(*r, c)] = g[(0, c)];
            }
            add_grad(before, *x, &gx);
        }
        Op::Cols(x, lo, _hi) => {
            let (rows, cols) = (before[x.0].value.rows(), before[x.0].value.cols());
            let mut gx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..g.cols() {
                    gx[(r, lo + c)] = g[(r, c)];
                }
            }
            add_grad(before, *x, &gx);
        }
        Op::DiagFromVec(x) => {
            let d = g.rows();
            let ga = Matrix::from_fn(1, d, |_, k| g[(k, k)]);
            add_grad(before, *x, &ga);
        }
        Op::SkewFromCoords(x) => {
            let d = g.rows();
            let mut ga = Matrix::zeros(1, d * (d - 1) / 2);
            let mut k = 0;
            for j in 0..d {
                for i in (j + 1)..d {
                    ga[(0, k)] = g[(i, j)] - g[(j, i)];
                    k += 1;
                }
            }
            add_grad(before, *x, &ga);
        }
        Op::Cayley(a) => {
            // Y = (I−A)⁻¹(I+A): gA = (I−A)⁻ᵀ G (Y+I)ᵀ.
            let av = &before[a.0].value;
            let n = av.rows();
            let i_minus_a_inv_t = linalg::inverse(&Matrix::identity(n).sub(av))
                .expect("I−A invertible for skew A")
                .transpose();
            let y_plus_i_t = node.value.add(&Matrix::identity(n)).transpose();
            let ga = i_minus_a_inv_t.matmul(g).matmul(&y_plus_i_t);
            add_grad(before, *a, &ga);
        }
        Op::ScaleByScalar { a, s } => {
            let sv = before[s.0].value[(0, 0)];
            let ga = g.scale(sv);
            let gs: S = g.hadamard(&before[a.0].value).data().iter().copied().sum();
            add_grad(before, *a, &ga);
            let gs = Matrix::from_vec(1, 1, vec![gs]);
            add_grad(before, *s, &gs);
        }
        Op::InvSqrtPsd { a, eps } => {
            let eig = node.aux.as_ref().expect("saved eigendecomposition");
            let d = g.rows();
            let f = |lam: S| lam.max(*eps).sqrt().recip();
            let fprime = |lam: S| {
                if lam > *eps {
                    S::of(-0.5) * lam.powf(S::of(-1.5))
                } else {
                    S::zero()
                }
            };
            // Daleckii–Krein: gS = V (Γ ∘ VᵀGV) Vᵀ with divided differences.
            let vt_g_v = eig.vectors.transpose().matmul(g).matmul(&eig.vectors);
            let mut inner = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let (li, lj) = (eig.values[i], eig.values[j]);
                    let gamma = if (li - lj).abs() <= S::of(1e-9) * S::one().max(li.abs()) {
                        fprime((li + lj) * S::of(0.5))
                    } else {
                        (f(li) - f(lj)) / (li - lj)
                    };
                    inner[(i, j)] = gamma * vt_g_v[(i, j)];
                }
            }
            let ga = eig.vectors.matmul(&inner).matmul(&eig.vectors.transpose());
            add_grad(before, *a, &ga);
        }
        Op::BlockLmul { w, x, n, d } => {
            let f = g.cols();
            let mut gw = Matrix::zeros(*d, *d);
            let mut gx = Matrix::zeros(n * d, f);
            let wv = &before[w.0].value;
            let xv = &before[x.0].value;
            for u in 0..*n {
                for r in 0..*d {
                    for k in 0..*d {
                        let mut acc = S::zero();
                        for c in 0..f {
                            acc += g[(u * d + r, c)] * xv[(u * d + k, c)];
                            gx[(u * d + k, c)] += wv[(r, k)] * g[(u * d + r, c)];
                        }
                        gw[(r, k)] += acc;
                    }
                }
            }
            add_grad(before, *w, &gw);
            add_grad(before, *x, &gx);
        }
        Op::BlockApply { blocks, x, n, d } => {
            let f = g.cols();
            let mut gx = Matrix::zeros(n * d, f);
            for &(i, j, b) in blocks {
                let bv = &before[b.0].value;
                let xv = &before[x.0].value;
                let mut gb = Matrix::zeros(*d, *d);
                for r in 0..*d {
                    for k in 0..*d {
                        let mut acc = S::zero();
                        for c in 0..f {
                            acc += g[(i * d + r, c)] * xv[(j * d + k, c)];
                            gx[(j * d + k, c)] += bv[(r, k)] * g[(i * d + r, c)];
                        }
                        gb[(r, k)] = acc;
                    }
                }
                add_grad(before, b, &gb);
            }
            add_grad(before, *x, &gx);
        }
        Op::SubScaledIdentity { z, kappa } => {
            add_grad(before, *z, g);
            let mut tr = S::zero();
            for i in 0..g.rows() {
                tr += g[(i, i)];
            }
            let gk = Matrix::from_vec(1, 1, vec![-tr]);
            add_grad(before, *kappa, &gk);
        }
        Op::LogDet(z) => {
            let w = g[(0, 0)];
            let gz = linalg::inverse(&before[z.0].value)
                .expect("log_det forward checked invertibility")
                .transpose()
                .scale(w);
            add_grad(before, *z, &gz);
        }
        Op::MaskedNll { logits, labels, rows } => {
            let w = g[(0, 0)];
            let lv = &before[logits.0].value;
            let c = lv.cols();
            let mut gl = Matrix::zeros(lv.rows(), c);
            for &r in rows {
                let row = lv.row(r);
                let lse = log_sum_exp(row);
                for j in 0..c {
                    let p = (row[j] - lse).exp();
                    let onehot = if j == labels[r] { S::one() } else { S::zero() };
                    gl[(r, j)] = w * (p - onehot);
                }
            }
            add_grad(before, *logits, &gl);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type M = Matrix<f64>;

    fn randm(rng: &mut ChaCha20Rng, r: usize, c: usize) -> M {
        M::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences through an arbitrary tape builder.
    fn fd_check(
        build: &dyn Fn(&mut Tape<f64>, &[M]) -> ValueRef,
        inputs: &[M],
        rel_tol: f64,
    ) {
        let mut tape = Tape::new();
        let refs: Vec<ValueRef> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, inputs);
        let _ = refs;
        tape.backward(loss);
        let grads: Vec<M> = (0..inputs.len()).map(|i| tape.grad(ValueRef(i)).clone()).collect();

        let h = 1e-5;
        for (pi, m) in inputs.iter().enumerate() {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let eval = |delta: f64| {
                        let mut shifted: Vec<M> = inputs.to_vec();
                        shifted[pi][(r, c)] += delta;
                        let mut t = Tape::new();
                        for s in &shifted {
                            t.param(s.clone());
                        }
                        let l = build(&mut t, &shifted);
                        t.scalar_value(l)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = grads[pi][(r, c)];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom <= rel_tol,
                        "param {pi} entry ({r},{c}): fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    /// Rebuilds the same graph from explicit values so fd_check can re-run
    /// the forward pass on shifted inputs.
    fn rebuild<'a>(
        f: impl Fn(&mut Tape<f64>, Vec<ValueRef>) -> ValueRef + 'a,
    ) -> impl Fn(&mut Tape<f64>, &[M]) -> ValueRef + 'a {
        move |tape, inputs| {
            // Params already pushed by fd_check occupy the first slots when
            // called the first time; on re-evaluation they are pushed fresh.
            let refs: Vec<ValueRef> = if tape.is_empty() {
                inputs.iter().map(|m| tape.param(m.clone())).collect()
            } else {
                (0..inputs.len()).map(ValueRef).collect()
            };
            f(tape, refs)
        }
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut tape = Tape::new();
        let a = tape.param(M::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = tape.sum(a);
        tape.backward(s);
        assert_eq!(tape.grad(a), &M::from_fn(2, 2, |_, _| 1.0));
    }

    #[test]
    fn quadratic_form_matches_hand_gradient() {
        // loss = ‖Wx‖² ⇒ ∂loss/∂W = 2Wxxᵀ.
        let mut tape = Tape::new();
        let w = tape.param(M::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let x = tape.constant(M::from_rows(&[vec![2.0], vec![-1.0]]));
        let wx = tape.matmul(w, x);
        let sq = tape.square(wx);
        let loss = tape.sum(sq);
        tape.backward(loss);

        let wv = M::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let xv = M::from_rows(&[vec![2.0], vec![-1.0]]);
        let want = wv.matmul(&xv).matmul(&xv.transpose()).scale(2.0);
        assert!(tape.grad(w).sub(&want).max_abs() < 1e-10);
        // x is a constant: no gradient accumulates.
        assert_eq!(tape.grad(x), &M::zeros(2, 1));
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(60);
        let a = randm(&mut rng, 3, 2);
        let b = randm(&mut rng, 2, 4);
        let w = randm(&mut rng, 3, 4);
        let bias = randm(&mut rng, 1, 3);
        fd_check(
            &rebuild(|t, r| {
                let mm = t.matmul(r[0], r[1]);
                let e = t.elu(mm);
                let aff = t.affine(e, r[2], r[3]);
                let sq = t.square(aff);
                t.sum(sq)
            }),
            &[a, b, w, bias],
            1e-6,
        );
    }

    #[test]
    fn scalar_chain_matches_finite_differences() {
        let k = M::from_vec(1, 1, vec![0.3]);
        fd_check(
            &rebuild(|t, r| {
                let kap = t.logistic(r[0]);
                let sq = t.square(kap);
                let arg = t.affine_const(sq, -1.0, 1.0);
                let l = t.ln(arg);
                let sp = t.softplus(r[0]);
                let rc = t.recip(sp);
                let prod = t.hadamard(l, rc);
                t.sum(prod)
            }),
            &[k],
            1e-6,
        );
    }

    #[test]
    fn structured_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let phi = randm(&mut rng, 1, 3);
        let vdiag = randm(&mut rng, 1, 3);
        fd_check(
            &rebuild(|t, r| {
                let skew = t.skew_from_coords(r[0], 3).unwrap();
                let rot = t.cayley(skew).unwrap();
                let dg = t.diag_from_vec(r[1]);
                let prod = t.matmul(rot, dg);
                // Offset before squaring: Σ(RD)² alone is rotation-invariant.
                let off = t.constant(M::from_fn(3, 3, |i, j| 0.3 * (i + 2 * j) as f64 - 0.5));
                let shifted = t.add(prod, off);
                let sq = t.square(shifted);
                t.sum(sq)
            }),
            &[phi, vdiag],
            1e-6,
        );
    }

    #[test]
    fn inv_sqrt_and_logdet_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(62);
        let f0 = randm(&mut rng, 2, 2);
        let kraw = M::from_vec(1, 1, vec![0.2]);
        fd_check(
            &rebuild(|t, r| {
                // S = FᵀF + I (safely PD), R = S^{−1/2}, plus a logdet branch.
                let ft = t.transpose(r[0]);
                let gram = t.matmul(ft, r[0]);
                let eye = t.constant(M::identity(2));
                let s = t.add(gram, eye);
                let rmat = t.inv_sqrt_psd(s, 1e-8).unwrap();
                let kap = t.logistic(r[1]);
                let shifted = t.sub_scaled_identity(rmat, kap);
                let two = t.constant(M::identity(2).scale(2.0));
                let bumped = t.add(shifted, two);
                let ld = t.log_det(bumped).unwrap();
                let sq = t.square(rmat);
                let s2 = t.sum(sq);
                t.add(ld, s2)
            }),
            &[f0, kraw],
            1e-5,
        );
    }

    #[test]
    fn block_and_gather_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(63);
        let x = randm(&mut rng, 4, 3);
        let w = randm(&mut rng, 2, 2);
        let xf = randm(&mut rng, 4, 2);
        let b01 = randm(&mut rng, 2, 2);
        fd_check(
            &rebuild(|t, r| {
                let pairs = vec![(0usize, 1usize), (2, 3)];
                let g = t.gather_pairs(r[0], pairs);
                let sg = t.square(g);
                let s1 = t.sum(sg);
                // 2 blocks on a 2-node, d=2 layout.
                let lm = t.block_lmul(r[1], r[2], 2, 2);
                let blocks = vec![(0usize, 1usize, r[3]), (1, 0, r[3])];
                let ap = t.block_apply(blocks, lm, 2, 2);
                let sa = t.square(ap);
                let s2 = t.sum(sa);
                t.add(s1, s2)
            }),
            &[x, w, xf, b01],
            1e-6,
        );
    }

    #[test]
    fn masked_nll_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(64);
        let logits = randm(&mut rng, 5, 3);
        fd_check(
            &rebuild(|t, r| t.masked_nll(r[0], &[0, 2, 1, 0, 2], &[0, 2, 4])),
            &[logits],
            1e-6,
        );
    }

    #[test]
    fn repeated_eigenvalues_still_differentiate() {
        // Gram of an orthogonal frame: S = c·I has a repeated spectrum.
        let c = M::from_vec(1, 1, vec![1.7]);
        fd_check(
            &rebuild(|t, r| {
                let eye = t.constant(M::identity(3));
                let s = t.scale_by_scalar(eye, r[0]);
                let rmat = t.inv_sqrt_psd(s, 1e-8).unwrap();
                let sq = t.square(rmat);
                t.sum(sq)
            }),
            &[c],
            1e-5,
        );
    }

    #[test]
    fn forward_values_are_deterministic() {
        let build = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.param(randm(&mut rng, 4, 4));
            let b = tape.param(randm(&mut rng, 4, 4));
            let mm = tape.matmul(a, b);
            let e = tape.elu(mm);
            let s = tape.sum(e);
            tape.scalar_value(s)
        };
        assert_eq!(build(9).to_bits(), build(9).to_bits());
    }
}
