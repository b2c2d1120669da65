//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices. One [`Tape`] records a single forward computation; calling
//! [`Tape::backward`] on a scalar node accumulates gradients for every
//! parameter that was read from a [`ParamSet`].

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::objectives;

pub type Matrix = Array2<f64>;

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| Matrix::zeros(t.raw_dim())).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    /// Rows of a parameter matrix (embedding lookup).
    Embed(ParamId, Vec<usize>),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Rows(Var, Vec<usize>),
    Cols(Var, usize, usize),
    HConcat(Vec<Var>),
    VConcat(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    /// Elementwise product with a constant mask (dropout).
    Mask(Var, Matrix),
    Bce(Var, Vec<f64>),
    Norm(Var),
    SumSquares(Var),
    CrossEntropyRows(Var, Vec<usize>),
    /// Weighted sum of scalar nodes.
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id).view(),
            _ => self.nodes[v.0].value.view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Matrix::zeros((0, 0)), Op::Param(id))
    }

    pub fn embed(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(id);
        let value = table.select(Axis(0), rows);
        self.push(value, Op::Embed(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) + &self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) - &self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = &self.value(a) + &self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `x · w + b` for a `[1, out]` bias row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).mapv(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::Rows(a, rows.to_vec()))
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::Cols(a, start, end))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("hconcat row counts agree");
        self.push(value, Op::HConcat(parts.to_vec()))
    }

    pub fn vconcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("vconcat col counts agree");
        self.push(value, Op::VConcat(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).to_owned();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(objectives::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn mask(&mut self, a: Var, mask: Matrix) -> Var {
        let value = &self.value(a) * &mask;
        self.push(value, Op::Mask(a, mask))
    }

    /// Mean binary cross-entropy of probabilities against labels.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Var {
        let p: Vec<f64> = self.value(probs).iter().copied().collect();
        assert_eq!(p.len(), labels.len(), "bce length mismatch");
        let value = objectives::bce_mean(&p, labels).expect("lengths checked");
        self.push(Matrix::from_elem((1, 1), value), Op::Bce(probs, labels.to_vec()))
    }

    /// Euclidean norm of all entries.
    pub fn norm(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Matrix::from_elem((1, 1), value), Op::Norm(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|v| v * v).sum::<f64>();
        self.push(Matrix::from_elem((1, 1), value), Op::SumSquares(a))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let value = total / targets.len() as f64;
        self.push(
            Matrix::from_elem((1, 1), value),
            Op::CrossEntropyRows(logits, targets.to_vec()),
        )
    }

    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Matrix::from_elem((1, 1), value), Op::Combine(terms.to_vec()))
    }

    /// Back-propagates from scalar `root`, returning gradients for every
    /// tensor of the tape's parameter set.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut out = self.params.zeros_like();
        self.backward_into(root, &mut out);
        out
    }

    pub fn backward_into(&self, root: Var, out: &mut Gradients) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.tensors[id.0] += &g,
                Op::Embed(id, rows) => {
                    let table = &mut out.tensors[id.0];
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = table.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(&self.value(*b));
                    let gb = g.t().dot(&self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, grow);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.mapv(|v| v * f)),
                Op::Rows(a, rows) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Cols(a, start, end) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::HConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::VConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.raw_dim());
                    for ((mut out_row, y_row), g_row) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                        for ((o, &yv), &gv) in out_row.iter_mut().zip(y_row.iter()).zip(g_row.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * &gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Matrix::zeros(xhat.raw_dim());
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let d = dxhat.row(i);
                        let xh = xhat.row(i);
                        let mean_d = d.sum() / n;
                        let mean_dx = d.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..row.len() {
                            row[j] = inv_std[i] * (d[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Mask(a, mask) => acc(&mut grads, *a, &g * mask),
                Op::Bce(p, labels) => {
                    let upstream = g[[0, 0]];
                    let pv = self.value(*p);
                    let n = labels.len() as f64;
                    let mut gp = Matrix::zeros(pv.raw_dim());
                    for ((o, &prob), &y) in gp.iter_mut().zip(pv.iter()).zip(labels.iter()) {
                        *o = upstream * objectives::bce_grad(prob, y) / n;
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::Norm(a) => {
                    let norm = node.value[[0, 0]];
                    let upstream = g[[0, 0]];
                    // subgradient 0 at the origin
                    let ga = if norm > 0.0 {
                        self.value(*a).mapv(|v| upstream * v / norm)
                    } else {
                        Matrix::zeros(self.value(*a).raw_dim())
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let upstream = g[[0, 0]];
                    acc(&mut grads, *a, self.value(*a).mapv(|v| 2.0 * upstream * v));
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let upstream = g[[0, 0]] / targets.len() as f64;
                    let lv = self.value(*logits);
                    let mut gl = Matrix::zeros(lv.raw_dim());
                    for ((mut out_row, row), &t) in gl.rows_mut().into_iter().zip(lv.rows()).zip(targets) {
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, o) in out_row.iter_mut().enumerate() {
                            let p = (row[j] - max).exp() / sum;
                            *o = upstream * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Combine(terms) => {
                    let upstream = g[[0, 0]];
                    for &(v, w) in terms {
                        acc(&mut grads, v, Matrix::from_elem((1, 1), upstream * w));
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `param`.
    fn numeric(params: &mut ParamSet, id: ParamId, f: &dyn Fn(&ParamSet) -> f64) -> Matrix {
        let eps = 1e-6;
        let shape = params.get(id).raw_dim();
        let mut out = Matrix::zeros(shape);
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = params.get(id)[[r, c]];
            params.get_mut(id)[[r, c]] = orig + eps;
            let up = f(params);
            params.get_mut(id)[[r, c]] = orig - eps;
            let down = f(params);
            params.get_mut(id)[[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut params = ParamSet::new();
        let a = params.add("a", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]);
        let b = params.add("b", array![[0.2, 0.1], [-0.3, 0.7], [0.5, -0.4]]);
        let g = params.add("g", array![[1.1, 0.9, 1.0]]);
        let be = params.add("be", array![[0.0, 0.1, -0.1]]);
        let f = |p: &ParamSet| -> (f64, Gradients) {
            let mut t = Tape::new(p);
            let av = t.param(a);
            let bv = t.param(b);
            let ab = t.matmul(av, bv); // 2x2
            let s = t.softmax_rows(ab);
            let abt = t.matmul_t(av, av); // 2x2
            let sum = t.add(s, abt);
            let ln_in = t.matmul_t(sum, bv); // 2x3
            let ln = t.layer_norm(ln_in, g, be, 1e-5);
            let gl = t.gelu(ln);
            let left = t.cols(gl, 0, 2);
            let right = t.cols(gl, 1, 3);
            let cat = t.vconcat(&[left, right]);
            let sig = t.sigmoid(cat);
            let picked = t.rows(sig, &[0, 3, 3]);
            let flat_labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
            let bce = t.bce(picked, &flat_labels);
            let nrm = t.norm(ab);
            let sq = t.sum_squares(left);
            let ce = t.cross_entropy_rows(ab, &[1, 0]);
            let root = t.combine(&[(bce, 1.0), (nrm, 0.5), (sq, 0.25), (ce, 2.0)]);
            (t.scalar(root), t.backward(root))
        };
        let (_, analytic) = f(&params);
        for id in [a, b, g, be] {
            let num = numeric(&mut params, id, &|p| f(p).0);
            assert_close(analytic.get(id), &num);
        }
    }

    #[test]
    fn embed_scatters_repeated_rows() {
        let mut params = ParamSet::new();
        let e = params.add("e", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let mut t = Tape::new(&params);
        let x = t.embed(e, &[2, 0, 2]);
        let s = t.sum_squares(x);
        let grads = t.backward(s);
        assert_eq!(grads.get(e), &array![[2.0, 4.0], [0.0, 0.0], [20.0, 24.0]]);
    }

    #[test]
    fn norm_subgradient_is_zero_at_origin() {
        let mut params = ParamSet::new();
        let a = params.add("a", Matrix::zeros((1, 3)));
        let mut t = Tape::new(&params);
        let av = t.param(a);
        let n = t.norm(av);
        assert_eq!(t.scalar(n), 0.0);
        assert!(t.backward(n).is_all_zero());
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }
}
