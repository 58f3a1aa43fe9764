use super::Matrix;
use crate::error::{Error, Result};

/// Stabilizer inside the Euclidean distance; `sqrt(EPS)` is subtracted so
/// that `distance(a, a) == 0` exactly while the gradient stays bounded.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Floor added to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a^T b`
    TransMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a column vector to every column of a matrix.
    AddColumn(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    AddN(Vec<Var>),
    Distance(Var, Var),
    NegLogAt(Var, usize),
    /// Rows of a table gathered into the columns of the output.
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
    SliceRows(Var, usize),
    HStack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a dynamic computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller ids. `backward` may run once per recording; call [`Tape::reset`]
/// before building the next graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node, keeping allocated capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of the last backward root with respect to `v`.
    /// All zeros before `backward` has run.
    pub fn grad(&self, v: Var) -> Matrix {
        let (r, c) = self.shape(v);
        match self.grads.get(v.0) {
            Some(Some(g)) => Matrix::from_vec(r, c, g.clone()).expect("gradient shape"),
            _ => Matrix::zeros(r, c),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.rows() {
            return Err(shape_err("matmul", am.shape(), bm.shape()));
        }
        let (n, k, m) = (am.rows(), am.cols(), bm.cols());
        let (ad, bd) = (am.data(), bm.data());
        if m == 1 {
            let out = ad.chunks_exact(k.max(1)).take(n).map(|row| dot(row, bd)).collect();
            let value = Matrix::from_vec(n, 1, out)?;
            return Ok(self.push(value, Op::MatMul(a, b)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Matrix::from_vec(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a^T b`, e.g. attention scores `H^T u`.
    pub fn trans_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.rows() != bm.rows() {
            return Err(shape_err("trans_matmul", am.shape(), bm.shape()));
        }
        let (k, n, m) = (am.rows(), am.cols(), bm.cols());
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (am.data(), bm.data());
        for p in 0..k {
            let brow = &bd[p * m..(p + 1) * m];
            for i in 0..n {
                let api = ad[p * n + i];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += api * bv;
                }
            }
        }
        let value = Matrix::from_vec(n, m, out)?;
        Ok(self.push(value, Op::TransMatMul(a, b)))
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(shape_err(name, am.shape(), bm.shape()));
        }
        let data = am.data().iter().zip(bm.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(am.rows(), am.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_column(&mut self, m: Var, col: Var) -> Result<Var> {
        let (mm, cm) = (self.value(m), self.value(col));
        if cm.cols() != 1 || cm.rows() != mm.rows() {
            return Err(shape_err("add_column", mm.shape(), cm.shape()));
        }
        let mut out = mm.clone();
        let cols = out.cols();
        for (r, &b) in cm.data().iter().enumerate() {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddColumn(m, col)))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let am = self.value(a);
        let data = am.data().iter().map(|&x| f(x)).collect();
        Matrix::from_vec(am.rows(), am.cols(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.map(a, |x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Softmax over a column vector, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let am = self.value(a);
        if am.cols() != 1 || am.rows() == 0 {
            return Err(Error::Shape(format!(
                "softmax expects a non-empty column vector, got {}x{}",
                am.rows(),
                am.cols()
            )));
        }
        let probs = softmax_values(am.data())?;
        Ok(self.push(Matrix::column(probs), Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("add_n needs at least one input".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let pm = self.value(p);
            if pm.shape() != acc.shape() {
                return Err(shape_err("add_n", acc.shape(), pm.shape()));
            }
            for (o, &x) in acc.data_mut().iter_mut().zip(pm.data()) {
                *o += x;
            }
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec())))
    }

    /// Mean of same-shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.add_n(parts)?;
        Ok(self.scale(s, 1.0 / parts.len() as f64))
    }

    /// `sqrt(|a - b|^2 + eps) - sqrt(eps)`.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(shape_err("distance", am.shape(), bm.shape()));
        }
        let d = distance_values(am.data(), bm.data());
        Ok(self.push(Matrix::scalar(d), Op::Distance(a, b)))
    }

    /// `-ln(p[index] + 1e-12)`.
    pub fn neg_log_at(&mut self, p: Var, index: usize) -> Result<Var> {
        let pm = self.value(p);
        if index >= pm.len() {
            return Err(Error::Contract(format!(
                "index {index} out of range for {} probabilities",
                pm.len()
            )));
        }
        let v = -(pm.data()[index] + LOG_FLOOR).ln();
        Ok(self.push(Matrix::scalar(v), Op::NegLogAt(p, index)))
    }

    /// Gathers `table` rows `ids` as the columns of a `dim x ids.len()` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tm = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tm.rows()) {
            return Err(Error::Data(format!(
                "row {bad} out of range for a table with {} rows",
                tm.rows()
            )));
        }
        let (dim, n) = (tm.cols(), ids.len());
        let mut out = Matrix::zeros(dim, n);
        for (j, &id) in ids.iter().enumerate() {
            for (r, &v) in tm.row(id).iter().enumerate() {
                out.set(r, j, v);
            }
        }
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let am = self.value(a);
        if col >= am.cols() {
            return Err(Error::Shape(format!(
                "column {col} out of range for {} columns",
                am.cols()
            )));
        }
        let v = Matrix::column(am.column_values(col));
        Ok(self.push(v, Op::Column(a, col)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let am = self.value(a);
        if start + len > am.rows() || len == 0 {
            return Err(Error::Shape(format!(
                "rows {start}..{} out of range for {} rows",
                start + len,
                am.rows()
            )));
        }
        let cols = am.cols();
        let data = am.data()[start * cols..(start + len) * cols].to_vec();
        let v = Matrix::from_vec(len, cols, data)?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Places column vectors side by side.
    pub fn hstack(&mut self, columns: &[Var]) -> Result<Var> {
        let first = *columns
            .first()
            .ok_or_else(|| Error::Contract("hstack needs at least one column".into()))?;
        let rows = self.value(first).rows();
        let n = columns.len();
        let mut out = Matrix::zeros(rows, n);
        for (j, &c) in columns.iter().enumerate() {
            let cm = self.value(c);
            if cm.shape() != (rows, 1) {
                return Err(shape_err("hstack", (rows, 1), cm.shape()));
            }
            for (r, &v) in cm.data().iter().enumerate() {
                out.set(r, j, v);
            }
        }
        Ok(self.push(out, Op::HStack(columns.to_vec())))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients accumulate additively over fan-out. A second call without
    /// [`Tape::reset`] is rejected.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got {r}x{c}"
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            propagate(&self.nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k, m) = (am.rows(), am.cols(), bm.cols());
            if m == 1 {
                // dA += g b^T, db += A^T g
                {
                    let ga = acc(grads, nodes, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            axpy(gi, bm.data(), &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                let gb = acc(grads, nodes, *b);
                for (i, &gi) in g.iter().enumerate() {
                    if gi != 0.0 {
                        axpy(gi, &am.data()[i * k..(i + 1) * k], gb);
                    }
                }
                return;
            }
            // dA = G B^T
            {
                let ga = acc(grads, nodes, *a);
                let bd = bm.data();
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            // dB = A^T G
            let gb = acc(grads, nodes, *b);
            let ad = am.data();
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                        *o += aip * gv;
                    }
                }
            }
        }
        Op::TransMatMul(a, b) => {
            // C = A^T B with A: k x n, B: k x m, C: n x m
            let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
            let (k, n, m) = (am.rows(), am.cols(), bm.cols());
            {
                let ga = acc(grads, nodes, *a);
                let bd = bm.data();
                for p in 0..k {
                    let brow = &bd[p * m..(p + 1) * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        ga[p * n + i] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            let ad = am.data();
            for p in 0..k {
                for i in 0..n {
                    let api = ad[p * n + i];
                    let grow = &g[i * m..(i + 1) * m];
                    for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                        *o += api * gv;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(acc(grads, nodes, *a), g, 1.0);
            add_into(acc(grads, nodes, *b), g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(acc(grads, nodes, *a), g, 1.0);
            add_into(acc(grads, nodes, *b), g, -1.0);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            for ((o, &gv), &bv) in acc(grads, nodes, *a).iter_mut().zip(g).zip(bd) {
                *o += gv * bv;
            }
            for ((o, &gv), &av) in acc(grads, nodes, *b).iter_mut().zip(g).zip(ad) {
                *o += gv * av;
            }
        }
        Op::AddColumn(m, col) => {
            add_into(acc(grads, nodes, *m), g, 1.0);
            let cols = out.cols();
            let gc = acc(grads, nodes, *col);
            for (r, o) in gc.iter_mut().enumerate() {
                *o += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
            }
        }
        Op::Scale(a, f) => add_into(acc(grads, nodes, *a), g, *f),
        Op::Sigmoid(a) => {
            for ((o, &gv), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out.data()) {
                *o += gv * y * (1.0 - y);
            }
        }
        Op::Tanh(a) => {
            for ((o, &gv), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out.data()) {
                *o += gv * (1.0 - y * y);
            }
        }
        Op::Exp(a) => {
            for ((o, &gv), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(out.data()) {
                *o += gv * y;
            }
        }
        Op::Softmax(a) => {
            let y = out.data();
            let dot: f64 = g.iter().zip(y).map(|(x, p)| x * p).sum();
            for ((o, &gv), &p) in acc(grads, nodes, *a).iter_mut().zip(g).zip(y) {
                *o += p * (gv - dot);
            }
        }
        Op::Sum(a) => {
            for o in acc(grads, nodes, *a).iter_mut() {
                *o += g[0];
            }
        }
        Op::AddN(parts) => {
            for p in parts {
                add_into(acc(grads, nodes, *p), g, 1.0);
            }
        }
        Op::Distance(a, b) => {
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let root = out.item() + DISTANCE_EPS.sqrt();
            let scale = g[0] / root;
            for ((o, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(ad).zip(bd) {
                *o += scale * (x - y);
            }
            for ((o, &x), &y) in acc(grads, nodes, *b).iter_mut().zip(ad).zip(bd) {
                *o -= scale * (x - y);
            }
        }
        Op::NegLogAt(p, index) => {
            let pv = nodes[p.0].value.data()[*index];
            acc(grads, nodes, *p)[*index] -= g[0] / (pv + LOG_FLOOR);
        }
        Op::GatherRows(table, ids) => {
            let dim = out.rows();
            let n = out.cols();
            let gt = acc(grads, nodes, *table);
            for (j, &id) in ids.iter().enumerate() {
                for r in 0..dim {
                    gt[id * dim + r] += g[r * n + j];
                }
            }
        }
        Op::Column(a, col) => {
            let cols = nodes[a.0].value.cols();
            let ga = acc(grads, nodes, *a);
            for (r, &gv) in g.iter().enumerate() {
                ga[r * cols + col] += gv;
            }
        }
        Op::SliceRows(a, start) => {
            let cols = out.cols();
            let ga = acc(grads, nodes, *a);
            add_into(&mut ga[start * cols..start * cols + g.len()], g, 1.0);
        }
        Op::HStack(columns) => {
            let n = columns.len();
            for (j, c) in columns.iter().enumerate() {
                for (r, o) in acc(grads, nodes, *c).iter_mut().enumerate() {
                    *o += g[r * n + j];
                }
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s[0] += x[0] * y[0];
        s[1] += x[1] * y[1];
        s[2] += x[2] * y[2];
        s[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `y += alpha x`
#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Epsilon-stabilized Euclidean distance on raw slices.
pub fn distance_values(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq + DISTANCE_EPS).sqrt() - DISTANCE_EPS.sqrt()
}
