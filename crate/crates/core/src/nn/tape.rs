//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the tape
//! through [`Tape::param`]; [`Tape::backward`] returns gradients for exactly the
//! parameters the scalar root depends on, so untouched parameters get `None`.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    /// (n×d) + (1×d) broadcast over rows
    AddRow(Var, Var),
    /// (n×d) ⊙ (1×d) broadcast over rows
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// row-wise (x - mean) / sqrt(var + eps); stores 1/σ per row
    NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Σ_i x[i, idx_i] as a 1×1 value
    PickSum(Var, Vec<usize>),
    Sum(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×d row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1×d row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::NormalizeRows(a, inv_std))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("mean over empty rows").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn pick_sum(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), idx.len());
        let total: f64 = idx.iter().enumerate().map(|(r, &c)| x[[r, c]]).sum();
        self.push(Mat::from_elem((1, 1), total), Op::PickSum(a, idx.to_vec()))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts.iter().map(|&p| self.value(p).sum()).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Sum(parts.to_vec()))
    }

    /// Back-propagates from a scalar root. Entry `i` of the result is the gradient of
    /// parameter `i`, or `None` when the root does not depend on it.
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.raw_dim()));
        let mut out = vec![None; self.store.len()];

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    let dots = ga.sum_axis(Axis(1));
                    for (mut row, (yr, d)) in ga.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots)) {
                        row.zip_mut_with(&yr, |v, &yv| *v -= yv * d);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1));
                    let mut ga = g;
                    for (mut row, (pr, s)) in ga.rows_mut().into_iter().zip(p.rows().into_iter().zip(sums)) {
                        row.zip_mut_with(&pr, |v, &pv| *v -= pv * s);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, inv_std) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let n = row.len() as f64;
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = inv_std[r] * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = &g / n as f64;
                    let ga = row.broadcast((n, g.ncols())).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::PickSum(a, idx) => {
                    let k = g[[0, 0]];
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] = k;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(parts) => {
                    let k = g[[0, 0]];
                    for p in parts {
                        acc(&mut grads, *p, Mat::from_elem(self.value(*p).raw_dim(), k));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry for a small graph builder.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let grads = {
            let mut t = Tape::new(store);
            let root = f(&mut t);
            t.backward(root)
        };
        let h = 1e-6;
        for id in store.ids() {
            let g = grads[id.0].as_ref().expect("parameter reached");
            for idx in 0..store.value(id).len() {
                let (r, c) = (idx / store.value(id).ncols(), idx % store.value(id).ncols());
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + h;
                let up = { let mut t = Tape::new(store); let v = f(&mut t); t.scalar(v) };
                store.value_mut(id)[[r, c]] = orig - h;
                let dn = { let mut t = Tape::new(store); let v = f(&mut t); t.scalar(v) };
                store.value_mut(id)[[r, c]] = orig;
                let num = (up - dn) / (2.0 * h);
                let ana = g[[r, c]];
                assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{}[{r},{c}]: {ana} vs {num}", store.name(id));
            }
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        let a = store.add_normal("a", 3, 4, 1.0, &mut rng);
        let b = store.add_normal("b", 4, 5, 1.0, &mut rng);
        let row = store.add_normal("row", 1, 5, 1.0, &mut rng);
        let table = store.add_normal("table", 6, 5, 1.0, &mut rng);
        let mask = array![[0.0, -1e9, 0.0], [0.0, 0.0, -1e9], [0.0, 0.0, 0.0]];
        check(&mut store, |t| {
            let (a, b, row, table) = (t.param(a), t.param(b), t.param(row), t.param(table));
            let ab = t.matmul(a, b);
            let x = t.add_row(ab, row);
            let x = t.mul_row(x, row);
            let x = t.gelu(x);
            let n = t.normalize_rows(x, 1e-5);
            let emb = t.gather(table, &[1, 4, 1]);
            let y = t.add(n, emb);
            let scores = t.matmul_t(y, y);
            let scores = t.scale(scores, 0.3);
            let scores = t.add_const(scores, &mask);
            let p = t.softmax_rows(scores);
            let z = t.matmul(p, y);
            let left = t.slice_cols(z, 0, 2);
            let right = t.slice_cols(z, 2, 5);
            let cat = t.concat_cols(&[right, left]);
            let top = t.slice_rows(cat, 0, 2);
            let stacked = t.concat_rows(&[cat, top]);
            let pooled = t.mean_rows(stacked);
            let lp = t.log_softmax_rows(stacked);
            let picked = t.pick_sum(lp, &[0, 1, 4, 2, 3]);
            t.sum(&[picked, pooled])
        });
    }

    #[test]
    fn unreached_parameters_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let a = store.add_normal("a", 2, 2, 1.0, &mut rng);
        let _unused = store.add_normal("b", 2, 2, 1.0, &mut rng);
        let mut t = Tape::new(&store);
        let v = t.param(a);
        let root = t.sum(&[v]);
        let g = t.backward(root);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }
}
