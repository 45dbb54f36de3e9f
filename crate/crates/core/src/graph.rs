//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough cached state to run its adjoint. [`Graph::backward`]
//! walks the tape once in reverse. Vectors are `[1, k]` or `[n, 1]` arrays and
//! scalars are `[1, 1]`.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Exp(Var),
    Recip(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Rows(Vec<(Var, usize)>),
    RowSumSq(Var),
    ColSum(Var),
    Sum(Var),
    MaxRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// 0.5 (1 + tanh u) written as sigmoid(2u): one `exp` instead of `tanh`.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub fn softmax_rows_inplace(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulTN(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `x[n, k] + row[1, k]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        let rg = self.rg(&[x, row]);
        self.push(v, Op::AddRow(x, row), rg)
    }

    /// `x[n, k] + col[n, 1]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let v = self.value(x) + self.value(col);
        let rg = self.rg(&[x, col]);
        self.push(v, Op::AddCol(x, col), rg)
    }

    /// `x[n, k] * col[n, 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let v = self.value(x) * self.value(col);
        let rg = self.rg(&[x, col]);
        self.push(v, Op::MulCol(x, col), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// `x * s` for a `[1, 1]` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let v = self.value(x) * self.value(s)[[0, 0]];
        let rg = self.rg(&[x, s]);
        self.push(v, Op::ScaleBy(x, s), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        let rg = self.rg(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::recip);
        let rg = self.rg(&[x]);
        self.push(v, Op::Recip(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a * a);
        let rg = self.rg(&[x]);
        self.push(v, Op::Square(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        softmax_rows_inplace(&mut v);
        let rg = self.rg(&[x]);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise layer normalization with `[1, k]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let k = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / k;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|a| (a - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(&[x]);
        self.push(v, Op::SliceCols(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of `sources[i].0`.
    pub fn rows(&mut self, sources: &[(Var, usize)]) -> Var {
        let k = sources.first().map_or(0, |(v, _)| self.value(*v).ncols());
        let mut v = Array2::zeros((sources.len(), k));
        for (i, &(src, r)) in sources.iter().enumerate() {
            v.row_mut(i).assign(&self.value(src).row(r));
        }
        let mut uniq: Vec<Var> = sources.iter().map(|s| s.0).collect();
        uniq.sort_by_key(|v| v.0);
        uniq.dedup();
        let rg = self.rg(&uniq);
        self.push(v, Op::Rows(sources.to_vec()), rg)
    }

    /// Gathers rows `idx` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let sources: Vec<(Var, usize)> = idx.iter().map(|&i| (table, i)).collect();
        self.rows(&sources)
    }

    /// `[n, 1]` sums of squares per row.
    pub fn row_sum_sq(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        self.push(v, Op::RowSumSq(x), rg)
    }

    /// `[1, k]` column sums.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(&[x]);
        self.push(v, Op::ColSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// `[1, k]` coordinatewise max over rows.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.nrows() > 0, "max_rows over an empty matrix");
        let mut arg = vec![0usize; xv.ncols()];
        let mut v = xv.row(0).to_owned().insert_axis(Axis(0));
        for (i, row) in xv.rows().into_iter().enumerate().skip(1) {
            for (j, &a) in row.iter().enumerate() {
                if a > v[[0, j]] {
                    v[[0, j]] = a;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::MaxRows(x, arg), rg)
    }

    /// Summed (not averaged) softmax cross-entropy of `logits[n, c]` against
    /// one class index per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        softmax_rows_inplace(&mut probs);
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln())
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from `root`, seeding its adjoint with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if needs(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::MatMulTN(a, b) => {
                if needs(*a) {
                    acc(*a, val(*b).dot(&g.t()));
                }
                if needs(*b) {
                    acc(*b, val(*a).dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * val(*b));
                }
                if needs(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                if needs(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(x, c) => {
                acc(*x, g.clone());
                if needs(*c) {
                    acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulCol(x, c) => {
                if needs(*x) {
                    acc(*x, g * val(*c));
                }
                if needs(*c) {
                    acc(*c, (g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[[0, 0]];
                if needs(*x) {
                    acc(*x, g * sv);
                }
                if needs(*s) {
                    let d = (g * val(*x)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*x))
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d *= slope;
                        }
                    });
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*x))
                    .for_each(|d, &a| *d *= gelu_grad(a));
                acc(*x, d);
            }
            Op::Exp(x) => acc(*x, g * &node.value),
            Op::Recip(x) => acc(*x, -(g * &node.value * &node.value)),
            Op::Square(x) => acc(*x, g * val(*x) * 2.0),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g * y;
                let dot = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dot)
                    .for_each(|mut dr, yr, &s| {
                        Zip::from(&mut dr).and(&yr).for_each(|a, &yv| *a -= yv * s);
                    });
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if needs(*gain) {
                    acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let dxhat = g * val(*gain);
                    let k = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let is = inv_std[i];
                        Zip::from(&mut row)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &h| *o = is / k * (k * a - s1 - h * s2));
                    }
                    acc(*x, dx);
                }
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if needs(*p) {
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Rows(sources) => {
                let mut uniq: Vec<Var> = sources.iter().map(|s| s.0).collect();
                uniq.sort_by_key(|v| v.0);
                uniq.dedup();
                for src in uniq {
                    if !needs(src) {
                        continue;
                    }
                    let mut d = Array2::zeros(val(src).dim());
                    for (i, &(v, r)) in sources.iter().enumerate() {
                        if v == src {
                            let mut dr = d.row_mut(r);
                            dr += &g.row(i);
                        }
                    }
                    acc(src, d);
                }
            }
            Op::RowSumSq(x) => acc(*x, val(*x) * g * 2.0),
            Op::ColSum(x) => {
                let d = Array2::from_shape_fn(val(*x).dim(), |(_, j)| g[[0, j]]);
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::MaxRows(x, arg) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (j, &i) in arg.iter().enumerate() {
                    d[[i, j]] = g[[0, j]];
                }
                acc(*x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                acc(*logits, d * g[[0, 0]]);
            }
        }
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when disconnected.
    pub fn wrt(&self, g: &Graph, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(g.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
