//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the backward sweep simply walks the node
//! list in reverse. Loss functions with hand-derived gradients (CTC,
//! contrastive, diversity, mixture NLL) enter the tape through
//! [`Graph::custom_scalar`], which stores the local gradient computed
//! alongside the value.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, inv_std: Vec<f64> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Unfold { x: usize, kernel: usize, stride: usize },
    InterleaveRows(Vec<usize>),
    ReplaceRows { x: usize, fill: usize, rows: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Custom { parents: Vec<usize>, grads: Vec<Mat> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar with respect to every named leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Mat>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Mat) {
        self.0.insert(name.into(), grad);
    }

    /// Accumulates `other` into `self`, summing shared entries.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    names: Vec<(usize, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a named trainable leaf. Repeated calls with the same name
    /// return the same node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.named.insert(name.to_string(), v);
        self.names.push((v.0, name.to_string()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a.0, b.0))
    }

    /// `a + row`, where `row` is `1 x n` and broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(value, Op::Gelu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x: a.0, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x: a.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Sliding-window unfold used by strided 1-D convolutions: output row `t`
    /// is the concatenation of input rows `t*stride .. t*stride + kernel`.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize) -> Var {
        let x = self.value(a);
        let (t_in, c) = x.dim();
        assert!(t_in >= kernel, "unfold: {t_in} rows < kernel {kernel}");
        let t_out = (t_in - kernel) / stride + 1;
        let mut out = Mat::zeros((t_out, kernel * c));
        for t in 0..t_out {
            for j in 0..kernel {
                out.slice_mut(s![t, j * c..(j + 1) * c])
                    .assign(&x.row(t * stride + j));
            }
        }
        self.push(
            out,
            Op::Unfold {
                x: a.0,
                kernel,
                stride,
            },
        )
    }

    /// Interleaves equally shaped parts: `out[t * k + j] = parts[j][t]`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let k = parts.len();
        let (t, c) = self.value(parts[0]).dim();
        let mut out = Mat::zeros((t * k, c));
        for (j, p) in parts.iter().enumerate() {
            let v = self.value(*p);
            for r in 0..t {
                out.row_mut(r * k + j).assign(&v.row(r));
            }
        }
        self.push(out, Op::InterleaveRows(parts.iter().map(|p| p.0).collect()))
    }

    /// Replaces the listed rows of `a` with the single row `fill`.
    pub fn replace_rows(&mut self, a: Var, fill: Var, rows: &[usize]) -> Var {
        let mut out = self.value(a).clone();
        let f = self.value(fill).row(0).to_owned();
        for &r in rows {
            out.row_mut(r).assign(&f);
        }
        self.push(
            out,
            Op::ReplaceRows {
                x: a.0,
                fill: fill.0,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).mean().unwrap_or(0.0));
        self.push(value, Op::MeanAll(a.0))
    }

    /// A scalar node whose value and local gradients were computed outside
    /// the tape. `grads[i]` is d(value)/d(inputs[i]).
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, grads: Vec<Mat>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).dim(), g.dim(), "custom_scalar gradient shape");
        }
        self.push(
            Mat::from_elem((1, 1), value),
            Op::Custom {
                parents: inputs.iter().map(|v| v.0).collect(),
                grads,
            },
        )
    }

    /// d(loss)/d(leaf) for every named leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    let ga = &g * &self.nodes[*r].value;
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[*a].value, |gv, &x| {
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(node.value.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = g;
                    for ((mut row, yrow), is) in
                        ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                    {
                        let sum_g = row.sum();
                        let sum_gy: f64 = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        row.zip_mut_with(&yrow, |v, &yv| {
                            *v = is / n * (n * *v - sum_g - yv * sum_gy);
                        });
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(self.nodes[*x].value.dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::Unfold { x, kernel, stride } => {
                    let xv = &self.nodes[*x].value;
                    let c = xv.ncols();
                    let mut gx = Mat::zeros(xv.dim());
                    for t in 0..g.nrows() {
                        for j in 0..*kernel {
                            let mut dst = gx.row_mut(t * stride + j);
                            dst += &g.slice(s![t, j * c..(j + 1) * c]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::InterleaveRows(parts) => {
                    let k = parts.len();
                    for (j, p) in parts.iter().enumerate() {
                        let rows = self.nodes[*p].value.nrows();
                        let mut gp = Mat::zeros(self.nodes[*p].value.dim());
                        for r in 0..rows {
                            gp.row_mut(r).assign(&g.row(r * k + j));
                        }
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ReplaceRows { x, fill, rows } => {
                    let mut gx = g;
                    let mut gf = Mat::zeros((1, gx.ncols()));
                    let mut seen = vec![false; gx.nrows()];
                    for &r in rows {
                        if !seen[r] {
                            seen[r] = true;
                            let mut dst = gf.row_mut(0);
                            dst += &gx.row(r);
                            gx.row_mut(r).fill(0.0);
                        }
                    }
                    acc(&mut grads, *fill, gf);
                    acc(&mut grads, *x, gx);
                }
                Op::SumAll(a) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.nodes[*a].value.dim(), gv));
                }
                Op::MeanAll(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let gv = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Mat::from_elem(dim, gv));
                }
                Op::Custom { parents, grads: local } => {
                    let gv = g[[0, 0]];
                    for (p, lg) in parents.iter().zip(local) {
                        acc(&mut grads, *p, lg * gv);
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, name) in &self.names {
            let g = grads[*idx]
                .take()
                .unwrap_or_else(|| Mat::zeros(self.nodes[*idx].value.dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Numerically stable `log(sum(exp(x)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = values
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + values.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))` with `-inf` propagation.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of a graph-built scalar over all named leaves.
    fn check(build: impl Fn(&mut Graph, &BTreeMap<String, Mat>) -> Var, leaves: BTreeMap<String, Mat>) {
        let mut g = Graph::new();
        let loss = build(&mut g, &leaves);
        let grads = g.backward(loss);
        let h = 1e-5;
        for (name, value) in &leaves {
            let analytic = grads.get(name).unwrap();
            for idx in 0..value.len() {
                let (r, c) = (idx / value.ncols(), idx % value.ncols());
                let eval = |delta: f64| {
                    let mut perturbed = leaves.clone();
                    perturbed.get_mut(name).unwrap()[[r, c]] += delta;
                    let mut g = Graph::new();
                    let l = build(&mut g, &perturbed);
                    g.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{r},{c}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut leaves = BTreeMap::new();
        leaves.insert("x".to_string(), random(6, 3, &mut rng));
        leaves.insert("w".to_string(), random(6, 4, &mut rng));
        leaves.insert("b".to_string(), random(1, 4, &mut rng));
        leaves.insert("fill".to_string(), random(1, 3, &mut rng));
        leaves.insert("gain".to_string(), random(1, 2, &mut rng));
        check(
            |g, l| {
                let x = g.param("x", &l["x"]);
                let w = g.param("w", &l["w"]);
                let b = g.param("b", &l["b"]);
                let fill = g.param("fill", &l["fill"]);
                let gain = g.param("gain", &l["gain"]);
                let x = g.replace_rows(x, fill, &[1, 4, 4]);
                let u = g.unfold(x, 2, 2);
                let h = g.matmul(u, w);
                let h = g.add_row(h, b);
                let h = g.gelu(h);
                let h = g.layer_norm_rows(h, 1e-5);
                let a = g.slice_cols(h, 0, 2);
                let c = g.slice_cols(h, 2, 2);
                let a = g.mul_row(a, gain);
                let a = g.tanh(a);
                let ct = g.transpose(c);
                let att = g.matmul(a, ct);
                let att = g.softmax_rows(att);
                let mixed = g.matmul(att, c);
                let il = g.interleave_rows(&[mixed, a]);
                let ls = g.log_softmax_rows(il);
                let e = g.exp(ls);
                let prod = g.mul(e, ls);
                let cat = g.concat_cols(&[prod, il]);
                let r = g.relu(cat);
                let d = g.sub(r, cat);
                let d = g.scale(d, 0.3);
                let s = g.add(d, cat);
                g.mean_all(s)
            },
            leaves,
        );
    }

    #[test]
    fn custom_scalar_chains_upstream_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &array![[1.0, 2.0]]);
        let y = g.scale(x, 3.0);
        let c = g.custom_scalar(&[y], 0.0, vec![array![[1.0, -1.0]]]);
        let grads = g.backward(c);
        assert_eq!(grads.get("x").unwrap(), &array![[3.0, -3.0]]);
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, 0.5), 0.5);
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(Vec::<f64>::new()), f64::NEG_INFINITY);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let used = g.param("used", &random(2, 2, &mut rng));
        let _unused = g.param("unused", &random(3, 1, &mut rng));
        let l = g.sum_all(used);
        let grads = g.backward(l);
        assert_eq!(grads.get("unused").unwrap(), &Mat::zeros((3, 1)));
        let _ = rng.gen::<f64>();
    }
}
