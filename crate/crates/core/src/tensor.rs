//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (scalars are `1×1`, row vectors `1×n`). Nodes
//! are appended to a [`Graph`] in evaluation order; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients for every node that depends
//! on a parameter leaf. Constant-only subgraphs are skipped.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Affine(Var, Var, Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Elu1(Var),
    Gelu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    SegmentMean(Var, Arc<[Range<usize>]>),
    LayerNorm(Var, f64),
    RowCosine(Var, Var, f64),
    GatherRows(Var, Arc<[Option<usize>]>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Range<usize>]>,
        eps: f64,
    },
    MaskedSoftmax(Var),
    LoadPenalty {
        logits: Var,
        excess: Arc<[f64]>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf of `graph`, sorted by parameter id.
    /// Parameters that received no gradient are reported as zeros.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = graph
            .params
            .iter()
            .map(|(&id, &var)| {
                let g = match self.wrt(var) {
                    Some(g) => g.clone(),
                    None => Mat::zeros(graph.value(var).raw_dim()),
                };
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn row_major(m: &Mat) -> Vec<f64> {
    match m.as_slice() {
        Some(s) => s.to_vec(),
        None => m.iter().copied().collect(),
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU written as `x·σ(2u)`, `u = c(x + a·x³)`.
fn gelu(x: f64) -> f64 {
    x / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp());
    s + x * s * (1.0 - s) * 2.0 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Feature map used by linear attention: `elu(x) + 1`, strictly positive.
pub fn feature_map(x: &Mat) -> Mat {
    x.mapv(elu1)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients but is not backed by a parameter store.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf. Repeated calls with the same id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter read as a constant: gradients flow through it but never into it.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, false);
        self.frozen.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `1×n` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1×n row");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// `a * col` with `col` of shape `m×1` broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1, "mul_col expects an m×1 column");
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `b` a `1×k` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "affine bias must be a row");
        let mut v = self.value(x).dot(self.value(w));
        v += self.value(b);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Affine(x, w, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn elu1(&mut self, a: Var) -> Var {
        let v = feature_map(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Elu1(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Row sums, `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = (m.sum_axis(Axis(0)) / m.nrows() as f64).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Mean of each row range, stacked: `m×n → segments×n`.
    pub fn segment_mean(&mut self, a: Var, segments: Arc<[Range<usize>]>) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros((segments.len(), m.ncols()));
        for (i, r) in segments.iter().enumerate() {
            let block = m.slice(s![r.clone(), ..]);
            v.row_mut(i)
                .assign(&(block.sum_axis(Axis(0)) / r.len() as f64));
        }
        let ng = self.ng(a);
        self.push(v, Op::SegmentMean(a, segments), ng)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mu) * inv);
        }
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm(a, eps), ng)
    }

    /// Row-wise cosine similarity `m×n, m×n → m×1`, with norms floored at `eps`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.dim(), bm.dim(), "row_cosine shape mismatch");
        let mut v = Mat::zeros((am.nrows(), 1));
        for i in 0..am.nrows() {
            let (ra, rb) = (am.row(i), bm.row(i));
            let na = ra.dot(&ra).sqrt().max(eps);
            let nb = rb.dot(&rb).sqrt().max(eps);
            v[[i, 0]] = ra.dot(&rb) / (na * nb);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::RowCosine(a, b, eps), ng)
    }

    /// Output row `i` is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[Option<usize>]>) -> Var {
        self.gather_windows(a, index, 1)
    }

    /// Gather rows and lay every `window` consecutive gathered rows side by
    /// side, giving `(len / window) × (window · cols)`. `None` yields zeros.
    pub fn gather_windows(&mut self, a: Var, index: Arc<[Option<usize>]>, window: usize) -> Var {
        assert!(window > 0 && index.len() % window == 0, "index length must be a multiple of the window");
        let m = self.value(a).as_standard_layout();
        let c = m.ncols();
        let src_rows = m.as_slice().expect("standard layout");
        let mut v = Mat::zeros((index.len() / window, window * c));
        if c > 0 {
            let out = v.as_slice_mut().expect("fresh array");
            for (dst, src) in out.chunks_exact_mut(c).zip(index.iter()) {
                if let Some(src) = src {
                    dst.copy_from_slice(&src_rows[src * c..(src + 1) * c]);
                }
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, index), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), rows * cols, "reshape size mismatch");
        let v = Mat::from_shape_vec((rows, cols), row_major(m)).expect("shape checked");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Normalized linear attention on already feature-mapped queries and keys.
    ///
    /// Within each row segment, `out_i = q_i·(Σ_j k_jᵀ v_j) / (q_i·Σ_j k_j + eps)`.
    /// The key/value summary is accumulated once per segment, so the cost is
    /// linear in the segment length.
    pub fn linear_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Range<usize>]>,
        eps: f64,
    ) -> Var {
        let out = linear_attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            &segments,
            eps,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::LinearAttention {
                q,
                k,
                v,
                segments,
                eps,
            },
            ng,
        )
    }

    /// Row softmax restricted to `mask`; entries outside the mask are zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Var {
        let m = self.value(a);
        assert_eq!(m.dim(), mask.dim(), "mask shape mismatch");
        let mut v = Mat::zeros(m.raw_dim());
        for i in 0..m.nrows() {
            let max = m
                .row(i)
                .iter()
                .zip(mask.row(i))
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m.ncols() {
                if mask[[i, j]] {
                    let e = (m[[i, j]] - max).exp();
                    v[[i, j]] = e;
                    z += e;
                }
            }
            v.row_mut(i).mapv_inplace(|x| x / z);
        }
        let ng = self.ng(a);
        self.push(v, Op::MaskedSoftmax(a), ng)
    }

    /// Capacity penalty `Σ_j excess_j²` whose backward pass substitutes the
    /// soft count `Σ_b softmax(logits_b)_j` for the integer count.
    ///
    /// `excess_j = max(C_j − capacity, 0)` is computed by the caller from the
    /// hard top-K counts.
    pub fn load_penalty(&mut self, logits: Var, excess: Arc<[f64]>) -> Var {
        assert_eq!(self.value(logits).ncols(), excess.len());
        let v = Mat::from_elem((1, 1), excess.iter().map(|e| e * e).sum());
        let ng = self.ng(logits);
        self.push(v, Op::LoadPenalty { logits, excess }, ng)
    }

    /// Per-row diagonal Gaussian log-density of `z` under `(mu, logvar)`,
    /// `m×n → m×1`.
    pub fn gaussian_loglik(&mut self, z: Var, mu: Var, logvar: Var) -> Var {
        let n = self.value(z).ncols() as f64;
        let diff = self.sub(z, mu);
        let sq = self.square(diff);
        let neg_lv = self.scale(logvar, -1.0);
        let prec = self.exp(neg_lv);
        let maha = self.mul(sq, prec);
        let inner = self.add(maha, logvar);
        let summed = self.sum_cols(inner);
        let half = self.scale(summed, -0.5);
        self.add_scalar(half, -0.5 * n * LN_2PI)
    }

    pub fn backward_scalar(&self, out: Var) -> Gradients {
        let seed = Mat::ones(self.value(out).raw_dim());
        self.backward(&[(out, seed)])
    }

    /// Reverse pass seeded with upstream gradients for one or more outputs.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(
                g.dim(),
                self.value(*v).dim(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads[v.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Mat| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * val(*b));
                send(*b, g * val(*a));
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                send(*a, g * val(*r));
                send(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, c) => {
                send(*a, g * val(*c));
                send(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    send(*b, val(*a).t().dot(g));
                }
            }
            Op::Affine(x, w, b) => {
                if self.ng(*x) {
                    send(*x, g.dot(&val(*w).t()));
                }
                if self.ng(*w) {
                    send(*w, val(*x).t().dot(g));
                }
                if self.ng(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(val(*b)));
                }
                if self.ng(*b) {
                    send(*b, g.t().dot(val(*a)));
                }
            }
            Op::Square(a) => send(*a, g * &(val(*a) * 2.0)),
            Op::Exp(a) => send(*a, g * &node.value),
            Op::Log(a) => send(*a, g / val(*a)),
            Op::Elu1(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .and(&node.value)
                    .for_each(|d, &x, &y| {
                        if x <= 0.0 {
                            *d *= y;
                        }
                    });
                send(*a, d);
            }
            Op::Gelu(a) => send(*a, g * &val(*a).mapv(gelu_grad)),
            Op::Tanh(a) => send(*a, g * &node.value.mapv(|t| 1.0 - t * t)),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = 0.0;
                    }
                });
                send(*a, d);
            }
            Op::Sum(a) => send(*a, Mat::from_elem(val(*a).raw_dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let m = val(*a);
                send(*a, Mat::from_elem(m.raw_dim(), g[[0, 0]] / m.len() as f64));
            }
            Op::SumCols(a) => {
                let m = val(*a);
                send(*a, g.broadcast(m.raw_dim()).expect("m×1 broadcast").to_owned());
            }
            Op::MeanRows(a) => {
                let m = val(*a);
                let d = g.broadcast(m.raw_dim()).expect("1×n broadcast").to_owned()
                    / m.nrows() as f64;
                send(*a, d);
            }
            Op::SegmentMean(a, segments) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                for (i, r) in segments.iter().enumerate() {
                    let row = &g.row(i) / r.len() as f64;
                    for mut dst in d.slice_mut(s![r.clone(), ..]).rows_mut() {
                        dst += &row;
                    }
                }
                send(*a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Mat::zeros(x.raw_dim());
                let n = x.ncols() as f64;
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let mu = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.dot(&yr) / n;
                    for j in 0..x.ncols() {
                        d[[i, j]] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                send(*a, d);
            }
            Op::RowCosine(a, b, eps) => {
                let (am, bm) = (val(*a), val(*b));
                let mut da = Mat::zeros(am.raw_dim());
                let mut db = Mat::zeros(bm.raw_dim());
                for i in 0..am.nrows() {
                    let (ra, rb) = (am.row(i), bm.row(i));
                    let na_raw = ra.dot(&ra).sqrt();
                    let nb_raw = rb.dot(&rb).sqrt();
                    let na = na_raw.max(*eps);
                    let nb = nb_raw.max(*eps);
                    let cos = node.value[[i, 0]];
                    let gi = g[[i, 0]];
                    // The norm only contributes where it is above the floor.
                    let ka = if na_raw > *eps { cos / (na * na) } else { 0.0 };
                    let kb = if nb_raw > *eps { cos / (nb * nb) } else { 0.0 };
                    let inv = 1.0 / (na * nb);
                    for j in 0..am.ncols() {
                        da[[i, j]] = gi * (rb[j] * inv - ra[j] * ka);
                        db[[i, j]] = gi * (ra[j] * inv - rb[j] * kb);
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::GatherRows(a, index) => {
                let mut d = Mat::zeros(val(*a).raw_dim());
                let c = d.ncols();
                if c > 0 {
                    let g = g.as_standard_layout();
                    let gs = g.as_slice().expect("standard layout");
                    let ds = d.as_slice_mut().expect("fresh array");
                    for (row, src) in gs.chunks_exact(c).zip(index.iter()) {
                        if let Some(src) = src {
                            for (o, x) in ds[src * c..(src + 1) * c].iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
                send(*a, d);
            }
            Op::Reshape(a) => {
                let shape = val(*a).raw_dim();
                send(*a, Mat::from_shape_vec(shape, row_major(g)).expect("reshape inverse"));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    send(*p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    send(*p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::LinearAttention {
                q,
                k,
                v,
                segments,
                eps,
            } => {
                let (dq, dk, dv) = linear_attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.value,
                    g,
                    segments,
                    *eps,
                );
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::MaskedSoftmax(a) => {
                let p = &node.value;
                let mut d = Mat::zeros(p.raw_dim());
                for i in 0..p.nrows() {
                    let dot = p.row(i).dot(&g.row(i));
                    for j in 0..p.ncols() {
                        d[[i, j]] = p[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                send(*a, d);
            }
            Op::LoadPenalty { logits, excess } => {
                let l = val(*logits);
                let scale = g[[0, 0]];
                let mut d = Mat::zeros(l.raw_dim());
                for b in 0..l.nrows() {
                    let p = softmax_row(l.row(b).iter().copied());
                    let wsum: f64 = p.iter().zip(excess.iter()).map(|(p, e)| 2.0 * e * p).sum();
                    for j in 0..l.ncols() {
                        d[[b, j]] = scale * p[j] * (2.0 * excess[j] - wsum);
                    }
                }
                send(*logits, d);
            }
        }
    }
}

/// Numerically stable softmax of a sequence.
pub fn softmax_row(xs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Factorized linear attention; `q` and `k` must already be non-negative.
pub fn linear_attention_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    segments: &[Range<usize>],
    eps: f64,
) -> Mat {
    assert_eq!(q.dim(), k.dim(), "query/key shape mismatch");
    assert_eq!(q.nrows(), v.nrows(), "value row mismatch");
    let mut out = Mat::zeros((q.nrows(), v.ncols()));
    for r in segments {
        let qs = q.slice(s![r.clone(), ..]);
        let ks = k.slice(s![r.clone(), ..]);
        let vs = v.slice(s![r.clone(), ..]);
        let kv = ks.t().dot(&vs);
        let ksum = ks.sum_axis(Axis(0));
        let num = qs.dot(&kv);
        let den = qs.dot(&ksum) + eps;
        let mut o = out.slice_mut(s![r.clone(), ..]);
        Zip::from(o.rows_mut())
            .and(num.rows())
            .and(&den)
            .for_each(|mut o, n, &d| o.assign(&(&n / d)));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn linear_attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    out: &Mat,
    g: &Mat,
    segments: &[Range<usize>],
    eps: f64,
) -> (Mat, Mat, Mat) {
    let mut dq = Mat::zeros(q.raw_dim());
    let mut dk = Mat::zeros(k.raw_dim());
    let mut dv = Mat::zeros(v.raw_dim());
    for r in segments {
        let qs = q.slice(s![r.clone(), ..]);
        let ks = k.slice(s![r.clone(), ..]);
        let vs = v.slice(s![r.clone(), ..]);
        let os = out.slice(s![r.clone(), ..]);
        let gs = g.slice(s![r.clone(), ..]);
        let kv = ks.t().dot(&vs);
        let ksum = ks.sum_axis(Axis(0));
        let den = qs.dot(&ksum) + eps;
        let den_col = den.view().insert_axis(Axis(1));
        // d(out)/d(num) = 1/den; d(out)/d(den) = -out/den.
        let dnum = &gs / &den_col;
        let dden = -((&gs * &os).sum_axis(Axis(1)) / &den);
        let mut dqs = dnum.dot(&kv.t());
        for (mut row, &dd) in dqs.rows_mut().into_iter().zip(dden.iter()) {
            row.scaled_add(dd, &ksum);
        }
        let dkv = qs.t().dot(&dnum);
        let dksum = qs.t().dot(&dden);
        let mut dks = vs.dot(&dkv.t());
        for mut row in dks.rows_mut() {
            row += &dksum;
        }
        let dvs = ks.dot(&dkv);
        dq.slice_mut(s![r.clone(), ..]).assign(&dqs);
        dk.slice_mut(s![r.clone(), ..]).assign(&dks);
        dv.slice_mut(s![r.clone(), ..]).assign(&dvs);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Compare reverse-mode gradients of a scalar function of the given
    /// parameters against central differences.
    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, m)| store.add(format!("x{i}"), m))
            .collect();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
            let out = f(&mut g, &vars);
            let s = g.sum(out);
            (g, s)
        };
        let (g, out) = eval(&store);
        let grads = g.backward_scalar(out).params(&g);
        let h = 1e-5;
        for (id, analytic) in grads {
            for idx in 0..analytic.len() {
                let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = {
                    let (g, o) = eval(&store);
                    g.scalar(o)
                };
                store.get_mut(id)[[r, c]] = orig - h;
                let down = {
                    let (g, o) = eval(&store);
                    g.scalar(o)
                };
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "{} [{r},{c}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 3, 4);
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let t = g.tanh(m);
            let e = g.elu1(t);
            let gl = g.gelu(e);
            let sq = g.square(gl);
            let sc = g.scale(sq, 0.7);
            g.add_scalar(sc, 2.0)
        });
        check(vec![a.mapv(|x| x.abs() + 0.5)], |g, v| {
            let l = g.log(v[0]);
            let e = g.exp(l);
            g.mul(e, l)
        });
        check(vec![a * 3.0], |g, v| {
            let c = g.clamp(v[0], -1.0, 1.0);
            g.square(c)
        });
    }

    #[test]
    fn broadcast_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 5, 3);
        let r = randn(&mut rng, 1, 3);
        let c = randn(&mut rng, 5, 1);
        check(vec![a, r, c], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let x = g.mul_row(x, v[1]);
            let x = g.mul_col(x, v[2]);
            let sc = g.sum_cols(x);
            let mr = g.mean_rows(x);
            let seg = g.segment_mean(x, vec![0..2, 2..5].into());
            let a = g.mean(sc);
            let b = g.sum(mr);
            let s2 = g.square(seg);
            let c = g.sum(s2);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn affine_matches_matmul_plus_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 6, 3);
        let w = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 1, 4);
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.affine(v[0], v[1], v[2]);
            g.gelu(y)
        });
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
        let fused = g.affine(xv, wv, bv);
        let m = g.matmul(xv, wv);
        let split = g.add_row(m, bv);
        assert_eq!(g.value(fused), g.value(split));
    }

    #[test]
    fn gather_windows_equals_gather_then_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, 4, 3);
        let index: Arc<[Option<usize>]> = vec![Some(1), None, Some(3), Some(1), Some(0), None].into();
        let idx = index.clone();
        check(vec![a.clone()], move |g, v| {
            let w = g.gather_windows(v[0], idx.clone(), 2);
            g.square(w)
        });
        let mut g = Graph::new();
        let av = g.constant(a);
        let fused = g.gather_windows(av, index.clone(), 3);
        let rows = g.gather_rows(av, index);
        let split = g.reshape(rows, 2, 9);
        assert_eq!(g.value(fused), g.value(split));
    }

    #[test]
    fn matmuls_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 3, 2);
        let c = randn(&mut rng, 5, 3);
        check(vec![a, b, c], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let act = g.matmul_bt(v[0], v[2]);
            let r = g.reshape(ab, 2, 4);
            let r = g.square(r);
            let cat = g.concat_cols(&[act, act]);
            let rows = g.concat_rows(&[cat, cat]);
            let gath = g.gather_rows(rows, vec![Some(0), None, Some(7), Some(0)].into());
            let t = g.tanh(gath);
            let x = g.sum(t);
            let y = g.sum(r);
            g.add(x, y)
        });
    }

    #[test]
    fn fused_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 6, 4);
        let b = randn(&mut rng, 6, 4);
        let w = randn(&mut rng, 6, 4);
        check(vec![a.clone(), b.clone(), w.clone()], |g, v| {
            let ln = g.layer_norm(v[0], 1e-5);
            let lw = g.mul(ln, v[2]);
            let cs = g.row_cosine(lw, v[1], 1e-8);
            g.square(cs)
        });
        check(vec![a.clone(), b.clone(), w.clone()], |g, v| {
            let q = g.elu1(v[0]);
            let k = g.elu1(v[1]);
            let o = g.linear_attention(q, k, v[2], vec![0..2, 2..6].into(), 1e-6);
            g.mul(o, o)
        });
        let mask = Arc::new(Array2::from_shape_fn((6, 4), |(i, j)| (i + j) % 3 != 0));
        check(vec![a.clone(), w.clone()], move |g, v| {
            let p = g.masked_softmax(v[0], mask.clone());
            g.mul(p, v[1])
        });
        let lv = a.mapv(|x| 0.3 * x);
        check(vec![b, w, lv], |g, v| g.gaussian_loglik(v[0], v[1], v[2]));
    }

    #[test]
    fn attention_segments_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = feature_map(&randn(&mut rng, 7, 3));
        let k = feature_map(&randn(&mut rng, 7, 3));
        let v = randn(&mut rng, 7, 2);
        let joint = linear_attention_forward(&q, &k, &v, &[0..3, 3..7], 1e-6);
        let first = linear_attention_forward(
            &q.slice(s![0..3, ..]).to_owned(),
            &k.slice(s![0..3, ..]).to_owned(),
            &v.slice(s![0..3, ..]).to_owned(),
            &[0..3],
            1e-6,
        );
        assert_eq!(joint.slice(s![0..3, ..]), first);
    }

    #[test]
    fn load_penalty_uses_soft_count_gradient() {
        let l = Mat::from_shape_vec((2, 3), vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]).unwrap();
        let excess: Arc<[f64]> = vec![1.0, 0.0, 2.0].into();
        let mut store = ParamStore::new();
        let id = store.add("l", l.clone());
        let mut g = Graph::new();
        let lv = g.param(&store, id);
        let out = g.load_penalty(lv, excess.clone());
        assert_eq!(g.scalar(out), 5.0);
        let grads = g.backward_scalar(out).params(&g);
        // Surrogate Σ_j 2·excess_j·Σ_b softmax(l_b)_j differentiated numerically.
        let surrogate = |m: &Mat| -> f64 {
            (0..m.nrows())
                .map(|b| {
                    softmax_row(m.row(b).iter().copied())
                        .iter()
                        .zip(excess.iter())
                        .map(|(p, e)| 2.0 * e * p)
                        .sum::<f64>()
                })
                .sum()
        };
        let h = 1e-6;
        for b in 0..2 {
            for j in 0..3 {
                let mut up = l.clone();
                up[[b, j]] += h;
                let mut dn = l.clone();
                dn[[b, j]] -= h;
                let num = (surrogate(&up) - surrogate(&dn)) / (2.0 * h);
                assert!((grads[0].1[[b, j]] - num).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::ones((2, 2)));
        let s = g.sum(c);
        let grads = g.backward_scalar(s);
        assert!(grads.wrt(c).is_none());
    }
}
