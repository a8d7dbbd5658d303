use std::fmt;
use std::sync::Arc;

use super::array::Array;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-only transformation applied to a gradient-blocked value.
pub type DerivedFn = Arc<dyn Fn(&Array) -> Result<Array> + Send + Sync>;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    StopGradient(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows {
        table: Var,
        idx: Arc<[usize]>,
    },
    PickCols {
        x: Var,
        cols: Arc<[usize]>,
    },
    SegmentSum {
        x: Var,
        lens: Arc<[usize]>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segs: Arc<[usize]>,
        heads: usize,
    },
    Derived {
        input: Var,
        name: &'static str,
        f: DerivedFn,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient(_) => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::SegmentSum { .. } => "segment_sum",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Derived { name, .. } => name,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::StopGradient(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a) => vec![*a],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { table, .. } => vec![*table],
            Op::PickCols { x, .. } => vec![*x],
            Op::SegmentSum { x, .. } => vec![*x],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Derived { input, .. } => vec![*input],
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
}

/// Define-by-run computation graph. Values are computed eagerly as nodes are
/// added; the recorded ops are replayed by [`Graph::recompute`] and walked in
/// reverse by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Replace a leaf's value. Downstream values are stale until
    /// [`Graph::recompute`] runs.
    pub fn set_leaf(&mut self, v: Var, value: Array) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return dim_err(format!(
                "leaf shape {:?} cannot take value of shape {:?}",
                node.value.shape(),
                value.shape()
            ));
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = match &op {
            Op::Leaf => unreachable!(),
            Op::StopGradient(_) | Op::Derived { .. } => false,
            other => other
                .inputs()
                .iter()
                .any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn matrix(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("{what}: expected a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    /// Identity in value; blocks every gradient routed through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        self.push(Op::StopGradient(a)).expect("stop_gradient is total")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.matrix(a, "matmul")?;
        let (k2, _) = self.matrix(b, "matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner extents {k} and {k2} differ ({:?} x {:?})",
                self.shape(a),
                self.shape(b)
            ));
        }
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.matrix(a, "matmul_nt")?;
        let (_, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return dim_err(format!("matmul_nt: inner extents {k} and {k2} differ"));
        }
        self.push(Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.push(Op::Mul(a, b))
    }

    /// Adds vector `b` (length n) to every row of matrix `a` ([m, n]).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.matrix(a, "add_row")?;
        if self.shape(b) != [n] {
            return dim_err(format!(
                "add_row: bias shape {:?} does not match row width {n}",
                self.shape(b)
            ));
        }
        self.push(Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c)).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddScalar(a, c)).expect("add_scalar is total")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a)).expect("sum is total")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a)).expect("mean is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a)).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        self.push(Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a)).expect("softplus is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.push(Op::Gelu(a)).expect("gelu is total")
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.matrix(x, "layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return dim_err(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match width {n}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        self.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.matrix(a, "softmax_rows")?;
        self.push(Op::SoftmaxRows(a))
    }

    /// Computed directly with max-shift, not as log∘softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.matrix(a, "log_softmax_rows")?;
        self.push(Op::LogSoftmaxRows(a))
    }

    /// Rows `idx` of `table`, stacked into `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, _) = self.matrix(table, "gather_rows")?;
        if idx.is_empty() {
            return dim_err("gather_rows: empty index list".into());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return dim_err(format!("gather_rows: row {bad} out of range for {rows} rows"));
        }
        self.push(Op::GatherRows {
            table,
            idx: idx.into(),
        })
    }

    /// Element `cols[r]` of every row `r`, as a vector of length `rows`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, n) = self.matrix(x, "pick_cols")?;
        if cols.len() != rows {
            return dim_err(format!("pick_cols: {} columns for {rows} rows", cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return dim_err(format!("pick_cols: column {bad} out of range for width {n}"));
        }
        self.push(Op::PickCols {
            x,
            cols: cols.into(),
        })
    }

    /// Sums consecutive runs of a vector: output `[lens.len()]`.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let total: usize = lens.iter().sum();
        if self.value(x).len() != total || lens.is_empty() || lens.contains(&0) {
            return dim_err(format!(
                "segment_sum: segments {lens:?} do not tile {} values",
                self.value(x).len()
            ));
        }
        self.push(Op::SegmentSum {
            x,
            lens: lens.into(),
        })
    }

    /// Multi-head causal self-attention over packed sequences.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[usize],
        heads: usize,
    ) -> Result<Var> {
        let (t, d) = self.matrix(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return dim_err(format!("causal_attention: {heads} heads do not divide {d}"));
        }
        if segs.iter().sum::<usize>() != t || segs.contains(&0) {
            return dim_err(format!("causal_attention: segments {segs:?} do not tile {t} rows"));
        }
        self.push(Op::CausalAttention {
            q,
            k,
            v,
            segs: segs.into(),
            heads,
        })
    }

    /// Forward-only transformation of a gradient-blocked input.
    ///
    /// The input must not require gradients (wrap it in
    /// [`Graph::stop_gradient`] first); the result never does.
    pub fn derived(&mut self, input: Var, name: &'static str, f: DerivedFn) -> Result<Var> {
        if self.requires_grad(input) {
            return Err(Error::Contract(format!(
                "derived op `{name}` has no derivative; its input must be gradient-blocked"
            )));
        }
        self.push(Op::Derived { input, name, f })
    }

    pub(crate) fn compute(&self, op: &Op) -> Result<Array> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let unary = |a: &Var, f: &dyn Fn(f64) -> f64| -> Array {
            let x = val(a);
            Array::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
                .expect("same shape")
        };
        let binary = |a: &Var, b: &Var, f: &dyn Fn(f64, f64) -> f64| -> Array {
            let (x, y) = (val(a), val(b));
            Array::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
            )
            .expect("same shape")
        };
        Ok(match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::StopGradient(a) => val(a).clone(),
            Op::MatMul(a, b) => {
                let (x, y) = (val(a), val(b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                Array::new(
                    vec![m, n],
                    kernels::matmul(m, k, n, x.data(), false, y.data(), false),
                )?
            }
            Op::MatMulNT(a, b) => {
                let (x, y) = (val(a), val(b));
                let (m, k, n) = (x.rows(), x.cols(), y.rows());
                Array::new(
                    vec![m, n],
                    kernels::matmul(m, k, n, x.data(), false, y.data(), true),
                )?
            }
            Op::Add(a, b) => binary(a, b, &|p, q| p + q),
            Op::Sub(a, b) => binary(a, b, &|p, q| p - q),
            Op::Mul(a, b) => binary(a, b, &|p, q| p * q),
            Op::AddRow(a, b) => {
                let (x, bias) = (val(a), val(b));
                let n = bias.len();
                let mut out = x.data().to_vec();
                for row in out.chunks_exact_mut(n) {
                    for (o, bv) in row.iter_mut().zip(bias.data()) {
                        *o += bv;
                    }
                }
                Array::new(x.shape().to_vec(), out)?
            }
            Op::Scale(a, c) => unary(a, &|v| v * c),
            Op::AddScalar(a, c) => unary(a, &|v| v + c),
            Op::Sum(a) => Array::scalar(val(a).sum()),
            Op::Mean(a) => Array::scalar(val(a).sum() / val(a).len() as f64),
            Op::Exp(a) => unary(a, &f64::exp),
            Op::Log(a) => unary(a, &f64::ln),
            Op::Softplus(a) => unary(a, &kernels::softplus),
            Op::Gelu(a) => unary(a, &kernels::gelu),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = val(x);
                Array::new(
                    xv.shape().to_vec(),
                    kernels::layer_norm_forward(
                        xv.data(),
                        val(gamma).data(),
                        val(beta).data(),
                        xv.cols(),
                        *eps,
                    ),
                )?
            }
            Op::SoftmaxRows(a) | Op::LogSoftmaxRows(a) => {
                let x = val(a);
                let n = x.cols();
                let mut out = vec![0.0; x.len()];
                let log = matches!(op, Op::LogSoftmaxRows(_));
                for (xr, or) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                    if log {
                        kernels::log_softmax_row(xr, or);
                    } else {
                        kernels::softmax_row(xr, or);
                    }
                }
                Array::new(x.shape().to_vec(), out)?
            }
            Op::GatherRows { table, idx } => {
                let t = val(table);
                let n = t.cols();
                let mut out = Vec::with_capacity(idx.len() * n);
                for &i in idx.iter() {
                    out.extend_from_slice(t.row(i));
                }
                Array::new(vec![idx.len(), n], out)?
            }
            Op::PickCols { x, cols } => {
                let xv = val(x);
                Array::new(
                    vec![cols.len()],
                    cols.iter().enumerate().map(|(r, &c)| xv.at(r, c)).collect(),
                )?
            }
            Op::SegmentSum { x, lens } => {
                let d = val(x).data();
                let mut out = Vec::with_capacity(lens.len());
                let mut off = 0;
                for &l in lens.iter() {
                    out.push(d[off..off + l].iter().sum());
                    off += l;
                }
                Array::new(vec![lens.len()], out)?
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segs,
                heads,
            } => {
                let qv = val(q);
                Array::new(
                    qv.shape().to_vec(),
                    kernels::attention_forward(
                        qv.data(),
                        val(k).data(),
                        val(v).data(),
                        qv.cols(),
                        segs,
                        *heads,
                    ),
                )?
            }
            Op::Derived { input, f, .. } => f(val(input))?,
        })
    }

    /// Replays every recorded op from the current leaf values.
    ///
    /// Stop-gradient nodes keep the value they had when recorded, so
    /// gradient-blocked coefficients stay frozen across the replay.
    pub fn recompute(&mut self) -> Result<()> {
        self.recompute_from(0, None)
    }

    /// Replays only the nodes that (transitively) depend on `leaf`.
    pub(crate) fn recompute_dependents(&mut self, leaf: Var, mask: &[bool]) -> Result<()> {
        self.recompute_from(leaf.0 + 1, Some(mask))
    }

    pub(crate) fn dependency_mask(&self, leaf: Var) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        mask[leaf.0] = true;
        for i in leaf.0 + 1..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::StopGradient(_)) {
                continue;
            }
            mask[i] = node.op.inputs().iter().any(|v| mask[v.0]);
        }
        mask
    }

    fn recompute_from(&mut self, start: usize, mask: Option<&[bool]>) -> Result<()> {
        for i in start..self.nodes.len() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            let op = match &self.nodes[i].op {
                Op::Leaf | Op::StopGradient(_) => continue,
                op => op.clone(),
            };
            let value = self.compute(&op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }
}
