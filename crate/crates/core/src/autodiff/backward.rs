use super::array::{gemm, Array};
use super::graph::{Graph, Op, Var};
use super::kernels;
use crate::error::{Error, Result};

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when no gradient-carrying path reaches `v`.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Array>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(Array::new(shape.to_vec(), delta).expect("gradient shape")),
    }
}

impl Graph {
    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Array::new(self.shape(root).to_vec(), vec![1.0]).unwrap());

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| &self.nodes[v.0].value;

            match &node.op {
                Op::Leaf | Op::StopGradient(_) | Op::Derived { .. } => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (val(a), val(b));
                    let (m, k, n) = (x.rows(), x.cols(), y.cols());
                    if needs(a) {
                        let mut d = vec![0.0; m * k];
                        gemm(m, n, k, gd, false, y.data(), true, &mut d, false);
                        accumulate(&mut grads[a.0], x.shape(), d);
                    }
                    if needs(b) {
                        let mut d = vec![0.0; k * n];
                        gemm(k, m, n, x.data(), true, gd, false, &mut d, false);
                        accumulate(&mut grads[b.0], y.shape(), d);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (x, y) = (val(a), val(b));
                    let (m, k, n) = (x.rows(), x.cols(), y.rows());
                    if needs(a) {
                        let mut d = vec![0.0; m * k];
                        gemm(m, n, k, gd, false, y.data(), false, &mut d, false);
                        accumulate(&mut grads[a.0], x.shape(), d);
                    }
                    if needs(b) {
                        let mut d = vec![0.0; n * k];
                        gemm(n, m, k, gd, true, x.data(), false, &mut d, false);
                        accumulate(&mut grads[b.0], y.shape(), d);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.shape(), gd.to_vec());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.shape(), gd.iter().map(|v| sign * v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let d = gd.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads[a.0], g.shape(), d);
                    }
                    if needs(b) {
                        let d = gd.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads[b.0], g.shape(), d);
                    }
                }
                Op::AddRow(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.shape(), gd.to_vec());
                    }
                    if needs(b) {
                        let n = val(b).len();
                        let mut d = vec![0.0; n];
                        for row in gd.chunks_exact(n) {
                            for (o, r) in d.iter_mut().zip(row) {
                                *o += r;
                            }
                        }
                        accumulate(&mut grads[b.0], val(b).shape(), d);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g.shape(), gd.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(a, _) => accumulate(&mut grads[a.0], g.shape(), gd.to_vec()),
                Op::Sum(a) | Op::Mean(a) => {
                    let n = val(a).len();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        gd[0] / n as f64
                    } else {
                        gd[0]
                    };
                    accumulate(&mut grads[a.0], val(a).shape(), vec![s; n]);
                }
                Op::Exp(a) => {
                    let d = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::Log(a) => {
                    let d = gd.iter().zip(val(a).data()).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::Softplus(a) => {
                    let d = gd
                        .iter()
                        .zip(val(a).data())
                        .map(|(g, &x)| g * kernels::sigmoid(x))
                        .collect();
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::Gelu(a) => {
                    let d = gd
                        .iter()
                        .zip(val(a).data())
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let xv = val(x);
                    let (dx, dg, db) = kernels::layer_norm_backward(
                        xv.data(),
                        val(gamma).data(),
                        gd,
                        xv.cols(),
                        *eps,
                    );
                    if needs(x) {
                        accumulate(&mut grads[x.0], xv.shape(), dx);
                    }
                    if needs(gamma) {
                        accumulate(&mut grads[gamma.0], val(gamma).shape(), dg);
                    }
                    if needs(beta) {
                        accumulate(&mut grads[beta.0], val(beta).shape(), db);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let p = node.value.data();
                    let n = node.value.cols();
                    let mut d = vec![0.0; p.len()];
                    for ((pr, gr), dr) in p
                        .chunks_exact(n)
                        .zip(gd.chunks_exact(n))
                        .zip(d.chunks_exact_mut(n))
                    {
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::LogSoftmaxRows(a) => {
                    let lp = node.value.data();
                    let n = node.value.cols();
                    let mut d = vec![0.0; lp.len()];
                    for ((lr, gr), dr) in lp
                        .chunks_exact(n)
                        .zip(gd.chunks_exact(n))
                        .zip(d.chunks_exact_mut(n))
                    {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] = gr[j] - lr[j].exp() * gs;
                        }
                    }
                    accumulate(&mut grads[a.0], g.shape(), d);
                }
                Op::GatherRows { table, idx } => {
                    let t = val(table);
                    let n = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[table.0], t.shape(), d);
                }
                Op::PickCols { x, cols } => {
                    let xv = val(x);
                    let n = xv.cols();
                    let mut d = vec![0.0; xv.len()];
                    for (r, &c) in cols.iter().enumerate() {
                        d[r * n + c] += gd[r];
                    }
                    accumulate(&mut grads[x.0], xv.shape(), d);
                }
                Op::SegmentSum { x, lens } => {
                    let mut d = Vec::with_capacity(val(x).len());
                    for (s, &l) in lens.iter().enumerate() {
                        d.extend(std::iter::repeat_n(gd[s], l));
                    }
                    accumulate(&mut grads[x.0], val(x).shape(), d);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    segs,
                    heads,
                } => {
                    let qv = val(q);
                    let (dq, dk, dv) = kernels::attention_backward(
                        qv.data(),
                        val(k).data(),
                        val(v).data(),
                        gd,
                        qv.cols(),
                        segs,
                        *heads,
                    );
                    if needs(q) {
                        accumulate(&mut grads[q.0], qv.shape(), dq);
                    }
                    if needs(k) {
                        accumulate(&mut grads[k.0], qv.shape(), dk);
                    }
                    if needs(v) {
                        accumulate(&mut grads[v.0], qv.shape(), dv);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// `∂root/∂leaf` for each requested node; zeros where no
    /// gradient-carrying path exists.
    pub fn grad(&self, root: Var, wrt: &[Var]) -> Result<Vec<Array>> {
        let mut gs = self.backward(root)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                gs.take(v)
                    .unwrap_or_else(|| Array::zeros(self.shape(v)))
            })
            .collect())
    }
}
