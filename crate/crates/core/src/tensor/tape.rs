use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{usage, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;

pub enum NormMode<'a> {
    Train,
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel batch mean and (biased) variance from a training-mode norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Swish(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Arc<Vec<f64>>),
    Gather(Var, Arc<Vec<usize>>),
    ScatterSum(Var, Arc<Vec<usize>>),
    PointConv {
        k: Var,
        z: Var,
        q: Var,
        w: Var,
        idx: Arc<Vec<usize>>,
        outputs: usize,
        samples: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GroupMean(Var, Arc<Vec<f64>>),
    Mse(Var, Arc<Tensor>),
    SoftmaxCe(Var, Arc<Vec<usize>>, Vec<f64>),
    Sum(Var),
    Mean(Var),
    FlippedIdentity(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records values and the operations that produced them.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
    nonfinite: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients from one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter, summed over every copy placed on the tape, in
    /// parameter order.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        let mut order: Vec<&(ParamId, Var)> = self.params.iter().collect();
        order.sort_by_key(|(p, v)| (p.0, v.0));
        for &(pid, v) in order {
            let Some(g) = &self.grads[v.0] else { continue };
            match out.last_mut() {
                Some((last, acc)) if *last == pid => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                _ => out.push((pid, g.clone())),
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
            nonfinite: None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// A value treated as fixed data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Copies a stored parameter onto the tape; its gradient is reported by
    /// [`Grads::params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true, "param");
        self.params.push((id, v));
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return usage(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, ng, name))
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        };
        let ng = self.needs(a);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), "scale", |x| s * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.map(a, Op::Swish(a), "swish", |x| x * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), "softplus", softplus)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return usage(format!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            ng,
            "matmul",
        ))
    }

    /// `[n, c] + [c]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(b).shape() != [c] {
            return usage(format!(
                "add_bias: bias shape {:?} for {c} columns",
                self.value(b).shape()
            ));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (d, bb) in data[r * c..(r + 1) * c].iter_mut().zip(bv) {
                *d += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::AddBias(x, b),
            ng,
            "add_bias",
        ))
    }

    /// Multiplies row `r` of `x` by the fixed factor `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Arc<Vec<f64>>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if s.len() != n {
            return usage(format!("scale_rows: {} factors for {n} rows", s.len()));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for d in &mut data[r * c..(r + 1) * c] {
                *d *= s[r];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::ScaleRows(x, s),
            ng,
            "scale_rows",
        ))
    }

    /// `out[l, :] = src[idx[l], :]`.
    pub fn gather(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (m, c) = self.value(src).dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return usage(format!("gather: index {bad} out of {m} rows"));
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let ng = self.needs(src);
        let shape = vec![idx.len(), c];
        Ok(self.push(Tensor { shape, data }, Op::Gather(src, idx), ng, "gather"))
    }

    /// `out[idx[l], :] += src[l, :]` into `rows` output rows.
    pub fn scatter_sum(&mut self, src: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let (l, c) = self.value(src).dims2()?;
        if l != idx.len() || idx.iter().any(|&i| i >= rows) {
            return usage("scatter_sum: index list does not match source rows or targets");
        }
        let sv = self.value(src).data();
        let mut data = vec![0.0; rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..c {
                data[i * c + k] += sv[r * c + k];
            }
        }
        let ng = self.needs(src);
        let shape = vec![rows, c];
        Ok(self.push(
            Tensor { shape, data },
            Op::ScatterSum(src, idx),
            ng,
            "scatter_sum",
        ))
    }

    /// Neighbourhood convolution with a learned kernel basis.
    ///
    /// * `k`: `[J·kn, B]` basis values for each (output, neighbour) pair
    /// * `z`: `[S·M, C]` input features for `S` samples over `M` points
    /// * `q`: `[M]` quadrature weights
    /// * `w`: `[C_out, C·B]` mixing weights
    /// * `idx`: `J·kn` neighbour indices into `0..M`
    ///
    /// Returns `out[s·J + j, c'] = Σ_{c,β} w[c', c·B+β] Σ_t k[j·kn+t, β]·q[i]·z[s·M+i, c]`
    /// with `i = idx[j·kn+t]`.
    pub fn point_conv(
        &mut self,
        k: Var,
        z: Var,
        q: Var,
        w: Var,
        idx: Arc<Vec<usize>>,
        outputs: usize,
        samples: usize,
    ) -> Result<Var> {
        let (jk, b) = self.value(k).dims2()?;
        let (sm, c) = self.value(z).dims2()?;
        let (c_out, cb) = self.value(w).dims2()?;
        let m = self.value(q).len();
        if samples == 0 || outputs == 0 || jk % outputs != 0 || jk != idx.len() {
            return usage("point_conv: basis rows must be outputs × neighbours");
        }
        if sm != samples * m || cb != c * b || idx.iter().any(|&i| i >= m) {
            return usage(format!(
                "point_conv: inconsistent shapes z {:?}, q [{m}], w {:?}, basis {:?}",
                self.value(z).shape(),
                self.value(w).shape(),
                self.value(k).shape()
            ));
        }
        let kn = jk / outputs;
        let (kv, zv, qv, wv) = (
            self.value(k).data(),
            self.value(z).data(),
            self.value(q).data(),
            self.value(w).data(),
        );
        let mut out = vec![0.0; samples * outputs * c_out];
        let mut t = vec![0.0; cb];
        for s in 0..samples {
            for j in 0..outputs {
                conv_gather(&mut t, kv, zv, qv, &idx, s, j, kn, m, c, b);
                let row = &mut out[(s * outputs + j) * c_out..(s * outputs + j + 1) * c_out];
                for (co, o) in row.iter_mut().enumerate() {
                    let wr = &wv[co * cb..(co + 1) * cb];
                    *o = wr.iter().zip(&t).map(|(x, y)| x * y).sum();
                }
            }
        }
        let ng = self.needs(k) || self.needs(z) || self.needs(q) || self.needs(w);
        let shape = vec![samples * outputs, c_out];
        let op = Op::PointConv {
            k,
            z,
            q,
            w,
            idx,
            outputs,
            samples,
        };
        Ok(self.push(Tensor { shape, data: out }, op, ng, "point_conv"))
    }

    /// Per-column normalisation of `x: [N, C]` followed by `gamma·x̂ + beta`.
    /// Training mode also returns the batch statistics so the caller can
    /// update its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return usage("batchnorm: scale and shift need one entry per channel");
        }
        if n == 0 {
            return usage("batchnorm: empty batch");
        }
        let xv = self.value(x).data();
        let (mean, var, train) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for k in 0..c {
                        mean[k] += xv[r * c + k];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for k in 0..c {
                        let d = xv[r * c + k] - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return usage("batchnorm: running statistics have the wrong length");
                }
                (mean.data().to_vec(), var.data().to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for k in 0..c {
                let h = (xv[r * c + k] - mean[k]) * inv_std[k];
                xhat[r * c + k] = h;
                out[r * c + k] = gv[k] * h + bv[k];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        let v = self.push(
            Tensor {
                shape: vec![n, c],
                data: out,
            },
            op,
            ng,
            "batchnorm",
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// `[S·M, C] → [S, C]`: weighted mean over each block of `M = weights.len()` rows.
    pub fn group_mean(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let m = weights.len();
        let total: f64 = weights.iter().sum();
        if m == 0 || n % m != 0 || !(total > 0.0) {
            return usage("group_mean: rows must be a multiple of a positive weight vector");
        }
        let s = n / m;
        let xv = self.value(x).data();
        let mut out = vec![0.0; s * c];
        for si in 0..s {
            for (mi, w) in weights.iter().enumerate() {
                let r = si * m + mi;
                for k in 0..c {
                    out[si * c + k] += w * xv[r * c + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        let ng = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![s, c],
                data: out,
            },
            Op::GroupMean(x, weights),
            ng,
            "group_mean",
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return usage("mse: prediction and target shapes differ");
        }
        let n = target.len().max(1) as f64;
        let l: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(l), Op::Mse(pred, target), ng, "mse"))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return usage("softmax_cross_entropy: one label in 0..K per row");
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[r]] - mx - z.ln());
        }
        let ng = self.needs(logits);
        let op = Op::SoftmaxCe(logits, labels, probs);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            op,
            ng,
            "softmax_cross_entropy",
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// Identity whose backward pass negates the gradient. Exists only to show
    /// that the gradient audit catches a wrong backward rule.
    #[doc(hidden)]
    pub fn flipped_identity(&mut self, a: Var) -> Var {
        self.map(a, Op::FlippedIdentity(a), "flipped_identity", |x| x)
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return usage("tape consumed: backward already ran on this tape");
        }
        self.consumed = true;
        if let Some(name) = self.nonfinite {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {name}"
            )));
        }
        if self.value(loss).len() != 1 {
            return usage("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads {
            grads,
            params: std::mem::take(&mut self.params),
        })
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:expr) => {
                if want($v) {
                    let shape = val($v).shape().to_vec();
                    accumulate(&mut grads[$v.0], &shape, |$d: &mut [f64]| $body);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc!(*b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc!(*b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += gd[i] * bv[i]
                });
                acc!(*b, |d| for i in 0..d.len() {
                    d[i] += gd[i] * av[i]
                });
            }
            Op::Scale(a, s) => acc!(*a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += s * y)),
            Op::Relu(a) => {
                let av = val(*a).data();
                acc!(*a, |d| for i in 0..d.len() {
                    if av[i] > 0.0 {
                        d[i] += gd[i]
                    }
                });
            }
            Op::Swish(a) => {
                let av = val(*a).data();
                acc!(*a, |d| for i in 0..d.len() {
                    let s = sigmoid(av[i]);
                    d[i] += gd[i] * (s + av[i] * s * (1.0 - s))
                });
            }
            Op::Exp(a) => {
                let ov = node.value.data();
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += gd[i] * ov[i]
                });
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += 2.0 * gd[i] * av[i]
                });
            }
            Op::Softplus(a) => {
                let av = val(*a).data();
                acc!(*a, |d| for i in 0..d.len() {
                    d[i] += gd[i] * sigmoid(av[i])
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc!(*a, |d| {
                    // dA = G·Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                acc!(*b, |d| {
                    // dB = Aᵀ·G
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d[p * n + j] += a_ip * gd[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                acc!(*x, |d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += q));
                acc!(*b, |d| for (i, v) in gd.iter().enumerate() {
                    d[i % c] += v
                });
            }
            Op::ScaleRows(x, s) => {
                let c = node.value.shape()[1];
                acc!(*x, |d| for (i, v) in gd.iter().enumerate() {
                    d[i] += v * s[i / c]
                });
            }
            Op::Gather(src, idx) => {
                let c = node.value.shape()[1];
                acc!(*src, |d| for (l, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        d[i * c + k] += gd[l * c + k];
                    }
                });
            }
            Op::ScatterSum(src, idx) => {
                let c = node.value.shape()[1];
                acc!(*src, |d| for (l, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        d[l * c + k] += gd[i * c + k];
                    }
                });
            }
            Op::PointConv {
                k,
                z,
                q,
                w,
                idx,
                outputs,
                samples,
            } => self.point_conv_backward(gd, *k, *z, *q, *w, idx, *outputs, *samples, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gv = val(*gamma).data();
                acc!(*gamma, |d| for (i, v) in gd.iter().enumerate() {
                    d[i % c] += v * xhat[i]
                });
                acc!(*beta, |d| for (i, v) in gd.iter().enumerate() {
                    d[i % c] += v
                });
                acc!(*x, |d| {
                    if *train {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for (i, v) in gd.iter().enumerate() {
                            let dh = v * gv[i % c];
                            s1[i % c] += dh;
                            s2[i % c] += dh * xhat[i];
                        }
                        let nf = n as f64;
                        for (i, v) in gd.iter().enumerate() {
                            let k = i % c;
                            let dh = v * gv[k];
                            d[i] += inv_std[k] / nf * (nf * dh - s1[k] - xhat[i] * s2[k]);
                        }
                    } else {
                        for (i, v) in gd.iter().enumerate() {
                            d[i] += v * gv[i % c] * inv_std[i % c];
                        }
                    }
                });
            }
            Op::GroupMean(x, weights) => {
                let c = node.value.shape()[1];
                let m = weights.len();
                let total: f64 = weights.iter().sum();
                acc!(*x, |d| {
                    let n = d.len() / c;
                    for r in 0..n {
                        let (si, mi) = (r / m, r % m);
                        let f = weights[mi] / total;
                        for k in 0..c {
                            d[r * c + k] += f * gd[si * c + k];
                        }
                    }
                });
            }
            Op::Mse(p, target) => {
                let pv = val(*p).data();
                let n = target.len().max(1) as f64;
                acc!(*p, |d| for i in 0..d.len() {
                    d[i] += gd[0] * 2.0 * (pv[i] - target.data()[i]) / n
                });
            }
            Op::SoftmaxCe(lg, labels, probs) => {
                let k = val(*lg).shape()[1];
                let n = labels.len() as f64;
                acc!(*lg, |d| for i in 0..d.len() {
                    let onehot = if labels[i / k] == i % k { 1.0 } else { 0.0 };
                    d[i] += gd[0] * (probs[i] - onehot) / n
                });
            }
            Op::Sum(a) => acc!(*a, |d| d.iter_mut().for_each(|x| *x += gd[0])),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                acc!(*a, |d| d.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::FlippedIdentity(a) => acc!(*a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn point_conv_backward(
        &self,
        gd: &[f64],
        k: Var,
        z: Var,
        q: Var,
        w: Var,
        idx: &[usize],
        outputs: usize,
        samples: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (jk, b) = (val(k).shape()[0], val(k).shape()[1]);
        let c = val(z).shape()[1];
        let c_out = val(w).shape()[0];
        let m = val(q).len();
        let kn = jk / outputs;
        let cb = c * b;
        let (kv, zv, qv, wv) = (val(k).data(), val(z).data(), val(q).data(), val(w).data());
        let (nk, nz, nq, nw) = (
            self.nodes[k.0].needs_grad,
            self.nodes[z.0].needs_grad,
            self.nodes[q.0].needs_grad,
            self.nodes[w.0].needs_grad,
        );
        let mut dk = nk.then(|| vec![0.0; kv.len()]);
        let mut dz = nz.then(|| vec![0.0; zv.len()]);
        let mut dq = nq.then(|| vec![0.0; qv.len()]);
        let mut dw = nw.then(|| vec![0.0; wv.len()]);
        let mut t = vec![0.0; cb];
        let mut dt = vec![0.0; cb];
        for s in 0..samples {
            for j in 0..outputs {
                let go = &gd[(s * outputs + j) * c_out..(s * outputs + j + 1) * c_out];
                if let Some(dw) = dw.as_mut() {
                    conv_gather(&mut t, kv, zv, qv, idx, s, j, kn, m, c, b);
                    for (co, g) in go.iter().enumerate() {
                        if *g != 0.0 {
                            for (d, tv) in dw[co * cb..(co + 1) * cb].iter_mut().zip(&t) {
                                *d += g * tv;
                            }
                        }
                    }
                }
                if !(nk || nz || nq) {
                    continue;
                }
                dt.iter_mut().for_each(|v| *v = 0.0);
                for (co, g) in go.iter().enumerate() {
                    if *g != 0.0 {
                        for (d, wt) in dt.iter_mut().zip(&wv[co * cb..(co + 1) * cb]) {
                            *d += g * wt;
                        }
                    }
                }
                for tt in 0..kn {
                    let row = j * kn + tt;
                    let i = idx[row];
                    let qi = qv[i];
                    let krow = &kv[row * b..(row + 1) * b];
                    let zrow = &zv[(s * m + i) * c..(s * m + i + 1) * c];
                    let mut q_acc = 0.0;
                    for ci in 0..c {
                        let dtc = &dt[ci * b..(ci + 1) * b];
                        let kd: f64 = krow.iter().zip(dtc).map(|(x, y)| x * y).sum();
                        if let Some(dz) = dz.as_mut() {
                            dz[(s * m + i) * c + ci] += kd * qi;
                        }
                        q_acc += kd * zrow[ci];
                        if let Some(dk) = dk.as_mut() {
                            let f = zrow[ci] * qi;
                            if f != 0.0 {
                                for (d, y) in dk[row * b..(row + 1) * b].iter_mut().zip(dtc) {
                                    *d += f * y;
                                }
                            }
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        dq[i] += q_acc;
                    }
                }
            }
        }
        for (var, d) in [(k, dk), (z, dz), (q, dq), (w, dw)] {
            if let Some(d) = d {
                let shape = val(var).shape().to_vec();
                accumulate(&mut grads[var.0], &shape, |acc| {
                    acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b)
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_gather(
    t: &mut [f64],
    kv: &[f64],
    zv: &[f64],
    qv: &[f64],
    idx: &[usize],
    s: usize,
    j: usize,
    kn: usize,
    m: usize,
    c: usize,
    b: usize,
) {
    t.iter_mut().for_each(|v| *v = 0.0);
    for tt in 0..kn {
        let row = j * kn + tt;
        let i = idx[row];
        let qi = qv[i];
        let krow = &kv[row * b..(row + 1) * b];
        let zrow = &zv[(s * m + i) * c..(s * m + i + 1) * c];
        for ci in 0..c {
            let f = zrow[ci] * qi;
            if f == 0.0 {
                continue;
            }
            for (d, kk) in t[ci * b..(ci + 1) * b].iter_mut().zip(krow) {
                *d += f * kk;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}
