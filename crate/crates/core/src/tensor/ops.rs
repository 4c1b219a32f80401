use super::tape::{GradSink, SeqLayout};
use super::{gemm, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) enum Op<F: Scalar> {
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    BceWithLogits { logits: Var, targets: Vec<F>, pos_weight: F },
    Attention { qkv: Var, layout: SeqLayout, heads: usize, keys: Vec<Vec<usize>>, probs: Vec<F> },
    ConcatCols { a: Var, b: Var },
    VStack { a: Var, b: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    GroupMeanRows { x: Var, layout: SeqLayout },
    AddRows { x: Var, p: Var },
    GateRows { x: Var, gate: Var, rows: Vec<usize>, keep: Vec<bool> },
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Cross-entropy `-log softmax(logits)[label]` evaluated in double precision.
pub fn cross_entropy_value(logits: &[f32], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            what: "class label",
            index: label,
            len: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("cross-entropy on non-finite logits".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label] as f64)
}

impl<F: Scalar> Tape<F> {
    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push_op(value, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `x·w + b` for `x: m×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.mat_dims(x);
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::dims("linear", self.shape(x), &sw));
        }
        let n = sw[1];
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(Error::dims("linear bias", &sw, self.shape(b)));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let value = Tensor::new([m, n], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(value, &inputs, Op::Linear { x, w, b, m, k, n }))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dims(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map_unary(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(v, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.map_unary(a, |x| x * c);
        self.push_op(v, &[a], Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum::<F>() / F::of(t.len().max(1) as f64);
        self.push_op(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.max(F::zero()));
        self.push_op(v, &[a], Op::Relu(a))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (F::of(GELU_C), F::of(GELU_A));
        let half = F::of(0.5);
        let v = self.map_unary(a, |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        self.push_op(v, &[a], Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, sigmoid);
        self.push_op(v, &[a], Op::Sigmoid(a))
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push_op(out, &[a], Op::Softmax(a)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dims("layernorm", t.shape(), self.shape(gamma)));
        }
        let rows = t.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        let inv_d = F::one() / F::of(d as f64);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Mean cross-entropy of `logits` (`[C]` or `[B × C]`) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b {
            return Err(Error::dims("cross_entropy labels", t.shape(), &[labels.len()]));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    len: c,
                });
            }
            let row: Vec<f64> = t.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("cross-entropy on non-finite logits".into()));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += max + z.ln() - row[y];
            for (k, v) in row.iter().enumerate() {
                probs[r * c + k] = F::of((v - max).exp() / z);
            }
        }
        let value = Tensor::scalar(F::of(total / b.max(1) as f64));
        Ok(self.push_op(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    /// `pos_weight` scales the positive-class term.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F], pos_weight: F) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::dims("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let n = F::of(t.len().max(1) as f64);
        let mut total = F::zero();
        for (&z, &y) in t.data().iter().zip(targets) {
            total += pos_weight * y * softplus(-z) + (F::one() - y) * softplus(z);
        }
        let value = Tensor::scalar(total / n);
        Ok(self.push_op(
            value,
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
        ))
    }

    /// Multi-head self-attention over packed sequences.
    ///
    /// `qkv` holds `[q | k | v]` per row (`rows × 3d`). Keys whose
    /// `key_keep` bit is false get no attention weight and their value rows
    /// are never read, so a masked sequence computes exactly what the
    /// sequence with those rows removed would.
    pub fn attention(
        &mut self,
        qkv: Var,
        layout: &SeqLayout,
        heads: usize,
        key_keep: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(qkv);
        let (rows, d3) = (t.rows(), t.cols());
        if d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 || layout.total_rows() != rows {
            return Err(Error::dims("attention", t.shape(), &[layout.total_rows(), heads]));
        }
        if let Some(k) = key_keep {
            if k.len() != rows {
                return Err(Error::dims("attention mask", t.shape(), &[k.len()]));
            }
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let src = t.data();
        let mut out = vec![F::zero(); rows * d];
        let mut keys_all = Vec::with_capacity(layout.count());
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in 0..layout.count() {
            let (st, len) = (layout.start(s), layout.len_of(s));
            let keys: Vec<usize> = (0..len)
                .filter(|&j| key_keep.is_none_or(|k| k[st + j]))
                .map(|j| st + j)
                .collect();
            if keys.is_empty() {
                return Err(Error::Contract(format!("sequence {s} has every key masked")));
            }
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in st..st + len {
                    let q = &src[i * d3 + qo..i * d3 + qo + dh];
                    scores.clear();
                    scores.extend(keys.iter().map(|&j| dot(q, &src[j * d3 + ko..j * d3 + ko + dh]) * scale));
                    softmax_in_place(&mut scores);
                    let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (&p, &j) in scores.iter().zip(&keys) {
                        axpy(p, &src[j * d3 + vo..j * d3 + vo + dh], o);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
            keys_all.push(keys);
        }
        let value = Tensor::new([rows, d], out)?;
        Ok(self.push_op(
            value,
            &[qkv],
            Op::Attention {
                qkv,
                layout: layout.clone(),
                heads,
                keys: keys_all,
                probs,
            },
        ))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dims("concat_cols", ta.shape(), tb.shape()));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let v = Tensor::new([m, p + q], out)?;
        Ok(self.push_op(v, &[a, b], Op::ConcatCols { a, b }))
    }

    /// `a` stacked on top of `b`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::vstack(&[self.value(a), self.value(b)])?;
        Ok(self.push_op(v, &[a, b], Op::VStack { a, b }))
    }

    /// Selects (and possibly repeats) rows of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        let mut out = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gather row",
                    index: r,
                    len: n,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::new([rows.len(), t.cols()], out)?;
        Ok(self.push_op(v, &[x], Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Row mean of every sequence in `layout`: `[count × d]`.
    pub fn group_mean_rows(&mut self, x: Var, layout: &SeqLayout) -> Result<Var> {
        let t = self.value(x);
        if layout.total_rows() != t.rows() {
            return Err(Error::dims("group_mean_rows", t.shape(), &[layout.total_rows()]));
        }
        let d = t.cols();
        let mut out = vec![F::zero(); layout.count() * d];
        for s in 0..layout.count() {
            let (st, len) = (layout.start(s), layout.len_of(s));
            if len == 0 {
                return Err(Error::Contract("mean over an empty group".into()));
            }
            let acc = &mut out[s * d..(s + 1) * d];
            for r in st..st + len {
                axpy(F::one(), t.row(r), acc);
            }
            let inv = F::one() / F::of(len as f64);
            acc.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new([layout.count(), d], out)?;
        Ok(self.push_op(v, &[x], Op::GroupMeanRows { x, layout: layout.clone() }))
    }

    /// `y[r] = x[r] + p[r mod P]` for `p: P × d` (leading-batch broadcast).
    pub fn add_rows(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(p));
        let period = tp.rows();
        if tx.cols() != tp.cols() || period == 0 || tx.rows() % period != 0 {
            return Err(Error::dims("add_rows", tx.shape(), tp.shape()));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            axpy(F::one(), tp.row(r % period), out.row_mut(r));
        }
        Ok(self.push_op(out, &[x, p], Op::AddRows { x, p }))
    }

    /// Hard row gate with a straight-through gradient.
    ///
    /// Row `rows[m]` of `x` is passed through when `keep[m]` and zeroed
    /// otherwise. The backward pass treats the gate as if it were `gate[m]`
    /// (a probability whose forward value has been replaced by the hard
    /// decision), so `gate` receives `<x_row, dy_row>`.
    pub fn gate_rows(&mut self, x: Var, gate: Var, rows: &[usize], keep: &[bool]) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gate));
        if rows.len() != keep.len() || tg.len() != rows.len() {
            return Err(Error::dims("gate_rows", &[rows.len(), keep.len()], tg.shape()));
        }
        let mut out = tx.clone();
        for (&r, &k) in rows.iter().zip(keep) {
            if r >= tx.rows() {
                return Err(Error::Index {
                    what: "gate row",
                    index: r,
                    len: tx.rows(),
                });
            }
            if !k {
                out.row_mut(r).fill(F::zero());
            }
        }
        Ok(self.push_op(
            out,
            &[x, gate],
            Op::GateRows {
                x,
                gate,
                rows: rows.to_vec(),
                keep: keep.to_vec(),
            },
        ))
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let inv = F::one() / z;
    row.iter_mut().for_each(|v| *v *= inv);
}

impl<F: Scalar> Op<F> {
    /// Propagates the output gradient `g` to the op's inputs.
    pub(crate) fn backward(&self, out: &Tensor<F>, g: &Tensor<F>, sink: &mut GradSink<'_, F>) {
        match self {
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if sink.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, sink.value(*b).data(), true, &mut da, false);
                    sink.add(*a, Tensor::new([m, k], da).expect("shape"));
                }
                if sink.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(k, m, n, sink.value(*a).data(), true, g.data(), false, &mut db, false);
                    sink.add(*b, Tensor::new([k, n], db).expect("shape"));
                }
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if sink.wants(*x) {
                    let mut dx = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, sink.value(*w).data(), true, &mut dx, false);
                    let shape = sink.value(*x).shape().to_vec();
                    sink.add(*x, Tensor::new(shape, dx).expect("shape"));
                }
                let nodes = sink.nodes;
                if let Some(dw) = sink.buf(*w) {
                    let xs = nodes[x.0].value.data();
                    gemm(k, m, n, xs, true, g.data(), false, dw.data_mut(), true);
                }
                if let Some(b) = b {
                    if let Some(db) = sink.buf(*b) {
                        for r in 0..m {
                            axpy(F::one(), g.row(r), db.data_mut());
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                sink.add(*a, g.clone());
                sink.add(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if sink.wants(*a) {
                    let vb = sink.value(*b);
                    let d = Tensor::from_fn(vb.shape().to_vec(), |i| g.data()[i] * vb.data()[i]);
                    sink.add(*a, d);
                }
                if sink.wants(*b) {
                    let va = sink.value(*a);
                    let d = Tensor::from_fn(va.shape().to_vec(), |i| g.data()[i] * va.data()[i]);
                    sink.add(*b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * *c);
                sink.add(*a, d);
            }
            Op::Sum(a) => {
                let shape = sink.value(*a).shape().to_vec();
                sink.add(*a, Tensor::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let va = sink.value(*a);
                let v = g.item() / F::of(va.len().max(1) as f64);
                let shape = va.shape().to_vec();
                sink.add(*a, Tensor::full(shape, v));
            }
            Op::Relu(a) => {
                let d = Tensor::from_fn(out.shape().to_vec(), |i| {
                    if out.data()[i] > F::zero() {
                        g.data()[i]
                    } else {
                        F::zero()
                    }
                });
                sink.add(*a, d);
            }
            Op::Gelu(a) => {
                let (c, k) = (F::of(GELU_C), F::of(GELU_A));
                let half = F::of(0.5);
                let three = F::of(3.0);
                let va = sink.value(*a);
                let d = Tensor::from_fn(va.shape().to_vec(), |i| {
                    let x = va.data()[i];
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    g.data()[i] * (half * (F::one() + t) + half * x * dt)
                });
                sink.add(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = Tensor::from_fn(out.shape().to_vec(), |i| {
                    let s = out.data()[i];
                    g.data()[i] * s * (F::one() - s)
                });
                sink.add(*a, d);
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(out.shape().to_vec());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let s = dot(y, gy);
                    for (o, (&yi, &gi)) in d.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                        *o = yi * (gi - s);
                    }
                }
                sink.add(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.cols();
                let rows = out.rows();
                let gam = sink.value(*gamma).data().to_vec();
                if sink.wants(*x) {
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dx = Tensor::zeros(out.shape().to_vec());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        let row = dx.row_mut(r);
                        for c in 0..d {
                            row[c] = rstd[r] * (gr[c] * gam[c] - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    sink.add(*x, dx);
                }
                if let Some(dg) = sink.buf(*gamma) {
                    let dg = dg.data_mut();
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g.data()[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(db) = sink.buf(*beta) {
                    for r in 0..rows {
                        axpy(F::one(), g.row(r), db.data_mut());
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len().max(1);
                let scale = g.item() / F::of(b as f64);
                let shape = sink.value(*logits).shape().to_vec();
                let c = probs.len() / b;
                let mut d = Tensor::new(shape, probs.clone()).expect("shape");
                for (r, &y) in labels.iter().enumerate() {
                    d.data_mut()[r * c + y] -= F::one();
                }
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                sink.add(*logits, d);
            }
            Op::BceWithLogits { logits, targets, pos_weight } => {
                let z = sink.value(*logits);
                let scale = g.item() / F::of(targets.len().max(1) as f64);
                let d = Tensor::from_fn(z.shape().to_vec(), |i| {
                    let (s, y) = (sigmoid(z.data()[i]), targets[i]);
                    scale * (*pos_weight * y * (s - F::one()) + (F::one() - y) * s)
                });
                sink.add(*logits, d);
            }
            Op::Attention { qkv, layout, heads, keys, probs } => {
                let nodes = sink.nodes;
                let src = nodes[qkv.0].value.data();
                let Some(dq) = sink.buf(*qkv) else { return };
                let dsrc = dq.data_mut();
                let d = out.cols();
                let d3 = 3 * d;
                let dh = d / heads;
                let scale = F::one() / F::of(dh as f64).sqrt();
                let mut p_off = 0;
                let mut ds = Vec::new();
                for (s, keys) in keys.iter().enumerate() {
                    let (st, len) = (layout.start(s), layout.len_of(s));
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in st..st + len {
                            let p = &probs[p_off..p_off + keys.len()];
                            p_off += keys.len();
                            let dout = &g.data()[i * d + h * dh..i * d + (h + 1) * dh];
                            ds.clear();
                            ds.extend(keys.iter().map(|&j| dot(dout, &src[j * d3 + vo..j * d3 + vo + dh])));
                            let pd = dot(p, &ds);
                            for (dsj, &pj) in ds.iter_mut().zip(p) {
                                *dsj = pj * (*dsj - pd) * scale;
                            }
                            for ((&j, &pj), &dsj) in keys.iter().zip(p).zip(&ds) {
                                // dv_j += p_ij dO_i
                                axpy(pj, dout, &mut dsrc[j * d3 + vo..j * d3 + vo + dh]);
                                // dq_i += ds_ij k_j
                                let (kj, qi) = (j * d3 + ko, i * d3 + qo);
                                for c in 0..dh {
                                    dsrc[qi + c] += dsj * src[kj + c];
                                }
                                // dk_j += ds_ij q_i
                                for c in 0..dh {
                                    dsrc[kj + c] += dsj * src[qi + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let p = sink.value(*a).cols();
                let q = out.cols() - p;
                let rows = out.rows();
                if sink.wants(*a) {
                    let mut da = Vec::with_capacity(rows * p);
                    for r in 0..rows {
                        da.extend_from_slice(&g.row(r)[..p]);
                    }
                    let shape = sink.value(*a).shape().to_vec();
                    sink.add(*a, Tensor::new(shape, da).expect("shape"));
                }
                if sink.wants(*b) {
                    let mut db = Vec::with_capacity(rows * q);
                    for r in 0..rows {
                        db.extend_from_slice(&g.row(r)[p..]);
                    }
                    let shape = sink.value(*b).shape().to_vec();
                    sink.add(*b, Tensor::new(shape, db).expect("shape"));
                }
            }
            Op::VStack { a, b } => {
                let na = sink.value(*a).len();
                if sink.wants(*a) {
                    let shape = sink.value(*a).shape().to_vec();
                    sink.add(*a, Tensor::new(shape, g.data()[..na].to_vec()).expect("shape"));
                }
                if sink.wants(*b) {
                    let shape = sink.value(*b).shape().to_vec();
                    sink.add(*b, Tensor::new(shape, g.data()[na..].to_vec()).expect("shape"));
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(dx) = sink.buf(*x) {
                    for (o, &r) in rows.iter().enumerate() {
                        axpy(F::one(), g.row(o), dx.row_mut(r));
                    }
                }
            }
            Op::GroupMeanRows { x, layout } => {
                if let Some(dx) = sink.buf(*x) {
                    for s in 0..layout.count() {
                        let (st, len) = (layout.start(s), layout.len_of(s));
                        let inv = F::one() / F::of(len as f64);
                        for r in st..st + len {
                            axpy(inv, g.row(s), dx.row_mut(r));
                        }
                    }
                }
            }
            Op::AddRows { x, p } => {
                sink.add(*x, g.clone());
                if let Some(dp) = sink.buf(*p) {
                    let period = dp.rows();
                    for r in 0..g.rows() {
                        axpy(F::one(), g.row(r), dp.row_mut(r % period));
                    }
                }
            }
            Op::GateRows { x, gate, rows, keep } => {
                if sink.wants(*x) {
                    let mut dx = g.clone();
                    for (&r, &k) in rows.iter().zip(keep) {
                        if !k {
                            dx.row_mut(r).fill(F::zero());
                        }
                    }
                    sink.add(*x, dx);
                }
                if sink.wants(*gate) {
                    let vx = sink.value(*x);
                    let shape = sink.value(*gate).shape().to_vec();
                    let dg = Tensor::from_fn(shape, |m| dot(vx.row(rows[m]), g.row(rows[m])));
                    sink.add(*gate, dg);
                }
            }
        }
    }
}
