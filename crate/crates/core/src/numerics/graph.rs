use rand::Rng;

use super::tensor::{inverse_perm, mm_nn, mm_nt, mm_tn, permute_data};
use super::{NumericError, Real, Tensor};

/// Sentinel target for positions that do not contribute to a cross-entropy loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleShift { x: Var, scale: Vec<F> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    MaskFill { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Tanh(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Select0 { x: Var, index: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F>, count: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

/// Tape of operations for one forward pass. Nodes are appended in
/// evaluation order, so the tape is already topologically sorted and the
/// backward sweep visits each node exactly once in reverse.
#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let one = F::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + F::of(3.0) * k * x * x);
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a tensor as a leaf. Gradients are accumulated for it only if
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// `x[..., d] + bias[d]`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(NumericError::Shape { op: "add_bias", lhs: self.shape(x).to_vec(), rhs: self.shape(bias).to_vec() });
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, NumericError> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Scale(x, s), ng))
    }

    /// Elementwise `x * scale + shift` with constant `scale` and `shift`.
    pub fn scale_shift(&mut self, x: Var, scale: Vec<F>, shift: Option<Vec<F>>) -> Result<Var, NumericError> {
        let n = self.value(x).numel();
        if scale.len() != n || shift.as_ref().is_some_and(|s| s.len() != n) {
            return Err(NumericError::Shape { op: "scale_shift", lhs: self.shape(x).to_vec(), rhs: vec![scale.len()] });
        }
        let xs = self.value(x).data();
        let data: Vec<F> = match &shift {
            Some(sh) => xs.iter().zip(&scale).zip(sh).map(|((&v, &s), &t)| v * s + t).collect(),
            None => xs.iter().zip(&scale).map(|(&v, &s)| v * s).collect(),
        };
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::ScaleShift { x, scale }, ng))
    }

    /// Inverted dropout: zero with probability `p`, rescale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NumericError> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NumericError::Invalid { op: "dropout", msg: format!("rate {p} must be < 1") });
        }
        let keep = F::of(1.0 / (1.0 - p));
        let scale = (0..self.value(x).numel()).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
        self.scale_shift(x, scale, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericError::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericError::Shape { op: "matmul_t", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng))
    }

    /// Batched `a[g,m,k] * b[g,k,n]`, or `b[g,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || NumericError::Shape { op: "batch_matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![F::zero(); g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            let ab = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ab, bb, ob, m, k, n);
            } else {
                mm_nn(ab, bb, ob, m, k, n);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericError::Shape { op: "permute", lhs: shape, rhs: perm.to_vec() });
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let t = self.value(x).clone().with_grad(false).reshaped(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericError::Invalid { op: "softmax", msg: format!("axis {axis} out of range for shape {shape:?}") });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xs[base + j * inner]);
                }
                if mx == F::neg_infinity() {
                    continue;
                }
                let mut z = F::zero();
                for j in 0..len {
                    let e = (xs[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / z;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Replace positions where `keep` is false with negative infinity, so a
    /// following softmax assigns them exactly zero weight.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var, NumericError> {
        if keep.len() != self.value(x).numel() {
            return Err(NumericError::Shape { op: "mask_fill", lhs: self.shape(x).to_vec(), rhs: vec![keep.len()] });
        }
        let data = self.value(x).data().iter().zip(&keep).map(|(&v, &k)| if k { v } else { F::neg_infinity() }).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::MaskFill { x, keep }, ng))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericError::Shape { op: "layer_norm", lhs: shape, rhs: self.shape(gain).to_vec() });
        }
        if eps <= F::zero() {
            return Err(NumericError::Invalid { op: "layer_norm", msg: "eps must be positive".into() });
        }
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d.max(1);
        let df = F::of(d as f64);
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / df;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericError> {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Gelu(x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericError> {
        let data = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Tanh(x), ng))
    }

    /// Rows of `table[vocab, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NumericError::Shape { op: "embedding", lhs: shape, rhs: vec![ids.len()] });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(NumericError::Invalid { op: "embedding", msg: format!("id {bad} out of range for table {shape:?}") });
        }
        let d = shape[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(NumericError::Shape { op: "select_rows", lhs: shape, rhs: rows.to_vec() });
        }
        let d = shape[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![rows.len(), d], out)?, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Sub-tensor `x[index]` along the first axis.
    pub fn select0(&mut self, x: Var, index: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(NumericError::Shape { op: "select0", lhs: shape, rhs: vec![index] });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape[1..].to_vec(), data)?, Op::Select0 { x, index }, ng))
    }

    /// Mean cross-entropy of `logits[n, c]` against class `targets`, skipping
    /// entries equal to `ignore_index`. Returns zero if every entry is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var, NumericError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericError::Shape { op: "cross_entropy", lhs: shape, rhs: vec![targets.len()] });
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= c) {
            return Err(NumericError::Invalid { op: "cross_entropy", msg: format!("target {bad} out of range for {c} classes") });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![F::zero(); ld.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            let row = &ld[r * c..(r + 1) * c];
            let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                z = z + e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / z;
            }
            total = total + (z.ln() + mx - row[t]);
            count += 1;
        }
        let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
        if !loss.is_finite() {
            return Err(NumericError::NonFinite { context: "cross_entropy loss".into() });
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericError> {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v) / F::of(n as f64);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, out: Var) -> Result<(), NumericError> {
        if self.value(out).numel() != 1 {
            return Err(NumericError::Invalid { op: "backward", msg: format!("output must be scalar, got shape {:?}", self.shape(out)) });
        }
        if !self.value(out).all_finite() {
            return Err(NumericError::NonFinite { context: "backward seed".into() });
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(vec![F::one()]);
        let mut leaf_updates = Vec::new();
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut adj, &mut leaf_updates);
        }
        for (i, g) in leaf_updates {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: Vec<F>, adj: &mut [Option<Vec<F>>], leaf_updates: &mut Vec<(usize, Vec<F>)>) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, &y)| *x = *x + y),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => leaf_updates.push((i, g)),
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::AddBias(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut gb = vec![F::zero(); d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                send(*bias, gb);
                send(*x, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
            Op::ScaleShift { x, scale } => send(*x, g.iter().zip(scale).map(|(&v, &s)| v * s).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    mm_nt(&g, self.value(*b).data(), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    mm_tn(self.value(*a).data(), &g, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    mm_nn(&g, self.value(*b).data(), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); n * k];
                    mm_tn(&g, self.value(*a).data(), &mut gb, m, n, k);
                    send(*b, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); bs * m * k];
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            mm_nn(gt, bt, out, m, n, k);
                        } else {
                            mm_nt(gt, bt, out, m, n, k);
                        }
                    }
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); bs * k * n];
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            mm_tn(gt, at, out, m, n, k);
                        } else {
                            mm_tn(at, gt, out, m, k, n);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Permute { x, perm } => {
                let (data, _) = permute_data(&g, self.value(Var(i)).shape(), &inverse_perm(perm));
                send(*x, data);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Softmax { x, axis } => {
                let y = self.value(Var(i)).data();
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let base = o * len * inner + q;
                        let mut dot = F::zero();
                        for j in 0..len {
                            dot = dot + g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::MaskFill { x, keep } => {
                send(*x, g.iter().zip(keep).map(|(&v, &k)| if k { v } else { F::zero() }).collect());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gs = self.value(*gain).data();
                let d = gs.len();
                let df = F::of(d as f64);
                let mut gg = vec![F::zero(); d];
                let mut gbias = vec![F::zero(); d];
                let mut gx = vec![F::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gbias[j] = gbias[j] + gr[j];
                        let dh = gr[j] * gs[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                    }
                    mean_dh = mean_dh / df;
                    mean_dh_h = mean_dh_h / df;
                    for j in 0..d {
                        let dh = gr[j] * gs[j];
                        gx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                send(*gain, gg);
                send(*bias, gbias);
                send(*x, gx);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                send(*x, g.iter().zip(xs).map(|(&gi, &v)| gi * gelu_parts(v).1).collect());
            }
            Op::Tanh(x) => {
                let ys = self.value(Var(i)).data();
                send(*x, g.iter().zip(ys).map(|(&gi, &y)| gi * (F::one() - y * y)).collect());
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut gt = vec![F::zero(); shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                    }
                }
                send(*table, gt);
            }
            Op::SelectRows { x, rows } => {
                let shape = self.shape(*x);
                let d = shape[1];
                let mut gx = vec![F::zero(); shape[0] * d];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[src * d + j] = gx[src * d + j] + g[r * d + j];
                    }
                }
                send(*x, gx);
            }
            Op::Select0 { x, index } => {
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                let inner = g.len();
                gx[index * inner..(index + 1) * inner].copy_from_slice(&g);
                send(*x, gx);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.shape(*logits)[1];
                let mut gl = vec![F::zero(); probs.len()];
                if *count > 0 {
                    let s = g[0] / F::of(*count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX || t >= c {
                            continue;
                        }
                        for j in 0..c {
                            gl[r * c + j] = probs[r * c + j] * s;
                        }
                        gl[r * c + t] = gl[r * c + t] - s;
                    }
                }
                send(*logits, gl);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                send(*x, vec![g[0] / F::of(n as f64); self.value(*x).numel()]);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
