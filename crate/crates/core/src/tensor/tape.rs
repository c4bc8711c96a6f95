use serde::{Deserialize, Serialize};

use super::kernels::{
    broadcast_map, broadcast_shape, gelu_derivative, gelu_scalar, gemm_abt_acc, gemm_acc, gemm_atb_acc, matmul_plan,
    permute_map,
};
use super::{numel, Result, Tensor, TensorError};

/// Epsilon inside both normalization modes.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Subtract the mean, divide by the standard deviation.
    Standard,
    /// Divide by the root-mean-square only.
    #[default]
    Rms,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mode: NormMode,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    PairRotate {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        scale: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Leaf gradients persist across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("rank >= 1");
    (numel(shape) / d, d)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Trainable leaf tagged with an external parameter id.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        let v = self.variable(t.clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradients of every parameter leaf, keyed by parameter id.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.value.grad()?)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ma = broadcast_map(&shape, &sa);
            let mb = broadcast_map(&shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * c).collect()).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| gelu_scalar(x)).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    // ---- linear algebra and layout ---------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, n]`; batch extents broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel(&plan.out_shape)];
        for (bi, &(ia, ib)) in plan.batches.iter().enumerate() {
            gemm_acc(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(plan.out_shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (shape, map) = permute_map(self.shape(a), perm)?;
        let src = self.data(a);
        let data = map.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Permute(a, map), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Dimension(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Dimension(format!(
                    "cannot concat {s:?} with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                let block = ext * inner;
                data.extend_from_slice(&self.data(*p)[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape_in = self.shape(a).to_vec();
        if axis >= shape_in.len() || len == 0 || start + len > shape_in[axis] {
            return Err(TensorError::Dimension(format!(
                "narrow({axis}, {start}, {len}) invalid for {shape_in:?}"
            )));
        }
        let (outer, ext, inner) = axis_split(&shape_in, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = shape_in;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Narrow { src: a, axis, start }, &[a]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Sum over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape_in = self.shape(a).to_vec();
        if axis >= shape_in.len() {
            return Err(TensorError::Dimension(format!(
                "axis {axis} out of range for {shape_in:?}"
            )));
        }
        let (outer, ext, inner) = axis_split(&shape_in, axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = shape_in;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::Dimension(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / ext as f64))
    }

    // ---- normalization and activations -------------------------------------

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (rows, d) = split_last(src.shape());
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src.data()[r * d..(r + 1) * d];
            if x.iter().any(|v| v.is_nan()) {
                return Err(TensorError::Numeric("NaN in softmax input".into()));
            }
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(TensorError::Numeric(
                    "softmax row has no finite maximum (fully masked row?)".into(),
                ));
            }
            let y = &mut out[r * d..(r + 1) * d];
            let mut z = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - max).exp();
                z += *yi;
            }
            y.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, mode: NormMode) -> Result<Var> {
        let src = self.value(x);
        let (rows, d) = split_last(src.shape());
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Dimension(format!(
                "norm affine shapes {:?}/{:?} do not match last extent {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut inv = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let (center, denom_sq) = match mode {
                NormMode::Standard => {
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    (mu, var)
                }
                NormMode::Rms => (0.0, row.iter().map(|v| v * v).sum::<f64>() / d as f64),
            };
            let iv = 1.0 / (denom_sq + NORM_EPS).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let h = (row[j] - center) * iv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mode,
                xhat,
                inv,
            },
            &[x, gain, bias],
        ))
    }

    // ---- lookups and positional rotations --------------------------------

    /// Row lookup into `table` (`[vocab, d]`); output is `ids_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::Dimension(format!("embedding table shape {ts:?}")));
        }
        if numel(ids_shape) != ids.len() {
            return Err(TensorError::Dimension(format!(
                "{} ids do not fill shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotates dimension pairs `(2i, 2i+1)` of `x: [..., n, d]` by per-position
    /// tables of shape `[n, d/2]`, multiplying each rotated pair by `scale`.
    pub fn pair_rotate(&mut self, x: Var, cos: &[f64], sin: &[f64], scale: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Dimension("rotation needs rank >= 2".into()));
        }
        let d = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        if !d.is_multiple_of(2) {
            return Err(TensorError::Dimension(format!(
                "rotation needs an even last extent, got {d}"
            )));
        }
        let half = d / 2;
        if cos.len() != n * half || sin.len() != n * half || scale.len() != n * half {
            return Err(TensorError::Dimension(format!(
                "rotation tables must have {n}x{half} entries"
            )));
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (row, chunk) in src.chunks(d).enumerate() {
            let pos = row % n;
            for i in 0..half {
                let k = pos * half + i;
                let (c, s, z) = (cos[k], sin[k], scale[k]);
                let (x0, x1) = (chunk[2 * i], chunk[2 * i + 1]);
                out[row * d + 2 * i] = z * (x0 * c - x1 * s);
                out[row * d + 2 * i + 1] = z * (x0 * s + x1 * c);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::PairRotate {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Dimension(format!(
                "logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let src = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::Contract(format!("label {label} outside {c} classes")));
            }
            let row = &src[r * c..(r + 1) * c];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::Numeric("non-finite logit".into()));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[label];
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates `∂output/∂leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, sign) in [(*a, 1.0), (*b, sign_b)] {
                    let s = self.shape(v).to_vec();
                    self.acc(grads, v, |buf| {
                        if s == out_shape {
                            buf.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                        } else {
                            for (k, j) in broadcast_map(out_shape, &s).into_iter().enumerate() {
                                buf[j] += sign * g[k];
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let s = self.shape(v).to_vec();
                    let so = self.shape(other).to_vec();
                    let od = self.data(other);
                    self.acc(grads, v, |buf| {
                        let mv = broadcast_map(out_shape, &s);
                        let mo = broadcast_map(out_shape, &so);
                        for k in 0..g.len() {
                            buf[mv[k]] += g[k] * od[mo[k]];
                        }
                    });
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
            }),
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * gelu_derivative(x[k]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let plan = matmul_plan(self.shape(*a), self.shape(*b)).expect("checked forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |buf| {
                    for (bi, &(ia, ib)) in plan.batches.iter().enumerate() {
                        gemm_abt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[ib * k * n..(ib + 1) * k * n],
                            &mut buf[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, *b, |buf| {
                    for (bi, &(ia, ib)) in plan.batches.iter().enumerate() {
                        gemm_atb_acc(
                            &da[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut buf[ib * k * n..(ib + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, map) => self.acc(grads, *a, |buf| {
                for (k, &j) in map.iter().enumerate() {
                    buf[j] += g[k];
                }
            }),
            Op::Reshape(a) => self.acc(grads, *a, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    self.acc(grads, *p, |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut buf[o * ext * inner..(o + 1) * ext * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Narrow { src, axis, start } => {
                let (outer, ext, inner) = axis_split(self.shape(*src), *axis);
                let len = out_shape[*axis];
                self.acc(grads, *src, |buf| {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        let gs = &g[o * len * inner..(o + 1) * len * inner];
                        buf[base..base + len * inner]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::SumAll(a) => self.acc(grads, *a, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, ext, inner) = axis_split(self.shape(*a), *axis);
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut buf[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, d) = split_last(out_shape);
                self.acc(grads, *a, |buf| {
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            buf[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mode,
                xhat,
                inv,
            } => {
                let (rows, d) = split_last(out_shape);
                let gv = self.data(*gain);
                self.acc(grads, *x, |buf| {
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        if *mode == NormMode::Rms {
                            mean_dh = 0.0;
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            buf[r * d + j] += inv[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                self.acc(grads, *table, |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        let src = &g[k * d..(k + 1) * d];
                        buf[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += s);
                    }
                });
            }
            Op::PairRotate { x, cos, sin, scale } => {
                let d = out_shape[out_shape.len() - 1];
                let n = out_shape[out_shape.len() - 2];
                let half = d / 2;
                self.acc(grads, *x, |buf| {
                    for (row, chunk) in g.chunks(d).enumerate() {
                        let pos = row % n;
                        for i in 0..half {
                            let k = pos * half + i;
                            let (c, s, z) = (cos[k], sin[k], scale[k]);
                            let (g0, g1) = (chunk[2 * i], chunk[2 * i + 1]);
                            buf[row * d + 2 * i] += z * (c * g0 + s * g1);
                            buf[row * d + 2 * i + 1] += z * (-s * g0 + c * g1);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                self.acc(grads, *logits, |buf| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            buf[r * c + j] += g[0] * (probs[r * c + j] - target) / b as f64;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}
