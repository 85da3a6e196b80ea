use super::kernels::gemm;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddConst(Var),
    KeyMask(Var),
    Gelu(Var),
    Relu(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Embedding {
        table: Var,
        extra: Option<(Var, usize)>,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Unfold {
        x: Var,
        k: usize,
        pad: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded operations, differentiated in reverse order.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] visits each node once.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let inner_len = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        // advance all but the last axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a leaf; differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let value = if rg { t.with_requires_grad(false) } else { t };
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, true)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or a batch
    /// `[..., k, n]` with the same leading dims as `a`. With `tb` the stored
    /// `b` is read transposed (`[n, k]`).
    pub fn matmul_ex(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared = sb.len() == 2;
        if kb != k || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            if shared {
                gemm(batch * m, k, n, ad, false, bd, tb, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        tb,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_row", sx, sb));
        }
        let c = sb[0];
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            add_into(row, &bd);
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Adds a constant whose shape equals the trailing dims of `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let sx = self.shape(x);
        let sc = c.shape();
        if sc.len() > sx.len() || sx[sx.len() - sc.len()..] != *sc {
            return Err(Error::shape("add_const", sx, sc));
        }
        let block = c.numel().max(1);
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(block) {
            add_into(chunk, c.data());
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    /// Adds an additive key mask `[B, M]` to scores shaped `[B, ..., M]`.
    pub fn key_mask(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let sx = self.shape(x);
        let sm = mask.shape();
        if sm.len() != 2 || sx.len() < 2 || sx[0] != sm[0] || sx[sx.len() - 1] != sm[1] {
            return Err(Error::shape("key_mask", sx, sm));
        }
        let (b, m) = (sm[0], sm[1]);
        let per_batch = self.value(x).numel() / b;
        let mut data = self.data(x).to_vec();
        for (bi, chunk) in data.chunks_exact_mut(per_batch).enumerate() {
            let row_mask = &mask.data()[bi * m..(bi + 1) * m];
            for row in chunk.chunks_exact_mut(m) {
                add_into(row, row_mask);
            }
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::KeyMask(x), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let t = self.unary(x, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Invalid("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(c).expect("dim");
        let src = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).numel().max(1);
        let s: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = s / T::from_usize(n).expect("count");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: T = self.data(x).iter().copied().sum::<T>() / T::from_usize(n).expect("count");
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Invalid(format!("target class {bad} >= {c}")));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] /= sum;
            }
            loss -= (row[targets[r]] - mx) - sum.ln();
        }
        loss /= T::from_usize(b.max(1)).expect("count");
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let data = permute_data(self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Row lookup into `table` (`[V, d]`); ids in `[first, first + K)` read
    /// from `extra` (`[K, d]`) instead when it is given.
    pub fn embedding(&mut self, table: Var, extra: Option<(Var, usize)>, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Invalid(format!("embedding table must be 2D, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        let extra_rows = match extra {
            Some((e, _)) => {
                let se = self.shape(e);
                if se.len() != 2 || se[1] != d {
                    return Err(Error::shape("embedding", &st, se));
                }
                se[0]
            }
            None => 0,
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            match extra {
                Some((e, first)) if id >= first && id < first + extra_rows => {
                    let r = id - first;
                    out.extend_from_slice(&self.data(e)[r * d..(r + 1) * d]);
                }
                _ if id < v => out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]),
                _ => return Err(Error::UnknownToken(format!("token id {id} outside vocabulary"))),
            }
        }
        let rg = self.rg(table) || extra.is_some_and(|(e, _)| self.rg(e));
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                extra,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let inv = T::one() / T::from_usize(len.max(1)).expect("len");
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Sliding windows of `k` frames over `[B, N, C]` with zero padding,
    /// producing `[B, N + 2 pad - k + 1, k * C]` (the im2col of a 1D conv).
    pub fn unfold1d(&mut self, x: Var, k: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || k == 0 || shape[1] + 2 * pad < k {
            return Err(Error::Invalid(format!("unfold1d(k={k}, pad={pad}) on {shape:?}")));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let n_out = n + 2 * pad - k + 1;
        let src = self.data(x);
        let mut out = vec![T::zero(); b * n_out * k * c];
        for bi in 0..b {
            for i in 0..n_out {
                for j in 0..k {
                    let t = i + j;
                    if t < pad || t - pad >= n {
                        continue;
                    }
                    let s = (bi * n + t - pad) * c;
                    let d = ((bi * n_out + i) * k + j) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([b, n_out, k * c], out)?, Op::Unfold { x, k, pad }, rg))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Invalid("l2_normalize on scalar".into()))?;
        let eps = T::lit(1e-12);
        let src = self.data(x);
        let mut norms = Vec::with_capacity(src.len() / c.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, norms }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Afterwards [`Graph::grad`] returns `d loss / d v` for every node that
    /// requires grad. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gout, &mut grads)?;
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => add_into(g, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (a, b, tb) = (*a, *b, *tb);
                let sa = val(a).shape();
                let sb = val(b).shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = out.shape()[out.rank() - 1];
                let shared = sb.len() == 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (ad, bd) = (val(a).data(), val(b).data());
                if rg(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    if shared {
                        gemm(batch * m, n, k, gout, false, bd, !tb, &mut da, false);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gout[bi * m * n..(bi + 1) * m * n],
                                false,
                                &bd[bi * k * n..(bi + 1) * k * n],
                                !tb,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                false,
                            );
                        }
                    }
                    acc(a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    let (rows, slab) = if shared { (batch * m, 1) } else { (m, batch) };
                    for bi in 0..slab {
                        let gi = &gout[bi * rows * n..(bi + 1) * rows * n];
                        let ai = &ad[bi * rows * k..(bi + 1) * rows * k];
                        let dbi = &mut db[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            gemm(n, rows, k, gi, true, ai, false, dbi, false);
                        } else {
                            gemm(k, rows, n, ai, true, gi, false, dbi, false);
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, gout.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect());
                }
                if rg(*b) {
                    acc(*b, gout.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow { x, bias } => {
                acc(*x, gout.to_vec());
                if rg(*bias) {
                    let c = val(*bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in gout.chunks_exact(c) {
                        add_into(&mut db, row);
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale { x, c } => acc(*x, gout.iter().map(|&g| g * *c).collect()),
            Op::AddConst(x) | Op::KeyMask(x) | Op::Reshape(x) => acc(*x, gout.to_vec()),
            Op::Gelu(x) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let dx = gout
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| {
                        let u = c * (v + a * v * v * v);
                        let th = u.tanh();
                        let du = c * (T::one() + three * a * v * v);
                        g * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let dx = gout
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Silu(x) => {
                let dx = gout
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: T = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).numel();
                let gd = val(*gamma).data();
                let nf = T::from_usize(c).expect("dim");
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (grow, hrow) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, dbeta);
                }
                if rg(*x) {
                    let mut dx = vec![T::zero(); gout.len()];
                    for r in 0..rstd.len() {
                        let grow = &gout[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let k = rstd[r] / nf;
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            dx[r * c + j] = k * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Mse { a, b } => {
                let n = T::from_usize(val(*a).numel().max(1)).expect("count");
                let k = T::lit(2.0) * gout[0] / n;
                let diff: Vec<T> = val(*a).data().iter().zip(val(*b).data()).map(|(&x, &y)| k * (x - y)).collect();
                if rg(*b) {
                    acc(*b, diff.iter().map(|&d| -d).collect());
                }
                acc(*a, diff);
            }
            Op::Sum(x) => acc(*x, vec![gout[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel().max(1);
                acc(*x, vec![gout[0] / T::from_usize(n).expect("count"); n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).shape()[1];
                let k = gout[0] / T::from_usize(targets.len().max(1)).expect("count");
                let mut dx: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] -= k;
                }
                acc(*logits, dx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_data(gout, out.shape(), &inv));
            }
            Op::Embedding { table, extra, ids } => {
                let d = val(*table).shape()[1];
                let v = val(*table).shape()[0];
                let mut dt = rg(*table).then(|| vec![T::zero(); v * d]);
                let mut de = extra
                    .filter(|(e, _)| rg(*e))
                    .map(|(e, first)| (e, first, vec![T::zero(); val(e).numel()]));
                let extra_rows = extra.map_or(0, |(e, _)| val(e).shape()[0]);
                for (row, &id) in ids.iter().enumerate() {
                    let g = &gout[row * d..(row + 1) * d];
                    match extra {
                        Some((_, first)) if id >= *first && id < *first + extra_rows => {
                            if let Some((_, first, buf)) = de.as_mut() {
                                let r = id - *first;
                                add_into(&mut buf[r * d..(r + 1) * d], g);
                            }
                        }
                        _ => {
                            if let Some(buf) = dt.as_mut() {
                                add_into(&mut buf[id * d..(id + 1) * d], g);
                            }
                        }
                    }
                }
                if let Some(buf) = dt {
                    acc(*table, buf);
                }
                if let Some((e, _, buf)) = de {
                    acc(e, buf);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    if rg(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dv.extend_from_slice(&gout[base..base + len]);
                        }
                        acc(v, dv);
                    }
                    offset += len;
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let inv = T::one() / T::from_usize(len.max(1)).expect("len");
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let g = &gout[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let base = o * len * inner + j * inner;
                        for (d, &gv) in dx[base..base + inner].iter_mut().zip(g) {
                            *d = gv * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Unfold { x, k, pad } => {
                let s = val(*x).shape();
                let (b, n, c) = (s[0], s[1], s[2]);
                let n_out = out.shape()[1];
                let mut dx = vec![T::zero(); b * n * c];
                for bi in 0..b {
                    for i in 0..n_out {
                        for j in 0..*k {
                            let t = i + j;
                            if t < *pad || t - pad >= n {
                                continue;
                            }
                            let dst = (bi * n + t - pad) * c;
                            let src = ((bi * n_out + i) * k + j) * c;
                            add_into(&mut dx[dst..dst + c], &gout[src..src + c]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let c = out.shape()[out.rank() - 1];
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gout[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let id = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let z = g.constant(t(&[2, 2], &[0.; 4]));
        let col = g.constant(t(&[2, 1], &[5., 6.]));
        let r = g.matmul(a, id).unwrap();
        assert_eq!(g.data(r), &[1., 2., 3., 4.]);
        let r = g.matmul(a, z).unwrap();
        assert_eq!(g.data(r), &[0.; 4]);
        let r = g.matmul(a, col).unwrap();
        assert_eq!(g.data(r), &[17., 39.]);
        assert_eq!(g.shape(r), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(t(&[3], &[1000., 0., -1000.]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12 && g.data(y)[2] == 0.0);
        let x = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        for (p, e) in g.data(y).iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_inner_axis_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3, 2], &[0.1, 2., -1., 0.3, 5., 0., 1., 1., 2., 2., 3., -3.]));
        let y = g.softmax(x, 1).unwrap();
        let d = g.data(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| d[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 3.]));
        let z = g.constant(t(&[2], &[0., 0.]));
        let l = g.mse(a, z).unwrap();
        assert_eq!(g.data(l), &[5.0]);
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.data(l), &[0.0]);
        let b = g.constant(t(&[2], &[3., 5.]));
        let l = g.mse(b, a).unwrap();
        assert_eq!(g.data(l), &[4.0]);
        let c = g.constant(t(&[3], &[0.; 3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::full([2, 3, 4], 0.7));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 3], &[0.2, -1.0, 0.7]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        g.backward(l).unwrap();
        let z: f64 = [0.2f64, -1.0, 0.7].iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = [0.2f64, -1.0, 0.7].iter().map(|v| v.exp() / z).collect();
        let grad = g.grad(x).unwrap();
        for i in 0..3 {
            let expect = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let x = g.variable(t(&[1, 2], &[1., 1.]));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3., 7.]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[i, j, k] = x[j, k, i]
        assert_eq!(g.data(y)[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(z), &data[..]);
    }

    #[test]
    fn embedding_extra_table_takes_precedence() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(t(&[3, 2], &[0., 0., 1., 1., 2., 2.]));
        let extra = g.variable(t(&[1, 2], &[9., 9.]));
        let out = g.embedding(table, Some((extra, 2)), &[1, 2, 0]).unwrap();
        assert_eq!(g.data(out), &[1., 1., 9., 9., 0., 0.]);
        assert!(g.embedding(table, None, &[3]).is_err());
    }
}
