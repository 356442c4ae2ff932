//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to a [`Tape`]; each node owns its forward value.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because an operation can only reference nodes that
//! already exist.

use rand::Rng;

use super::scalar::{gemm, MatRef};
use super::value::{numel, split_axis, strides_of, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    /// `b` broadcast against `a`; `map` is `None` when `b`'s shape is a suffix of `a`'s.
    AddBcast {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    MulBcast {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        x: Var,
        w: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    ShiftDown {
        x: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only leaves keep their gradient; intermediate buffers are released as the
/// reverse sweep passes them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", &[self.shape(a), self.shape(b)]));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", &[self.shape(a), self.shape(b)]));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn broadcast_map(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() {
            return Err(Error::shape(op, &[sa, sb]));
        }
        let off = sa.len() - sb.len();
        for (i, &d) in sb.iter().enumerate() {
            if d != sa[off + i] && d != 1 {
                return Err(Error::shape(op, &[sa, sb]));
            }
        }
        if sb.iter().zip(&sa[off..]).all(|(x, y)| x == y) {
            return Ok(None);
        }
        // General case: per-output index into `b`.
        let b_strides = strides_of(sb);
        let mut eff = vec![0usize; sa.len()];
        for (i, &d) in sb.iter().enumerate() {
            eff[off + i] = if d == 1 { 0 } else { b_strides[i] };
        }
        let n = numel(sa);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; sa.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            map.push(cur);
            for ax in (0..sa.len()).rev() {
                idx[ax] += 1;
                cur += eff[ax];
                if idx[ax] < sa[ax] {
                    break;
                }
                cur -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Some(map))
    }

    /// `a + b` with `b` broadcast (numpy rules, `b` right-aligned).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_map("add_bcast", a, b)?;
        let xa = self.data(a);
        let xb = self.data(b);
        let data: Vec<T> = match &map {
            None => {
                let mut out = Vec::with_capacity(xa.len());
                for c in xa.chunks_exact(xb.len().max(1)) {
                    out.extend(c.iter().zip(xb).map(|(&x, &y)| x + y));
                }
                out
            }
            Some(m) => xa.iter().zip(m).map(|(&x, &j)| x + xb[j]).collect(),
        };
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBcast { a, b, map }, rg))
    }

    /// `a * b` with `b` broadcast (numpy rules, `b` right-aligned).
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_map("mul_bcast", a, b)?;
        let xa = self.data(a);
        let xb = self.data(b);
        let data: Vec<T> = match &map {
            None => {
                let mut out = Vec::with_capacity(xa.len());
                for c in xa.chunks_exact(xb.len().max(1)) {
                    out.extend(c.iter().zip(xb).map(|(&x, &y)| x * y));
                }
                out
            }
            Some(m) => xa.iter().zip(m).map(|(&x, &j)| x * xb[j]).collect(),
        };
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulBcast { a, b, map }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x [.., k] · w [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", &[sx, sw]));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(sx) / k.max(1);
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.data(x), m, k),
            MatRef::new(self.data(w), k, n),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { x, w }, rg))
    }

    /// Batched product `a [b, m, k] · b [b, k, n]`, or `a · bᵀ` with `b [b, n, k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let bad = || Error::shape("bmm", &[sa, sb]);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let xa = self.data(a);
        let xb = self.data(b);
        for i in 0..batch {
            let ma = MatRef::new(&xa[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &xb[i * k * n..(i + 1) * k * n];
            let mb = if trans_b {
                MatRef::new(bslice, n, k).t()
            } else {
                MatRef::new(bslice, k, n)
            };
            gemm(ma, mb, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", &[self.shape(x), shape]));
        }
        let out = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &[&sx, axes]));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let mut out = vec![T::zero(); numel(&sx)];
        let src = self.data(x);
        permute_visit(&sx, axes, |o, i| out[o] = src[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, &[s, &[axis]]));
        }
        let (o, n, i) = split_axis(s, axis);
        if n == 0 {
            return Err(Error::EmptyAxis { op });
        }
        Ok((o, n, i))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let mx = idx.clone().map(|j| out[j]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in idx.clone() {
                let e = (out[j] - mx).exp();
                out[j] = e;
                sum = sum + e;
            }
            for j in idx {
                out[j] = out[j] / sum;
            }
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("log_softmax", x, axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, n, inner, |idx| {
            let mx = idx.clone().map(|j| out[j]).fold(T::neg_infinity(), T::max);
            let lse = mx + idx.clone().map(|j| (out[j] - mx).exp()).sum::<T>().ln();
            for j in idx {
                out[j] = out[j] - lse;
            }
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("layer_norm", x, axis)?;
        let mut out = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        let nf = T::from_usize(n).unwrap();
        for_each_lane(outer, n, inner, |idx| {
            let mean = idx.clone().map(|j| out[j]).sum::<T>() / nf;
            let var = idx.clone().map(|j| (out[j] - mean) * (out[j] - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for j in idx {
                out[j] = (out[j] - mean) * is;
            }
            inv_std.push(is);
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, axis, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu(x), rg)
    }

    /// Rows of `table [K, d]` selected by `ids`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", &[st]));
        }
        let (k, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::invalid(format!(
                "embedding: id {bad} out of range for vocabulary {k}"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`. Identity when
    /// not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg))
    }

    /// Sets entries where `mask` is true to `value`. `mask` covers the trailing
    /// dimensions of `x` and repeats over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: T) -> Result<Var> {
        let n = self.value(x).len();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(Error::shape("masked_fill", &[self.shape(x), &[mask.len()]]));
        }
        let m = mask.len();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % m] { value } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("mean", x, axis)?;
        let src = self.data(x);
        let nf = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        for v in &mut out {
            *v = *v / nf;
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Divides each lane along `axis` by its Euclidean norm; zero lanes stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("l2_normalize", x, axis)?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for_each_lane(outer, n, inner, |idx| {
            let norm = idx.clone().map(|j| out[j] * out[j]).sum::<T>().sqrt();
            if norm > T::zero() {
                for j in idx {
                    out[j] = out[j] / norm;
                }
            }
            norms.push(norm);
        });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Picks `x[.., indices[row]]` along the last axis; the last axis is removed.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let Some(&n) = s.last() else {
            return Err(Error::shape("gather", &[s]));
        };
        let rows = numel(s) / n.max(1);
        if indices.len() != rows || indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", &[s, &[indices.len()]]));
        }
        let src = self.data(x);
        let out = indices.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        let shape = s[..s.len() - 1].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &[&s0, &[axis]]));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible =
                sp.len() == s0.len() && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &[&s0, sp]));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Shifts by one step along `axis`: position 0 becomes zero and the last
    /// position is dropped.
    pub fn shift_down(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape("shift_down", &[s, &[axis]]));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            let base = o * n * inner;
            if n > 1 {
                out[base + inner..base + n * inner].copy_from_slice(&src[base..base + (n - 1) * inner]);
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ShiftDown { x, axis }, rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &[s, &[axis, start, len]]));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accum(grads, v, |s| add_into(s, g));
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |s| {
                    for ((d, &gi), &w) in s.iter_mut().zip(g).zip(xb) {
                        *d = *d + gi * w;
                    }
                });
                self.accum(grads, *b, |s| {
                    for ((d, &gi), &w) in s.iter_mut().zip(g).zip(xa) {
                        *d = *d + gi * w;
                    }
                });
            }
            Op::AddBcast { a, b, map } => {
                self.accum(grads, *a, |s| add_into(s, g));
                self.accum(grads, *b, |s| scatter_bcast(s, g, map.as_deref(), |gi, _| gi));
            }
            Op::MulBcast { a, b, map } => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |s| match map {
                    None => {
                        for (sc, gc) in s.chunks_exact_mut(xb.len().max(1)).zip(g.chunks_exact(xb.len().max(1))) {
                            for ((d, &gi), &w) in sc.iter_mut().zip(gc).zip(xb) {
                                *d = *d + gi * w;
                            }
                        }
                    }
                    Some(m) => {
                        for ((d, &gi), &j) in s.iter_mut().zip(g).zip(m) {
                            *d = *d + gi * xb[j];
                        }
                    }
                });
                self.accum(grads, *b, |s| scatter_bcast(s, g, map.as_deref(), |gi, i| gi * xa[i]));
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, |s| {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d = *d + gi * *c;
                    }
                });
            }
            Op::MatMul { x, w } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n.max(1);
                let gm = MatRef::new(g, m, n);
                self.accum(grads, *x, |s| {
                    gemm(gm, MatRef::new(self.data(*w), k, n).t(), T::one(), s)
                });
                self.accum(grads, *w, |s| {
                    gemm(MatRef::new(self.data(*x), m, k).t(), gm, T::one(), s)
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |s| {
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bs = &xb[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ where B is the logical k×n operand.
                        let bt = if *trans_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::new(bs, k, n).t()
                        };
                        gemm(gi, bt, T::one(), &mut s[i * m * k..(i + 1) * m * k]);
                    }
                });
                self.accum(grads, *b, |s| {
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let ai = MatRef::new(&xa[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(gi.t(), ai, T::one(), dst);
                        } else {
                            gemm(ai.t(), gi, T::one(), dst);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accum(grads, *x, |s| add_into(s, g)),
            Op::Permute { x, axes } => {
                let sx = self.shape(*x).to_vec();
                self.accum(grads, *x, |s| permute_visit(&sx, axes, |o, i| s[i] = s[i] + g[o]));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    for_each_lane(outer, n, inner, |idx| {
                        let dot = idx.clone().map(|j| g[j] * y[j]).sum::<T>();
                        for j in idx {
                            s[j] = s[j] + y[j] * (g[j] - dot);
                        }
                    })
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    for_each_lane(outer, n, inner, |idx| {
                        let gs = idx.clone().map(|j| g[j]).sum::<T>();
                        for j in idx {
                            s[j] = s[j] + g[j] - y[j].exp() * gs;
                        }
                    })
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let nf = T::from_usize(n).unwrap();
                self.accum(grads, *x, |s| {
                    let mut lane = 0;
                    for_each_lane(outer, n, inner, |idx| {
                        let mg = idx.clone().map(|j| g[j]).sum::<T>() / nf;
                        let mgy = idx.clone().map(|j| g[j] * y[j]).sum::<T>() / nf;
                        let is = inv_std[lane];
                        for j in idx {
                            s[j] = s[j] + is * (g[j] - mg - y[j] * mgy);
                        }
                        lane += 1;
                    })
                });
            }
            Op::Gelu(x) => {
                let xs = self.data(*x);
                self.accum(grads, *x, |s| {
                    for ((d, &gi), &v) in s.iter_mut().zip(g).zip(xs) {
                        *d = *d + gi * gelu_grad(v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, |s| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, |s| {
                    for ((d, &gi), &m) in s.iter_mut().zip(g).zip(mask) {
                        *d = *d + gi * m;
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                let m = mask.len();
                self.accum(grads, *x, |s| {
                    for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                        if !mask[i % m] {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let nf = T::from_usize(n).unwrap();
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut s[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + gi / nf;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.accum(grads, *x, |s| {
                    for d in s.iter_mut() {
                        *d = *d + g0;
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    let mut lane = 0;
                    for_each_lane(outer, n, inner, |idx| {
                        let norm = norms[lane];
                        lane += 1;
                        if norm > T::zero() {
                            let dot = idx.clone().map(|j| g[j] * y[j]).sum::<T>();
                            for j in idx {
                                s[j] = s[j] + (g[j] - y[j] * dot) / norm;
                            }
                        }
                    })
                });
            }
            Op::Gather { x, indices } => {
                let n = *self.shape(*x).last().unwrap();
                self.accum(grads, *x, |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        s[r * n + i] = s[r * n + i] + g[r];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.accum(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            add_into(&mut s[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::ShiftDown { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        let base = o * n * inner;
                        if n > 1 {
                            add_into(&mut s[base..base + (n - 1) * inner], &g[base + inner..base + n * inner]);
                        }
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        add_into(
                            &mut s[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn scatter_bcast<T: Scalar>(dst: &mut [T], g: &[T], map: Option<&[usize]>, f: impl Fn(T, usize) -> T) {
    let nb = dst.len();
    match map {
        None => {
            for (c, chunk) in g.chunks_exact(nb).enumerate() {
                let base = c * nb;
                for (j, (d, &gi)) in dst.iter_mut().zip(chunk).enumerate() {
                    *d = *d + f(gi, base + j);
                }
            }
        }
        Some(m) => {
            for (i, &gi) in g.iter().enumerate() {
                dst[m[i]] = dst[m[i]] + f(gi, i);
            }
        }
    }
}

/// Calls `f` with the strided index range of each lane along an axis split as
/// `(outer, n, inner)`.
fn for_each_lane(outer: usize, n: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

/// Visits `(output_offset, input_offset)` pairs of a permutation in output order.
fn permute_visit(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(in_shape);
    if total == 0 {
        return;
    }
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..n_last {
            f(o + j, base + j * s_last);
        }
        o += n_last;
        // Advance the multi-index over all but the last axis.
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
