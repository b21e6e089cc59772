//! Wengert tape: every differentiable op appends a node holding its output and
//! whatever it needs for the vector-Jacobian product; `backward` replays the
//! nodes in exact reverse order.

use std::sync::Arc;

use super::kernels::{self, add_into, axpy, gemm_acc, gemm_tn_acc, sigmoid};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore, SparseRows};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows: `[r×c] -> [c]`.
    Rows,
    /// Reduce over columns: `[r×c] -> [r]`.
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
        offsets: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Mean(Var, Axis),
    Sum(Var),
    Silu(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    MaskedSoftmax(Var),
    Rope {
        x: Var,
        head_dim: usize,
        pos0: usize,
        base: f64,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        weights: Vec<f64>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass against a borrowed parameter store.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    grads: Gradients<T>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            grads: Gradients::new(params.len()),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
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

    /// Gradient accumulated at `v` by the most recent `backward`.
    pub fn grad(&self, v: Var) -> Vec<T> {
        let t = &self.nodes[v.0].value;
        if t.grad().is_empty() {
            vec![T::zero(); t.numel()]
        } else {
            t.grad().to_vec()
        }
    }

    pub fn gradients(&self) -> &Gradients<T> {
        &self.grads
    }

    pub fn into_gradients(self) -> Gradients<T> {
        self.grads
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!finite_inputs, "non-finite output of {op:?} from finite inputs");
        }
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            Op::Param(_) | Op::Gather { .. } => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Param(id), &[])
    }

    /// Row lookup: output row `i` is row `ids[i]` of the table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let offsets = (0..=ids.len()).collect::<Vec<_>>();
        self.gather_sum(table, ids.to_vec(), offsets)
    }

    /// Bag lookup: output row `g` is the sum of table rows
    /// `ids[offsets[g]..offsets[g+1]]` (zero for an empty bag).
    pub fn gather_sum(&mut self, table: ParamId, ids: Vec<usize>, offsets: Vec<usize>) -> Result<Var> {
        let t = self.params.get(table);
        let (rows, d) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                table: self.params.name(table).to_string(),
                index: bad,
                rows,
            });
        }
        if offsets.is_empty() || offsets[offsets.len() - 1] != ids.len() {
            return Err(Error::contract("gather offsets must end at ids.len()"));
        }
        let groups = offsets.len() - 1;
        if groups == 0 {
            return Err(Error::contract("gather needs at least one output row"));
        }
        let mut out = vec![T::zero(); groups * d];
        let w = t.data();
        for g in 0..groups {
            let dst = &mut out[g * d..(g + 1) * d];
            for &id in &ids[offsets[g]..offsets[g + 1]] {
                add_into(&w[id * d..(id + 1) * d], dst);
            }
        }
        let value = Tensor::from_parts(vec![groups, d], out);
        Ok(self.push(value, Op::Gather { table, ids, offsets }, &[]))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2();
        let (k2, n) = self.val(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.val(a).dims2();
        let out = kernels::transpose(self.val(a).data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.item();
            Tensor::from_parts(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            same_shape(name, ta, tb)?;
            unreachable!()
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.val(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect());
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.val(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x + c).collect());
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Adds the length-c vector `row` to every row of an r×c matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if self.val(row).numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(row).shape().to_vec(),
            });
        }
        let mut out = self.val(x).data().to_vec();
        let b = self.val(row).data();
        for i in 0..r {
            add_into(b, &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, row), &[x, row]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.val(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.first_rows(parts, "concat_cols")?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        for &p in parts {
            if self.val(p).rows() != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: self.val(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(i));
            }
        }
        let shape = if r == 1 && parts.iter().all(|&p| self.val(p).shape().len() == 1) {
            vec![total]
        } else {
            vec![r, total]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks row blocks; 1-D inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.first_rows(parts, "concat_rows")?;
        let c = self.val(parts[0]).cols();
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            if self.val(p).cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: self.val(p).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.val(p).data());
            r += self.val(p).rows();
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Vector concatenation; identical to `concat_cols` on 1-D inputs.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_cols(parts)
    }

    fn first_rows(&self, parts: &[Var], op: &'static str) -> Result<usize> {
        parts
            .first()
            .map(|&p| self.val(p).rows())
            .ok_or_else(|| Error::contract(format!("{op} of zero tensors")))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if len == 0 || start + len > r {
            return Err(Error::contract(format!("slice_rows {start}+{len} out of {r} rows")));
        }
        let out = self.val(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if len == 0 || start + len > c {
            return Err(Error::contract(format!("slice_cols {start}+{len} out of {c} cols")));
        }
        let t = self.val(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(x).clone().reshaped(shape)?;
        let t = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: Axis) -> Var {
        let (r, c) = self.val(x).dims2();
        let t = self.val(x);
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![T::zero(); c];
                for i in 0..r {
                    add_into(t.row(i), &mut acc);
                }
                let inv = T::one() / T::of(r as f64);
                acc.iter_mut().for_each(|v| *v *= inv);
                Tensor::from_parts(vec![c], acc)
            }
            Axis::Cols => {
                let inv = T::one() / T::of(c as f64);
                let acc = (0..r).map(|i| t.row(i).iter().copied().sum::<T>() * inv).collect();
                Tensor::from_parts(vec![r], acc)
            }
        };
        self.push(out, Op::Mean(x, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- fused model ops ----------------------------------------------------

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if self.val(gain).numel() != c {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(gain).shape().to_vec(),
            });
        }
        let t = self.val(x);
        let g = self.val(gain).data();
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = t.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_c;
            let denom = (ms + eps).sqrt();
            let inv = if denom > T::zero() { T::one() / denom } else { T::zero() };
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * g[j];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Row-wise softmax over entries where `allowed` is true; disallowed entries
    /// are exactly zero and a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &Arc<[bool]>) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if allowed.len() != r * c {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.val(x).shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let t = self.val(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let mask = &allowed[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for j in 0..c {
                if mask[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = T::zero();
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    z += e;
                }
            }
            let inv = T::one() / z;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax(x), &[x]))
    }

    /// Rotary position rotation of each head's consecutive coordinate pairs;
    /// row `i` sits at position `pos0 + i`.
    pub fn rope(&mut self, x: Var, head_dim: usize, pos0: usize, base: f64) -> Result<Var> {
        let (r, c) = self.val(x).dims2();
        if head_dim == 0 || !head_dim.is_multiple_of(2) || c % head_dim != 0 {
            return Err(Error::contract(format!(
                "rope needs an even head width dividing {c}, got {head_dim}"
            )));
        }
        let mut out = self.val(x).data().to_vec();
        rotate(&mut out, r, c, head_dim, pos0, base, false);
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Rope {
                x,
                head_dim,
                pos0,
                base,
            },
            &[x],
        ))
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `[(R·group)×C] -> [R×C]`. Ties go to the lowest row in the block.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.val(x).dims2();
        if group == 0 || rows % group != 0 {
            return Err(Error::contract(format!("group_max: {rows} rows not divisible by {group}")));
        }
        let r = rows / group;
        let t = self.val(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut argmax = vec![0usize; r * c];
        for i in 0..r {
            for j in 0..c {
                let mut best = t[(i * group) * c + j];
                let mut arg = 0;
                for g in 1..group {
                    let v = t[(i * group + g) * c + j];
                    if v > best {
                        best = v;
                        arg = g;
                    }
                }
                out[i * c + j] = best;
                argmax[i * c + j] = arg;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::GroupMax { x, argmax }, &[x]))
    }

    /// Mean over rows of `-Σ_j w_ij log softmax(logits_i)_j`, where the softmax
    /// of row i runs only over entries with `allowed[i][j]` (all when `None`).
    ///
    /// Each row of `weights` must be nonnegative, zero on disallowed entries and
    /// sum to 1 within 1e-9.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        weights: &[f64],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let (r, c) = self.val(logits).dims2();
        if weights.len() != r * c || allowed.is_some_and(|m| m.len() != r * c) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: self.val(logits).shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        for i in 0..r {
            let w = &weights[i * c..(i + 1) * c];
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::contract(format!("negative target weight in row {i}")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("target weights of row {i} sum to {s}, not 1")));
            }
            if let Some(m) = allowed {
                if (0..c).any(|j| !m[i * c + j] && w[j] != 0.0) {
                    return Err(Error::contract(format!("masked entry carries weight in row {i}")));
                }
            }
        }
        let t = self.val(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in 0..r {
            let row = &t[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.is_none_or(|m| m[i * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    z += (v - max).exp();
                }
            }
            let log_z = z.ln() + max;
            let mut loss = T::zero();
            for j in 0..c {
                if ok(j) {
                    let lp = row[j] - log_z;
                    probs[i * c + j] = lp.exp();
                    let w = weights[i * c + j];
                    if w != 0.0 {
                        loss -= T::of(w) * lp;
                    }
                }
            }
            total += loss;
        }
        let mean = total / T::of(r as f64);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxXent {
                logits,
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.val(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.val(root).shape()
            )));
        }
        self.backward_with(root, &[T::one()])
    }

    /// Reverse pass seeded with an explicit output gradient.
    ///
    /// Intermediate gradients are reset first; leaf and parameter gradients
    /// keep accumulating across calls.
    pub fn backward_with(&mut self, root: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.val(root).numel() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.val(root).shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        for node in &mut self.nodes[..=root.0] {
            if !matches!(node.op, Op::Leaf) {
                node.value.zero_grad();
            }
        }
        add_into(seed, self.nodes[root.0].value.grad_mut());

        let Tape { nodes, grads, .. } = self;
        for i in (0..=root.0).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let g = node.value.grad();
            if g.is_empty() || g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            backprop_node(node, g, before, grads);
        }
        Ok(())
    }
}

fn rotate<T: Scalar>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    head_dim: usize,
    pos0: usize,
    base: f64,
    inverse: bool,
) {
    let half = head_dim / 2;
    let mut cs = Vec::with_capacity(half);
    for r in 0..rows {
        cs.clear();
        for i in 0..half {
            let theta = kernels::rope_angle(pos0 + r, i, head_dim, base);
            let s = if inverse { -theta.sin() } else { theta.sin() };
            cs.push((T::of(theta.cos()), T::of(s)));
        }
        let row = &mut data[r * cols..(r + 1) * cols];
        for h in 0..cols / head_dim {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &(cos, sin)) in cs.iter().enumerate() {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

fn grad_mut<T: Scalar>(before: &mut [Node<T>], v: Var) -> Option<&mut [T]> {
    let n = &mut before[v.0];
    n.needs_grad.then(|| n.value.grad_mut())
}

/// Adds `src` (same shape as `v`, or reduced to a sum when `v` is a broadcast scalar).
fn acc<T: Scalar>(before: &mut [Node<T>], v: Var, src: &[T]) {
    if let Some(g) = grad_mut(before, v) {
        if g.len() == src.len() {
            add_into(src, g);
        } else {
            debug_assert_eq!(g.len(), 1);
            g[0] += src.iter().copied().sum::<T>();
        }
    }
}

fn backprop_node<T: Scalar>(node: &Node<T>, g: &[T], before: &mut [Node<T>], grads: &mut Gradients<T>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => {
            add_into(g, grads.dense_mut(*id, g.len()));
        }
        Op::Gather { table, ids, offsets } => {
            let d = out.cols();
            let mut values = Vec::with_capacity(ids.len() * d);
            for gi in 0..offsets.len() - 1 {
                for _ in offsets[gi]..offsets[gi + 1] {
                    values.extend_from_slice(&g[gi * d..(gi + 1) * d]);
                }
            }
            grads.sparse.push(SparseRows {
                param: *table,
                rows: ids.clone(),
                values,
            });
        }
        &Op::MatMul(a, b) => {
            let (m, k) = before[a.0].value.dims2();
            let n = before[b.0].value.cols();
            if before[a.0].needs_grad {
                let bt = kernels::transpose(before[b.0].value.data(), k, n);
                let mut da = vec![T::zero(); m * k];
                gemm_acc(g, &bt, &mut da, m, n, k);
                acc(before, a, &da);
            }
            if before[b.0].needs_grad {
                let mut db = vec![T::zero(); k * n];
                gemm_tn_acc(before[a.0].value.data(), g, &mut db, m, k, n);
                acc(before, b, &db);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = out.dims2();
            let ga = kernels::transpose(g, r, c);
            acc(before, a, &ga);
        }
        &Op::Add(a, b) => {
            acc(before, a, g);
            acc(before, b, g);
        }
        &Op::Sub(a, b) => {
            acc(before, a, g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            acc(before, b, &neg);
        }
        &Op::Mul(a, b) => {
            let ta = before[a.0].value.data().to_vec();
            let tb = before[b.0].value.data().to_vec();
            let pick = |t: &[T], i: usize| if t.len() == 1 { t[0] } else { t[i] };
            if before[a.0].needs_grad {
                let da: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * pick(&tb, i)).collect();
                acc(before, a, &da);
            }
            if before[b.0].needs_grad {
                let db: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * pick(&ta, i)).collect();
                acc(before, b, &db);
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = grad_mut(before, a) {
                axpy(c, g, ga);
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => acc(before, a, g),
        &Op::AddRow(x, row) => {
            acc(before, x, g);
            let c = out.cols();
            if let Some(gr) = grad_mut(before, row) {
                for chunk in g.chunks(c) {
                    add_into(chunk, gr);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = out.dims2();
            let mut off = 0;
            for &p in parts {
                let w = before[p.0].value.cols();
                if let Some(gp) = grad_mut(before, p) {
                    for i in 0..r {
                        add_into(&g[i * total + off..i * total + off + w], &mut gp[i * w..(i + 1) * w]);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = before[p.0].value.numel();
                acc(before, p, &g[off..off + n]);
                off += n;
            }
        }
        &Op::SliceRows(x, start) => {
            let c = out.cols();
            if let Some(gx) = grad_mut(before, x) {
                add_into(g, &mut gx[start * c..start * c + g.len()]);
            }
        }
        &Op::SliceCols(x, start) => {
            let (r, len) = out.dims2();
            let c = before[x.0].value.cols();
            if let Some(gx) = grad_mut(before, x) {
                for i in 0..r {
                    add_into(&g[i * len..(i + 1) * len], &mut gx[i * c + start..i * c + start + len]);
                }
            }
        }
        &Op::Mean(x, axis) => {
            let (r, c) = before[x.0].value.dims2();
            if let Some(gx) = grad_mut(before, x) {
                match axis {
                    Axis::Rows => {
                        let inv = T::one() / T::of(r as f64);
                        for i in 0..r {
                            axpy(inv, g, &mut gx[i * c..(i + 1) * c]);
                        }
                    }
                    Axis::Cols => {
                        let inv = T::one() / T::of(c as f64);
                        for i in 0..r {
                            let gi = g[i] * inv;
                            gx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += gi);
                        }
                    }
                }
            }
        }
        &Op::Sum(x) => {
            let g0 = g[0];
            if let Some(gx) = grad_mut(before, x) {
                gx.iter_mut().for_each(|v| *v += g0);
            }
        }
        &Op::Silu(x) => {
            let xs = before[x.0].value.data().to_vec();
            if let Some(gx) = grad_mut(before, x) {
                for ((d, &v), &gv) in gx.iter_mut().zip(&xs).zip(g) {
                    let s = sigmoid(v);
                    *d += gv * s * (T::one() + v * (T::one() - s));
                }
            }
        }
        &Op::Sqrt(x) => {
            if let Some(gx) = grad_mut(before, x) {
                let two = T::of(2.0);
                for ((d, &y), &gv) in gx.iter_mut().zip(out.data()).zip(g) {
                    *d += gv / (two * y);
                }
            }
        }
        &Op::Log(x) => {
            let xs = before[x.0].value.data().to_vec();
            if let Some(gx) = grad_mut(before, x) {
                for ((d, &v), &gv) in gx.iter_mut().zip(&xs).zip(g) {
                    *d += gv / v;
                }
            }
        }
        &Op::Exp(x) => {
            if let Some(gx) = grad_mut(before, x) {
                for ((d, &y), &gv) in gx.iter_mut().zip(out.data()).zip(g) {
                    *d += gv * y;
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (r, c) = out.dims2();
            let xs = before[x.0].value.data().to_vec();
            let gn = before[gain.0].value.data().to_vec();
            if before[x.0].needs_grad {
                let inv_c = T::one() / T::of(c as f64);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let xr = &xs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inv = inv_rms[i];
                    let mut s = T::zero();
                    for j in 0..c {
                        s += gr[j] * gn[j] * xr[j];
                    }
                    let k = inv * inv * inv * s * inv_c;
                    for j in 0..c {
                        dx[i * c + j] = inv * gn[j] * gr[j] - k * xr[j];
                    }
                }
                acc(before, *x, &dx);
            }
            if let Some(dg) = grad_mut(before, *gain) {
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * xs[i * c + j] * inv_rms[i];
                    }
                }
            }
        }
        &Op::MaskedSoftmax(x) => {
            let (r, c) = out.dims2();
            let y = out.data();
            if let Some(gx) = grad_mut(before, x) {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        &Op::Rope {
            x,
            head_dim,
            pos0,
            base,
        } => {
            let (r, c) = out.dims2();
            let mut gx = g.to_vec();
            rotate(&mut gx, r, c, head_dim, pos0, base, true);
            acc(before, x, &gx);
        }
        Op::GroupMax { x, argmax } => {
            let (r, c) = out.dims2();
            let group = before[x.0].value.rows() / r;
            if let Some(gx) = grad_mut(before, *x) {
                for i in 0..r {
                    for j in 0..c {
                        let row = i * group + argmax[i * c + j];
                        gx[row * c + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::SoftmaxXent {
            logits,
            weights,
            probs,
        } => {
            let (r, _) = before[logits.0].value.dims2();
            let scale = g[0] / T::of(r as f64);
            if let Some(gl) = grad_mut(before, *logits) {
                for ((d, &p), &w) in gl.iter_mut().zip(probs).zip(weights) {
                    *d += scale * (p - T::of(w));
                }
            }
        }
    }
}
