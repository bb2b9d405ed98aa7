//! Define-by-run tape: every operation pushes its output as a new node and
//! records how to push gradients back to its inputs. Records are created in
//! topological order by construction, so backward is a single reverse sweep.

use std::borrow::Cow;

use super::{Scalar, Tensor};
use crate::error::{NarError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<'a, T: Scalar> {
    rows: usize,
    cols: usize,
    data: Cow<'a, [T]>,
    requires_grad: bool,
}

enum Record<T: Scalar> {
    Matmul {
        a: usize,
        b: usize,
        out: usize,
    },
    MatmulNt {
        a: usize,
        b: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    Sub {
        a: usize,
        b: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    AddRowVec {
        a: usize,
        v: usize,
        out: usize,
    },
    MulRowVec {
        a: usize,
        v: usize,
        out: usize,
    },
    Scale {
        a: usize,
        factor: T,
        out: usize,
    },
    Relu {
        a: usize,
        out: usize,
    },
    Sigmoid {
        a: usize,
        out: usize,
    },
    Abs {
        a: usize,
        out: usize,
    },
    Sum {
        a: usize,
        out: usize,
    },
    MeanRows {
        a: usize,
        out: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
        out: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
        out: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        out: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        out: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
        out: usize,
    },
    SoftmaxRows {
        a: usize,
        out: usize,
    },
    LayerNormRows {
        a: usize,
        inv_std: Vec<T>,
        out: usize,
    },
}

/// Reverse-mode tape over borrowed or owned matrix values.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    records: Vec<Record<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    strict: bool,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            strict: false,
        }
    }

    /// A tape that never records: forward values only.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Cow<'a, [T]>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        if self.strict && !data.iter().all(|v| v.is_finite()) {
            return Err(NarError::NonFinite { op: "tape" });
        }
        self.nodes.push(Node {
            rows,
            cols,
            data,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds an external tensor as a leaf without copying its data.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        self.push(t.rows(), t.cols(), Cow::Borrowed(t.data()), t.requires_grad)
    }

    pub fn leaf_owned(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(NarError::ShapeMismatch {
                op: "leaf",
                detail: format!("{rows}x{cols} vs {} values", data.len()),
            });
        }
        self.push(rows, cols, Cow::Owned(data), requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(NarError::ShapeMismatch {
                op: "scalar_value",
                detail: format!("expected 1x1, got {}x{}", n.rows, n.cols),
            });
        }
        Ok(n.data[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by previous backward calls, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn record(&mut self, rec: Record<T>, out_requires_grad: bool) {
        if out_requires_grad {
            self.records.push(rec);
        }
    }

    fn mismatch(op: &'static str, detail: String) -> NarError {
        NarError::ShapeMismatch { op, detail }
    }

    // --- elementwise and structural ops ----------------------------------

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(usize, usize, usize) -> Record<T>,
    ) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(Self::mismatch(op, format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push(ar, ac, Cow::Owned(data), rg)?;
        self.record(make(a.0, b.0, out.0), rg);
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "add",
            a,
            b,
            |x, y| x + y,
            |a, b, out| Record::Add { a, b, out },
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            |a, b, out| Record::Sub { a, b, out },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            |a, b, out| Record::Mul { a, b, out },
        )
    }

    fn rowvec_op(
        &mut self,
        op: &'static str,
        a: Var,
        v: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(usize, usize, usize) -> Record<T>,
    ) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != ac {
            return Err(Self::mismatch(
                op,
                format!("{ar}x{ac} with row vector {vr}x{vc}"),
            ));
        }
        let mut data = Vec::with_capacity(ar * ac);
        {
            let av = self.value(a);
            let vv = self.value(v);
            for r in 0..ar {
                for c in 0..ac {
                    data.push(f(av[r * ac + c], vv[c]));
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(v);
        let out = self.push(ar, ac, Cow::Owned(data), rg)?;
        self.record(make(a.0, v.0, out.0), rg);
        Ok(out)
    }

    /// Adds a 1 x C row vector to every row of `a`.
    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowvec_op(
            "add_rowvec",
            a,
            v,
            |x, y| x + y,
            |a, v, out| Record::AddRowVec { a, v, out },
        )
    }

    /// Multiplies every row of `a` elementwise by a 1 x C row vector.
    pub fn mul_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.rowvec_op(
            "mul_rowvec",
            a,
            v,
            |x, y| x * y,
            |a, v, out| Record::MulRowVec { a, v, out },
        )
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data: Vec<T> = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.requires_grad(a);
        let out = self.push(r, c, Cow::Owned(data), rg)?;
        self.record(
            Record::Scale {
                a: a.0,
                factor,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        make: impl Fn(usize, usize) -> Record<T>,
    ) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a);
        let out = self.push(r, c, Cow::Owned(data), rg)?;
        self.record(make(a.0, out.0), rg);
        Ok(out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |a, out| Record::Relu { a, out },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                // split by sign so exp never overflows
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |a, out| Record::Sigmoid { a, out },
        )
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), |a, out| Record::Abs { a, out })
    }

    /// Full reduction to a 1 x 1 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let rg = self.requires_grad(a);
        let out = self.push(1, 1, Cow::Owned(vec![acc]), rg)?;
        self.record(Record::Sum { a: a.0, out: out.0 }, rg);
        Ok(out)
    }

    /// Column means over rows: R x C -> 1 x C.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let inv = T::from_f64(1.0 / r as f64);
        let mut data = vec![T::zero(); c];
        {
            let av = self.value(a);
            for row in 0..r {
                for col in 0..c {
                    data[col] += av[row * c + col];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let rg = self.requires_grad(a);
        let out = self.push(1, c, Cow::Owned(data), rg)?;
        self.record(Record::MeanRows { a: a.0, out: out.0 }, rg);
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat_rows", "no parts".into()));
        }
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Self::mismatch(
                    "concat_rows",
                    format!("column mismatch {pc} vs {c}"),
                ));
            }
            rows += pr;
            rg |= self.requires_grad(p);
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let out = self.push(rows, c, Cow::Owned(data), rg)?;
        self.record(
            Record::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat_cols", "no parts".into()));
        }
        let (r, _) = self.dims(parts[0]);
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Self::mismatch(
                    "concat_cols",
                    format!("row mismatch {pr} vs {r}"),
                ));
            }
            cols += pc;
            rg |= self.requires_grad(p);
        }
        let mut data = vec![T::zero(); r * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let pv = self.value(p);
            for row in 0..r {
                data[row * cols + offset..row * cols + offset + pc]
                    .copy_from_slice(&pv[row * pc..(row + 1) * pc]);
            }
            offset += pc;
        }
        let out = self.push(r, cols, Cow::Owned(data), rg)?;
        self.record(
            Record::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Self::mismatch(
                "slice_rows",
                format!("[{start}, {end}) of {r} rows"),
            ));
        }
        let data = self.value(a)[start * c..end * c].to_vec();
        let rg = self.requires_grad(a);
        let out = self.push(end - start, c, Cow::Owned(data), rg)?;
        self.record(
            Record::SliceRows {
                a: a.0,
                start,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Self::mismatch(
                "slice_cols",
                format!("[{start}, {end}) of {c} cols"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        {
            let av = self.value(a);
            for row in 0..r {
                data.extend_from_slice(&av[row * c + start..row * c + end]);
            }
        }
        let rg = self.requires_grad(a);
        let out = self.push(r, w, Cow::Owned(data), rg)?;
        self.record(
            Record::SliceCols {
                a: a.0,
                start,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    /// Row gather: output row r is input row idx[r]. Duplicate indices are
    /// allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Self::mismatch(
                "gather_rows",
                format!("index {bad} out of {r} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        {
            let av = self.value(a);
            for &i in idx {
                data.extend_from_slice(&av[i * c..(i + 1) * c]);
            }
        }
        let rg = self.requires_grad(a);
        let out = self.push(idx.len(), c, Cow::Owned(data), rg)?;
        self.record(
            Record::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut data = vec![T::zero(); r * c];
        {
            let av = self.value(a);
            for row in 0..r {
                let x = &av[row * c..(row + 1) * c];
                let y = &mut data[row * c..(row + 1) * c];
                let max = x.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (yi, &xi) in y.iter_mut().zip(x) {
                    *yi = (xi - max).exp();
                    total += *yi;
                }
                let inv = T::one() / total;
                for yi in y.iter_mut() {
                    *yi *= inv;
                }
            }
        }
        let rg = self.requires_grad(a);
        let out = self.push(r, c, Cow::Owned(data), rg)?;
        self.record(Record::SoftmaxRows { a: a.0, out: out.0 }, rg);
        Ok(out)
    }

    /// Row-wise normalization to mean 0 / variance 1 (no learned affine;
    /// compose with `mul_rowvec` + `add_rowvec` for gain and bias).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut data = vec![T::zero(); r * c];
        let mut inv_stds = vec![T::zero(); r];
        {
            let av = self.value(a);
            for row in 0..r {
                let x = &av[row * c..(row + 1) * c];
                let mut mean = T::zero();
                for &xi in x {
                    mean += xi;
                }
                mean *= inv_c;
                let mut var = T::zero();
                for &xi in x {
                    var += (xi - mean) * (xi - mean);
                }
                var *= inv_c;
                let inv_std = T::one() / (var + eps).sqrt();
                inv_stds[row] = inv_std;
                for (yi, &xi) in data[row * c..(row + 1) * c].iter_mut().zip(x) {
                    *yi = (xi - mean) * inv_std;
                }
            }
        }
        let rg = self.requires_grad(a);
        let out = self.push(r, c, Cow::Owned(data), rg)?;
        self.record(
            Record::LayerNormRows {
                a: a.0,
                inv_std: inv_stds,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    // --- matrix products --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Self::mismatch("matmul", format!("{m}x{k} . {k2}x{n}")));
        }
        let mut data = vec![T::zero(); m * n];
        mm_acc(self.value(a), self.value(b), &mut data, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push(m, n, Cow::Owned(data), rg)?;
        self.record(
            Record::Matmul {
                a: a.0,
                b: b.0,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    /// a . b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Self::mismatch(
                "matmul_nt",
                format!("{m}x{k} . ({n}x{k2})^T"),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        mm_nt_acc(self.value(a), self.value(b), &mut data, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push(m, n, Cow::Owned(data), rg)?;
        self.record(
            Record::MatmulNt {
                a: a.0,
                b: b.0,
                out: out.0,
            },
            rg,
        );
        Ok(out)
    }

    /// x . w + bias, with bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_rowvec(h, bias)
    }

    /// Multi-head scaled dot-product attention. Q is n_q x D, K and V are
    /// n_kv x D; D must be divisible by n_heads. Output is n_q x D.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (_, d) = self.dims(q);
        let (kr, kd) = self.dims(k);
        let (vr, vd) = self.dims(v);
        if kd != d || vd != d {
            return Err(Self::mismatch(
                "attention",
                format!("widths q={d} k={kd} v={vd}"),
            ));
        }
        if kr != vr {
            return Err(Self::mismatch(
                "attention",
                format!("key rows {kr} vs value rows {vr}"),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Self::mismatch(
                "attention",
                format!("{n_heads} heads do not divide width {d}"),
            ));
        }
        let dh = d / n_heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = self.slice_cols(q, lo, hi)?;
            let kh = self.slice_cols(k, lo, hi)?;
            let vh = self.slice_cols(v, lo, hi)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.scale(scores, inv_sqrt)?;
            let weights = self.softmax_rows(scaled)?;
            heads.push(self.matmul(weights, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            self.concat_cols(&heads)
        }
    }

    // --- backward ----------------------------------------------------------

    /// Backpropagates from a scalar loss, accumulating into existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(NarError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {r}x{c}"),
            });
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Backpropagates from `v` with an explicit output cotangent.
    pub fn backward_seeded(&mut self, v: Var, seed: &[T]) -> Result<()> {
        if self.records.is_empty() && !self.nodes[v.0].requires_grad {
            return Err(NarError::ShapeMismatch {
                op: "backward",
                detail: "tape is empty".into(),
            });
        }
        let (r, c) = self.dims(v);
        if seed.len() != r * c {
            return Err(NarError::ShapeMismatch {
                op: "backward",
                detail: format!("seed length {} vs {}x{}", seed.len(), r, c),
            });
        }
        // Sweep on fresh buffers, then fold into the persistent grads, so
        // repeated backward calls accumulate instead of compounding.
        let mut sweep: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        sweep[v.0] = Some(seed.to_vec());
        let nodes = &self.nodes;
        for rec in self.records.iter().rev() {
            step_backward(rec, nodes, &mut sweep);
        }
        for (slot, found) in self.grads.iter_mut().zip(sweep) {
            if let Some(found) = found {
                match slot {
                    Some(existing) => {
                        for (e, f) in existing.iter_mut().zip(found) {
                            *e += f;
                        }
                    }
                    None => *slot = Some(found),
                }
            }
        }
        Ok(())
    }
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gets the gradient buffer for node `id`, creating it zeroed on demand.
/// Returns None when the node does not require grad.
fn grad_of<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    id: usize,
) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].rows * nodes[id].cols;
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn step_backward<T: Scalar>(rec: &Record<T>, nodes: &[Node<'_, T>], grads: &mut [Option<Vec<T>>]) {
    // Outputs are always newer than inputs, so split keeps borrows disjoint.
    macro_rules! with_out_grad {
        ($out:expr, $g:ident, $lo:ident => $body:block) => {
            let ($lo, hi) = grads.split_at_mut(*$out);
            if let Some($g) = hi[0].as_deref() {
                $body
            }
        };
    }

    match rec {
        Record::Matmul { a, b, out } => {
            let (m, k) = (nodes[*a].rows, nodes[*a].cols);
            let n = nodes[*b].cols;
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    mm_nt_acc(g, &nodes[*b].data, da, m, n, k);
                }
                if let Some(db) = grad_of(lo, nodes, *b) {
                    mm_tn_acc(&nodes[*a].data, g, db, m, k, n);
                }
            });
        }
        Record::MatmulNt { a, b, out } => {
            let (m, k) = (nodes[*a].rows, nodes[*a].cols);
            let n = nodes[*b].rows;
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    mm_acc(g, &nodes[*b].data, da, m, n, k);
                }
                if let Some(db) = grad_of(lo, nodes, *b) {
                    mm_tn_acc(g, &nodes[*a].data, db, m, n, k);
                }
            });
        }
        Record::Add { a, b, out } => {
            with_out_grad!(out, g, lo => {
                for id in [a, b] {
                    if let Some(d) = grad_of(lo, nodes, *id) {
                        axpy(T::one(), g, d);
                    }
                }
            });
        }
        Record::Sub { a, b, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    axpy(T::one(), g, da);
                }
                if let Some(db) = grad_of(lo, nodes, *b) {
                    axpy(-T::one(), g, db);
                }
            });
        }
        Record::Mul { a, b, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(nodes[*b].data.iter()) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = grad_of(lo, nodes, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(nodes[*a].data.iter()) {
                        *d += gi * ai;
                    }
                }
            });
        }
        Record::AddRowVec { a, v, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    axpy(T::one(), g, da);
                }
                if let Some(dv) = grad_of(lo, nodes, *v) {
                    for row in 0..r {
                        for col in 0..c {
                            dv[col] += g[row * c + col];
                        }
                    }
                }
            });
        }
        Record::MulRowVec { a, v, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    let vv = &nodes[*v].data;
                    for row in 0..r {
                        for col in 0..c {
                            da[row * c + col] += g[row * c + col] * vv[col];
                        }
                    }
                }
                if let Some(dv) = grad_of(lo, nodes, *v) {
                    let av = &nodes[*a].data;
                    for row in 0..r {
                        for col in 0..c {
                            dv[col] += g[row * c + col] * av[row * c + col];
                        }
                    }
                }
            });
        }
        Record::Scale { a, factor, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    axpy(*factor, g, da);
                }
            });
        }
        Record::Relu { a, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(nodes[*a].data.iter()) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            });
        }
        Record::Sigmoid { a, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(nodes[*out].data.iter()) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            });
        }
        Record::Abs { a, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(nodes[*a].data.iter()) {
                        if xi > T::zero() {
                            *d += gi;
                        } else if xi < T::zero() {
                            *d -= gi;
                        }
                    }
                }
            });
        }
        Record::Sum { a, out } => {
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    let gi = g[0];
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
            });
        }
        Record::MeanRows { a, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            let inv = T::from_f64(1.0 / r as f64);
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for row in 0..r {
                        for col in 0..c {
                            da[row * c + col] += g[col] * inv;
                        }
                    }
                }
            });
        }
        Record::ConcatRows { parts, out } => {
            with_out_grad!(out, g, lo => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].rows * nodes[p].cols;
                    if let Some(dp) = grad_of(lo, nodes, p) {
                        axpy(T::one(), &g[offset..offset + len], dp);
                    }
                    offset += len;
                }
            });
        }
        Record::ConcatCols { parts, out } => {
            let rows = nodes[*out].rows;
            let total = nodes[*out].cols;
            with_out_grad!(out, g, lo => {
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p].cols;
                    if let Some(dp) = grad_of(lo, nodes, p) {
                        for row in 0..rows {
                            for col in 0..pc {
                                dp[row * pc + col] += g[row * total + offset + col];
                            }
                        }
                    }
                    offset += pc;
                }
            });
        }
        Record::SliceRows { a, start, out } => {
            let c = nodes[*a].cols;
            let rows = nodes[*out].rows;
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    axpy(T::one(), &g[..rows * c], &mut da[start * c..(start + rows) * c]);
                }
            });
        }
        Record::SliceCols { a, start, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            let w = nodes[*out].cols;
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for row in 0..r {
                        for col in 0..w {
                            da[row * c + start + col] += g[row * w + col];
                        }
                    }
                }
            });
        }
        Record::GatherRows { a, idx, out } => {
            let c = nodes[*a].cols;
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &g[r * c..(r + 1) * c], &mut da[i * c..(i + 1) * c]);
                    }
                }
            });
        }
        Record::SoftmaxRows { a, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    let y = &nodes[*out].data;
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let mut dot = T::zero();
                        for (&yi, &gi) in ys.iter().zip(gs) {
                            dot += yi * gi;
                        }
                        for ((d, &yi), &gi) in
                            da[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs)
                        {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            });
        }
        Record::LayerNormRows { a, inv_std, out } => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            let inv_c = T::from_f64(1.0 / c as f64);
            with_out_grad!(out, g, lo => {
                if let Some(da) = grad_of(lo, nodes, *a) {
                    let y = &nodes[*out].data;
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let mut mean_g = T::zero();
                        let mut mean_gy = T::zero();
                        for (&yi, &gi) in ys.iter().zip(gs) {
                            mean_g += gi;
                            mean_gy += gi * yi;
                        }
                        mean_g *= inv_c;
                        mean_gy *= inv_c;
                        let is = inv_std[row];
                        for ((d, &yi), &gi) in
                            da[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs)
                        {
                            *d += is * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            });
        }
    }
}

// --- kernels ----------------------------------------------------------------

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// c[m x n] += a[m x k] . b[k x n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let aik = a[i * k + l];
            if aik != T::zero() {
                axpy(aik, &b[l * n..(l + 1) * n], crow);
            }
        }
    }
}

/// Dot product over independent lanes so the reduction pipelines.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ac).zip(&mut bc) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        s += x * y;
    }
    s
}

/// c[m x n] += a[m x k] . b[n x k]^T
fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k x n] += a[m x k]^T . g[m x n]
/// Output-row-major loop order: each c row is completed while the whole of
/// g stays cache-resident (m is small in this workload).
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let crow = &mut c[l * n..(l + 1) * n];
        for i in 0..m {
            let ail = a[i * k + l];
            if ail != T::zero() {
                axpy(ail, &g[i * n..(i + 1) * n], crow);
            }
        }
    }
}
