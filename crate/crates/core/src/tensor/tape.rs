use std::borrow::Cow;

use rand::Rng;

use super::{gemm, log1mexp, sigmoid, Result, Tensor, TensorError, LOG1MEXP_CLAMP};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Sigmoid,
    Tanh,
    Log,
    Neg,
    OneMinus,
    Scale,
    Log1mExp,
    Softmax,
    LogSoftmax,
    Concat,
    GatherRows,
    MergeRows,
    SliceRows,
    SliceCols,
    BlendRows,
    Dropout,
    Stack,
    AttnScores,
    AttnContext,
    Pick,
    WeightedSum,
    Sum,
    AddN,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::OneMinus => "one_minus",
            OpKind::Scale => "scale",
            OpKind::Log1mExp => "log1mexp",
            OpKind::Softmax => "softmax_rows",
            OpKind::LogSoftmax => "log_softmax_rows",
            OpKind::Concat => "concat",
            OpKind::GatherRows => "gather_rows",
            OpKind::MergeRows => "merge_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::BlendRows => "blend_rows",
            OpKind::Dropout => "dropout",
            OpKind::Stack => "stack",
            OpKind::AttnScores => "attn_scores",
            OpKind::AttnContext => "attn_context",
            OpKind::Pick => "pick",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Sum => "sum",
            OpKind::AddN => "add_n",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 29] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Log,
        OpKind::Neg,
        OpKind::OneMinus,
        OpKind::Scale,
        OpKind::Log1mExp,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::GatherRows,
        OpKind::MergeRows,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::BlendRows,
        OpKind::Dropout,
        OpKind::Stack,
        OpKind::AttnScores,
        OpKind::AttnContext,
        OpKind::Pick,
        OpKind::WeightedSum,
        OpKind::Sum,
        OpKind::AddN,
    ];
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Neg(Var),
    OneMinus(Var),
    Scale(Var, f64),
    Log1mExp(Var),
    Softmax(Var, Option<Vec<usize>>),
    LogSoftmax(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_block: usize,
        b_block: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MergeRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    BlendRows {
        keep_new: Vec<bool>,
        new: Var,
        old: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Stack(Vec<Var>),
    AttnScores {
        enc: Var,
        query: Var,
    },
    AttnContext {
        weights: Var,
        enc: Var,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    AddN(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Log(..) => OpKind::Log,
            Op::Neg(..) => OpKind::Neg,
            Op::OneMinus(..) => OpKind::OneMinus,
            Op::Scale(..) => OpKind::Scale,
            Op::Log1mExp(..) => OpKind::Log1mExp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MergeRows { .. } => OpKind::MergeRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::BlendRows { .. } => OpKind::BlendRows,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Stack(..) => OpKind::Stack,
            Op::AttnScores { .. } => OpKind::AttnScores,
            Op::AttnContext { .. } => OpKind::AttnContext,
            Op::Pick { .. } => OpKind::Pick,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Sum(..) => OpKind::Sum,
            Op::AddN(..) => OpKind::AddN,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; the order is topological by
/// construction, so backward is a single reverse sweep.
///
/// Leaf gradients accumulate across repeated `backward` calls until
/// [`Tape::zero_grad`]. Interior gradients hold the most recent sweep.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn pending_slot<'p>(
    nodes: &[Node<'_>],
    pending: &'p mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'p mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(pending[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Deliberately corrupts the adjoint of one op kind (scaled by 1.5).
    /// Only used to prove the gradient checker catches bad adjoints.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Kinds of every op recorded so far, in tape order.
    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter by reference; it requires grad.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor by reference without gradient tracking.
    pub fn borrowed_constant(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, ())> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(self.shape(a).to_vec(), data)?, ()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("unary shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, sigmoid);
        Ok(self.push(t, Op::Sigmoid(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, f64::tanh);
        Ok(self.push(t, Op::Tanh(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        let t = self.unary(x, f64::ln);
        Ok(self.push(t, Op::Log(x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |a| -a);
        Ok(self.push(t, Op::Neg(x), &[x]))
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |a| 1.0 - a);
        Ok(self.push(t, Op::OneMinus(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.unary(x, |a| a * c);
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    /// `log(1 - exp(x))` for log-probabilities `x`. Inputs above
    /// [`LOG1MEXP_CLAMP`] are clamped so the result stays finite.
    pub fn log1mexp(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v.is_nan() || v > 0.0) {
            return Err(TensorError::Domain {
                op: "log1mexp",
                value: bad,
            });
        }
        let t = self.unary(x, log1mexp);
        Ok(self.push(t, Op::Log1mExp(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax over the first `lens[r]` entries of row `r`; the rest are 0.
    pub fn softmax_rows_masked(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        self.softmax_impl(x, Some(lens.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, lens: Option<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if let Some(l) = &lens {
            if l.len() != rows || l.iter().any(|&n| n == 0 || n > cols) {
                return Err(TensorError::Contract(format!(
                    "softmax mask lengths {l:?} invalid for {rows}x{cols}"
                )));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let n = lens.as_ref().map_or(cols, |l| l[r]);
            let src = &v.row(r)[..n];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..r * cols + n];
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x, lens), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = v.row(r);
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            for (d, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(dim_err("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_block = sa[axis] * inner;
        let b_block = sb[axis] * inner;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * (a_block + b_block));
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_block..(o + 1) * a_block]);
            out.extend_from_slice(&db[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            },
            &[a, b],
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Interleaves row blocks: row `k` of `parts[p].0` lands in output row
    /// `parts[p].1[k]`. Output rows not covered by any part are zero.
    pub fn merge_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize) -> Result<Var> {
        let width = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(TensorError::Contract("merge_rows with no parts".into())),
        };
        let mut out = vec![0.0; rows * width];
        for (v, dest) in parts {
            let val = self.value(*v);
            if val.cols() != width || val.rows() != dest.len() || val.shape().len() != 2 {
                return Err(dim_err("merge_rows", val.shape(), &[dest.len(), width]));
            }
            for (k, &d) in dest.iter().enumerate() {
                if d >= rows {
                    return Err(TensorError::Index { index: d, len: rows });
                }
                out[d * width..(d + 1) * width].copy_from_slice(val.row(k));
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::matrix(rows, width, out);
        Ok(self.push(
            t,
            Op::MergeRows {
                parts: parts.to_vec(),
            },
            &inputs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if start + len > r {
            return Err(dim_err("slice_rows", &[r, c], &[start + len, c]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data), Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start + len > c {
            return Err(dim_err("slice_cols", &[r, c], &[r, start + len]));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, data), Op::SliceCols { x, start }, &[x]))
    }

    /// Row-wise select: row `r` comes from `new` when `keep_new[r]`, else `old`.
    pub fn blend_rows(&mut self, keep_new: &[bool], new: Var, old: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(new, "blend_rows")?;
        if self.shape(old) != [r, c] || keep_new.len() != r {
            return Err(dim_err("blend_rows", self.shape(new), self.shape(old)));
        }
        let mut data = Vec::with_capacity(r * c);
        for (i, &k) in keep_new.iter().enumerate() {
            let src = if k { new } else { old };
            data.extend_from_slice(self.value(src).row(i));
        }
        Ok(self.push(
            Tensor::matrix(r, c, data),
            Op::BlendRows {
                keep_new: keep_new.to_vec(),
                new,
                old,
            },
            &[new, old],
        ))
    }

    /// Inverted dropout. In evaluation mode (or with ratio 0) returns `x`
    /// itself without recording anything.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        ratio: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(TensorError::Contract(format!(
                "dropout ratio {ratio} outside [0, 1)"
            )));
        }
        if !training || ratio == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - ratio);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Stacks `T` matrices of shape `[B, H]` into `[B, T, H]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("stack of nothing".into()))?;
        let (b, h) = self.matrix_dims(first, "stack")?;
        for &p in parts {
            if self.shape(p) != [b, h] {
                return Err(dim_err("stack", &[b, h], self.shape(p)));
            }
        }
        let t_len = parts.len();
        let mut out = vec![0.0; b * t_len * h];
        for (t, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for i in 0..b {
                out[(i * t_len + t) * h..(i * t_len + t + 1) * h].copy_from_slice(v.row(i));
            }
        }
        let t = Tensor::new(vec![b, t_len, h], out)?;
        Ok(self.push(t, Op::Stack(parts.to_vec()), parts))
    }

    fn attn_dims(&self, enc: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(enc);
        if s.len() != 3 {
            return Err(dim_err("attention", s, &[0, 0, 0]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// `scores[b, t] = <enc[b, t, :], query[b, :]>`.
    pub fn attn_scores(&mut self, enc: Var, query: Var) -> Result<Var> {
        let (b, t_len, h) = self.attn_dims(enc)?;
        if self.shape(query) != [b, h] {
            return Err(dim_err("attn_scores", self.shape(enc), self.shape(query)));
        }
        let e = self.value(enc).data();
        let q = self.value(query).data();
        let mut out = vec![0.0; b * t_len];
        for i in 0..b {
            let qi = &q[i * h..(i + 1) * h];
            for t in 0..t_len {
                let row = &e[(i * t_len + t) * h..(i * t_len + t + 1) * h];
                out[i * t_len + t] = row.iter().zip(qi).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(
            Tensor::matrix(b, t_len, out),
            Op::AttnScores { enc, query },
            &[enc, query],
        ))
    }

    /// `context[b, :] = sum_t weights[b, t] * enc[b, t, :]`.
    pub fn attn_context(&mut self, weights: Var, enc: Var) -> Result<Var> {
        let (b, t_len, h) = self.attn_dims(enc)?;
        if self.shape(weights) != [b, t_len] {
            return Err(dim_err("attn_context", self.shape(weights), self.shape(enc)));
        }
        let e = self.value(enc).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; b * h];
        for i in 0..b {
            let dst = &mut out[i * h..(i + 1) * h];
            for t in 0..t_len {
                let wt = w[i * t_len + t];
                let row = &e[(i * t_len + t) * h..(i * t_len + t + 1) * h];
                dst.iter_mut().zip(row).for_each(|(d, x)| *d += wt * x);
            }
        }
        Ok(self.push(
            Tensor::matrix(b, h, out),
            Op::AttnContext { weights, enc },
            &[weights, enc],
        ))
    }

    /// `out[r] = x[r, cols[r]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "pick")?;
        if cols.len() != r {
            return Err(dim_err("pick", &[r, c], &[cols.len()]));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::Index { index: j, len: c });
            }
            data.push(v.at(i, j));
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Scalar `sum_k weights[k] * x[k]` over the flattened data.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(dim_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Contract("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(dim_err("add_n", &shape, self.shape(x)));
            }
            acc.iter_mut()
                .zip(self.value(x).data())
                .for_each(|(a, v)| *a += v);
        }
        Ok(self.push(Tensor::new(shape, acc)?, Op::AddN(xs.to_vec()), xs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut gout) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                gout.iter_mut().for_each(|g| *g *= 1.5);
            }
            self.propagate(idx, &gout, &mut pending);
            match (&node.op, &mut self.grads[idx]) {
                (Op::Leaf, Some(acc)) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                (_, slot) => *slot = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into the pending buffer of `v` when it requires grad.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = pending_slot(nodes, pending, $v) {
                    $body
                }
            };
        }
        let out = &nodes[idx].value;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc!(*a, |da| {
                    gemm(m, n, k, g, false, val(*b).data(), true, da, true);
                });
                acc!(*b, |db| {
                    gemm(k, m, n, val(*a).data(), true, g, false, db, true);
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                });
                acc!(*b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                });
                acc!(*b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                });
                acc!(*b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc!(*x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                });
                let cols = val(*b).len();
                acc!(*b, |db| {
                    for row in g.chunks(cols.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Sigmoid(x) => acc!(*x, |dx| {
                for (i, &y) in out.data().iter().enumerate() {
                    dx[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc!(*x, |dx| {
                for (i, &y) in out.data().iter().enumerate() {
                    dx[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Log(x) => acc!(*x, |dx| {
                for (i, &a) in val(*x).data().iter().enumerate() {
                    dx[i] += g[i] / a;
                }
            }),
            Op::Neg(x) => acc!(*x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }),
            Op::OneMinus(x) => acc!(*x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }),
            Op::Scale(x, c) => acc!(*x, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }),
            Op::Log1mExp(x) => acc!(*x, |dx| {
                for (i, &a) in val(*x).data().iter().enumerate() {
                    let a = a.min(LOG1MEXP_CLAMP);
                    dx[i] += g[i] * (-1.0 / (-a).exp_m1());
                }
            }),
            Op::Softmax(x, lens) => acc!(*x, |dx| {
                let (rows, cols) = (out.rows(), out.cols());
                for r in 0..rows {
                    let n = lens.as_ref().map_or(cols, |l| l[r]);
                    let y = &out.row(r)[..n];
                    let gr = &g[r * cols..r * cols + n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LogSoftmax(x) => acc!(*x, |dx| {
                let (rows, cols) = (out.rows(), out.cols());
                for r in 0..rows {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dx[r * cols + j] += gr[j] - y[j].exp() * total;
                    }
                }
            }),
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            } => {
                let stride = a_block + b_block;
                acc!(*a, |da| {
                    for o in 0..*outer {
                        for k in 0..*a_block {
                            da[o * a_block + k] += g[o * stride + k];
                        }
                    }
                });
                acc!(*b, |db| {
                    for o in 0..*outer {
                        for k in 0..*b_block {
                            db[o * b_block + k] += g[o * stride + a_block + k];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => acc!(*table, |dt| {
                let c = val(*table).cols();
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[k * c + j];
                    }
                }
            }),
            Op::MergeRows { parts } => {
                let c = out.cols();
                for (v, dest) in parts {
                    acc!(*v, |dv| {
                        for (k, &d) in dest.iter().enumerate() {
                            for j in 0..c {
                                dv[k * c + j] += g[d * c + j];
                            }
                        }
                    });
                }
            }
            Op::SliceRows { x, start } => acc!(*x, |dx| {
                let c = out.cols();
                for (k, v) in g.iter().enumerate() {
                    dx[start * c + k] += v;
                }
            }),
            Op::SliceCols { x, start } => acc!(*x, |dx| {
                let (r, len) = (out.rows(), out.cols());
                let c = val(*x).cols();
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] += g[i * len + j];
                    }
                }
            }),
            Op::BlendRows { keep_new, new, old } => {
                let c = out.cols();
                acc!(*new, |dn| {
                    for (i, _) in keep_new.iter().enumerate().filter(|(_, &k)| k) {
                        for j in 0..c {
                            dn[i * c + j] += g[i * c + j];
                        }
                    }
                });
                acc!(*old, |d_old| {
                    for (i, _) in keep_new.iter().enumerate().filter(|(_, &k)| !k) {
                        for j in 0..c {
                            d_old[i * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc!(*x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * mask[i];
                }
            }),
            Op::Stack(parts) => {
                let s = out.shape();
                let (b, t_len, h) = (s[0], s[1], s[2]);
                for (t, &p) in parts.iter().enumerate() {
                    acc!(p, |dp| {
                        for i in 0..b {
                            let src = &g[(i * t_len + t) * h..(i * t_len + t + 1) * h];
                            dp[i * h..(i + 1) * h]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::AttnScores { enc, query } => {
                let s = val(*enc).shape();
                let (b, t_len, h) = (s[0], s[1], s[2]);
                let (e, q) = (val(*enc).data(), val(*query).data());
                acc!(*enc, |de| {
                    for i in 0..b {
                        for t in 0..t_len {
                            let gs = g[i * t_len + t];
                            let base = (i * t_len + t) * h;
                            for k in 0..h {
                                de[base + k] += gs * q[i * h + k];
                            }
                        }
                    }
                });
                acc!(*query, |dq| {
                    for i in 0..b {
                        for t in 0..t_len {
                            let gs = g[i * t_len + t];
                            let base = (i * t_len + t) * h;
                            for k in 0..h {
                                dq[i * h + k] += gs * e[base + k];
                            }
                        }
                    }
                });
            }
            Op::AttnContext { weights, enc } => {
                let s = val(*enc).shape();
                let (b, t_len, h) = (s[0], s[1], s[2]);
                let (e, w) = (val(*enc).data(), val(*weights).data());
                acc!(*weights, |dw| {
                    for i in 0..b {
                        let gi = &g[i * h..(i + 1) * h];
                        for t in 0..t_len {
                            let row = &e[(i * t_len + t) * h..(i * t_len + t + 1) * h];
                            dw[i * t_len + t] += row.iter().zip(gi).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc!(*enc, |de| {
                    for i in 0..b {
                        let gi = &g[i * h..(i + 1) * h];
                        for t in 0..t_len {
                            let wt = w[i * t_len + t];
                            let base = (i * t_len + t) * h;
                            for k in 0..h {
                                de[base + k] += wt * gi[k];
                            }
                        }
                    }
                });
            }
            Op::Pick { x, cols } => acc!(*x, |dx| {
                let c = val(*x).cols();
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
            }),
            Op::WeightedSum { x, weights } => acc!(*x, |dx| {
                dx.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w);
            }),
            Op::Sum(x) => acc!(*x, |dx| {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }),
            Op::AddN(xs) => {
                for &x in xs {
                    acc!(x, |dx| {
                        dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    });
                }
            }
        }
    }
}
