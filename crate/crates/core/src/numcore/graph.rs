use super::{masked_softmax_values, NumError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operations accepted by [`Graph::elementwise`].
///
/// Binary kinds take a right operand of the same shape, or a one-element
/// right operand which is broadcast as a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Exp(Var),
    Neg(Var),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    Scale(Var, f64),
    Shift(Var),
    Sum(Var),
    Dot(Var, Var),
    AddN(Vec<Var>),
    Transpose(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AddBias(Var, Var),
    MaskedSoftmax {
        scores: Var,
        tau: f64,
    },
    StraightThrough(Var),
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScatterAffine {
        base: Var,
        offset: Var,
        source: Var,
        entries: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order so that a single reverse sweep
/// can propagate adjoints from a scalar loss back to every leaf.
///
/// Nodes are appended as operations run, so the node list is always in
/// topological order. Leaves created with [`Graph::leaf`] receive gradients;
/// constants never do.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears the gradient slots of every leaf.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.reset_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumError {
        NumError::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: Var,
        b: Option<Var>,
    ) -> Result<Var, NumError> {
        let kind = match op {
            ElementwiseOp::Exp => {
                return self.unary_only(op, b, |g| Ok(g.exp(a)));
            }
            ElementwiseOp::Neg => {
                return self.unary_only(op, b, |g| Ok(g.neg(a)));
            }
            ElementwiseOp::Add => BinaryKind::Add,
            ElementwiseOp::Sub => BinaryKind::Sub,
            ElementwiseOp::Mul => BinaryKind::Mul,
            ElementwiseOp::Div => BinaryKind::Div,
        };
        let b = b.ok_or(NumError::MissingOperand(op))?;
        self.binary(kind, a, b)
    }

    fn unary_only(
        &mut self,
        op: ElementwiseOp,
        b: Option<Var>,
        f: impl FnOnce(&mut Self) -> Result<Var, NumError>,
    ) -> Result<Var, NumError> {
        if b.is_some() {
            return Err(NumError::UnexpectedOperand(op));
        }
        f(self)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, NumError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let av = self.data(a);
        let bv = self.data(b);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = if self.shape(a) == self.shape(b) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if bv.len() == 1 {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(self.mismatch(name, a, b));
        };
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Neg(a), |x| -x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map_unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        self.map_unary(a, Op::Shift(a), |x| x + offset)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("dot", a, b));
        }
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), needs))
    }

    /// Sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, items: &[Var]) -> Result<Var, NumError> {
        let first = *items.first().ok_or(NumError::EmptyInput("add_n"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.data(first).len()];
        for &v in items {
            if self.shape(v) != shape.as_slice() {
                return Err(self.mismatch("add_n", first, v));
            }
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += x;
            }
        }
        let needs = self.needs(items);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddN(items.to_vec()), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.require_2d("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), needs))
    }

    /// Softmax along each row of a 2-D tensor.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.require_2d("row_softmax", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::RowSoftmax(a), needs))
    }

    /// Row-wise layer normalization followed by a per-column gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumError> {
        let (r, c) = self.require_2d("layer_norm", x)?;
        if self.data(gain).len() != c {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.data(bias).len() != c {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let n = (row[j] - mean) * istd;
                normalized[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Adds a length-`c` bias to every row of an `r × c` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (r, c) = self.require_2d("add_bias", x)?;
        if self.data(bias).len() != c {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let src = self.data(x);
        let b = self.data(bias);
        let mut out = src.to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += b[j];
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddBias(x, bias), needs))
    }

    /// `exp(-scores/τ) ⊙ mask / ⟨exp(-scores/τ), mask⟩`.
    ///
    /// The mask is read as a constant; no gradient flows into it.
    pub fn masked_softmax(&mut self, scores: Var, mask: Var, tau: f64) -> Result<Var, NumError> {
        if self.shape(scores) != self.shape(mask) {
            return Err(self.mismatch("masked_softmax", scores, mask));
        }
        let out = masked_softmax_values(self.data(scores), self.data(mask), tau)?;
        let shape = self.shape(scores).to_vec();
        let needs = self.needs(&[scores]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskedSoftmax { scores, tau },
            needs,
        ))
    }

    /// Forward value `hard`, backward identity onto `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var, NumError> {
        if self.shape(soft) != hard.shape() {
            return Err(NumError::Shape {
                op: "straight_through",
                left: self.shape(soft).to_vec(),
                right: hard.shape().to_vec(),
            });
        }
        let needs = self.needs(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), needs))
    }

    /// `out[i] = src[indices[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        src: Var,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var, NumError> {
        let data = self.data(src);
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(NumError::IndexOutOfRange {
                index: bad,
                len: data.len(),
            });
        }
        let out = indices.iter().map(|&i| data[i]).collect();
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[src]);
        Ok(self.push(value, Op::Gather { src, indices }, needs))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.require_2d("slice_cols", src)?;
        if start + len > c {
            return Err(NumError::IndexOutOfRange {
                index: start + len,
                len: c,
            });
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&data[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(&[src]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { src, start }, needs))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::EmptyInput("concat_cols"))?;
        let (r, _) = self.require_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.require_2d("concat_cols", p)?;
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Copy of `base` with selected entries overwritten:
    /// `out[i] = offset + source[i] · w` for each `(i, w)` in `entries`.
    ///
    /// This is the sparse form of `base ⊙ (1 − M) + M ⊙ (offset + source ⊙ W)`
    /// for a binary mask `M` and weight map `W` supported on `entries`.
    pub fn scatter_affine(
        &mut self,
        base: Var,
        offset: Var,
        source: Var,
        entries: Vec<(usize, f64)>,
    ) -> Result<Var, NumError> {
        if self.shape(base) != self.shape(source) {
            return Err(self.mismatch("scatter_affine", base, source));
        }
        if self.data(offset).len() != 1 {
            return Err(self.mismatch("scatter_affine", base, offset));
        }
        let len = self.data(base).len();
        if let Some(&(bad, _)) = entries.iter().find(|(i, _)| *i >= len) {
            return Err(NumError::IndexOutOfRange { index: bad, len });
        }
        let off = self.data(offset)[0];
        let src = self.data(source);
        let mut out = self.data(base).to_vec();
        for &(i, w) in &entries {
            out[i] = off + src[i] * w;
        }
        let shape = self.shape(base).to_vec();
        let needs = self.needs(&[base, offset, source]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterAffine {
                base,
                offset,
                source,
                entries,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradient
    /// slots. Calling it again without [`Graph::zero_grad`] adds on top.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumError::UnknownVar(loss.0));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(up) = adj[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&up);
                continue;
            }
            self.propagate(idx, &up, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bv = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = up[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bv[p * n + j];
                            }
                        }
                    }
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let av = self.data(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &up[i * n..(i + 1) * n];
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, g) in dst.iter_mut().zip(row) {
                                *d += x * g;
                            }
                        }
                    }
                    accumulate(adj, *b, &db);
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let scalar_b = self.shape(*a) != self.shape(*b);
                let bval = |i: usize| if scalar_b { bv[0] } else { bv[i] };
                if wants(*a) {
                    let da: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => up.to_vec(),
                        BinaryKind::Mul => up.iter().enumerate().map(|(i, g)| g * bval(i)).collect(),
                        BinaryKind::Div => up.iter().enumerate().map(|(i, g)| g / bval(i)).collect(),
                    };
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    let per: Vec<f64> = match kind {
                        BinaryKind::Add => up.to_vec(),
                        BinaryKind::Sub => up.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => up.iter().zip(av).map(|(g, x)| g * x).collect(),
                        BinaryKind::Div => up
                            .iter()
                            .enumerate()
                            .map(|(i, g)| -g * av[i] / (bval(i) * bval(i)))
                            .collect(),
                    };
                    if scalar_b {
                        accumulate(adj, *b, &[per.iter().sum()]);
                    } else {
                        accumulate(adj, *b, &per);
                    }
                }
            }
            Op::Exp(a) => {
                let da: Vec<f64> = up.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(adj, *a, &da);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = up.iter().map(|g| -g).collect();
                accumulate(adj, *a, &da);
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                let da: Vec<f64> = up
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = up.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(adj, *a, &da);
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                let da: Vec<f64> = up
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = up.iter().map(|g| g * f).collect();
                accumulate(adj, *a, &da);
            }
            Op::Shift(a) | Op::StraightThrough(a) => accumulate(adj, *a, up),
            Op::Sum(a) => {
                let n = self.data(*a).len();
                accumulate(adj, *a, &vec![up[0]; n]);
            }
            Op::Dot(a, b) => {
                let g = up[0];
                if wants(*a) {
                    let da: Vec<f64> = self.data(*b).iter().map(|y| g * y).collect();
                    accumulate(adj, *a, &da);
                }
                if wants(*b) {
                    let db: Vec<f64> = self.data(*a).iter().map(|x| g * x).collect();
                    accumulate(adj, *b, &db);
                }
            }
            Op::AddN(items) => {
                for &v in items {
                    if wants(v) {
                        accumulate(adj, v, up);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = up[j * r + i];
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::RowSoftmax(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let g = &up[i * c..(i + 1) * c];
                    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = y[j] * (g[j] - inner);
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let g = self.data(*gain);
                if wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += up[i * c + j] * normalized[i * c + j];
                        }
                    }
                    accumulate(adj, *gain, &dg);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += up[i * c + j];
                        }
                    }
                    accumulate(adj, *bias, &db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for j in 0..c {
                            let d = up[i * c + j] * g[j];
                            mean_d += d;
                            mean_dn += d * normalized[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dn /= c as f64;
                        for j in 0..c {
                            let d = up[i * c + j] * g[j];
                            dx[i * c + j] =
                                inv_std[i] * (d - mean_d - normalized[i * c + j] * mean_dn);
                        }
                    }
                    accumulate(adj, *x, &dx);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(adj, *x, up);
                }
                if wants(*bias) {
                    let c = self.data(*bias).len();
                    let mut db = vec![0.0; c];
                    for (i, g) in up.iter().enumerate() {
                        db[i % c] += g;
                    }
                    accumulate(adj, *bias, &db);
                }
            }
            Op::MaskedSoftmax { scores, tau } => {
                // y = softmax(-s/τ) over the mask; dL/ds = -(1/τ)·y·(ḡ - ⟨y, ḡ⟩)
                let inner: f64 = out.iter().zip(up).map(|(y, g)| y * g).sum();
                let ds: Vec<f64> = out
                    .iter()
                    .zip(up)
                    .map(|(y, g)| -y * (g - inner) / tau)
                    .collect();
                accumulate(adj, *scores, &ds);
            }
            Op::Gather { src, indices } => {
                let mut ds = vec![0.0; self.data(*src).len()];
                for (g, &i) in up.iter().zip(indices) {
                    ds[i] += g;
                }
                accumulate(adj, *src, &ds);
            }
            Op::SliceCols { src, start } => {
                let (r, c) = (self.shape(*src)[0], self.shape(*src)[1]);
                let len = node.value.cols();
                let mut ds = vec![0.0; r * c];
                for i in 0..r {
                    ds[i * c + start..i * c + start + len]
                        .copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                accumulate(adj, *src, &ds);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(adj, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ScatterAffine {
                base,
                offset,
                source,
                entries,
            } => {
                if wants(*base) {
                    let mut db = up.to_vec();
                    for &(i, _) in entries {
                        db[i] = 0.0;
                    }
                    accumulate(adj, *base, &db);
                }
                if wants(*offset) {
                    let d: f64 = entries.iter().map(|&(i, _)| up[i]).sum();
                    accumulate(adj, *offset, &[d]);
                }
                if wants(*source) {
                    let mut ds = vec![0.0; up.len()];
                    for &(i, w) in entries {
                        ds[i] += up[i] * w;
                    }
                    accumulate(adj, *source, &ds);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (d, y) in dst.iter_mut().zip(row) {
                *d += x * y;
            }
        }
    }
    out
}
