use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `backward` receives the input values, the forward output and the
/// gradient flowing into the output, and returns one entry per input
/// (`None` when the input receives no contribution).
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var, f64),
    NormalizeRows {
        x: Var,
        sums: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Map {
        x: Var,
        derivative: fn(f64) -> f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    FillDiagonal(Var),
    Slice {
        x: Var,
        row: usize,
        col: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Map { .. } => "map",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::FillDiagonal(_) => "fill_diagonal",
            Op::Slice { .. } => "slice",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::TileRows(_) => "tile_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Reshape(_) => "reshape",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record-on-execute computation tape.
///
/// One tape serves one forward/backward pass. Nodes are appended in
/// execution order, so every input of a node has a smaller index than the
/// node itself.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient. Unreachable tensors hold zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Indices of the non-leaf nodes whose backward rule ran, in the order
    /// they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.first_non_finite = None;
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

    /// Fails with the first node whose output contained NaN or ±Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::NonFinite {
                op: self.nodes[node].op.name(),
                node,
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul_nt")?;
        let (n, k2) = self.value(b).matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op_name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a vector to every last-dimension row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v * factor).collect(),
        );
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Multiplies `x` by the single element of `factor`.
    pub fn scale_by(&mut self, x: Var, factor: Var) -> Result<Var> {
        let s = self.value(factor).item()?;
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v * s).collect(),
        );
        let rg = self.any_grad(&[x, factor]);
        Ok(self.push(out, Op::ScaleBy(x, factor), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v.exp()).collect(),
        );
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum() / vx.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Row-wise `softmax(temperature · x)`, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vec![0.0; vx.len()];
        for (src, dst) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(src, temperature, dst);
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x, temperature), rg))
    }

    /// Divides every last-dimension row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let sums: Vec<f64> = vx.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut data = vx.data().to_vec();
        for (row, s) in data.chunks_mut(c).zip(&sums) {
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::NormalizeRows { x, sums }, rg)
    }

    /// Normalizes each last-dimension row to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::Parameter(format!(
                "layer norm eps must be >= 0, got {eps}"
            )));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.len() != c {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        if vb.len() != c {
            return Err(Error::dim("layer_norm", vx.shape(), vb.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![0.0; vx.len()];
        for r in 0..rows {
            let src = vx.row(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (src[j] - mean) * inv;
                xhat[r * c + j] = h;
                data[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Elementwise GELU using the tanh approximation
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| gelu_value(v)).collect(),
        );
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_parts(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| f(v)).collect(),
        );
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Map { x, derivative }, rg)
    }

    /// Mean negative log-softmax of the labelled class over a `batch × classes` matrix.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (b, c) = vl.matrix_dims("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", vl.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
        }
        let out = Tensor::scalar(loss / b as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Replaces the diagonal of a square matrix with `value`; the diagonal
    /// receives no gradient.
    pub fn fill_diagonal(&mut self, x: Var, value: f64) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims("fill_diagonal")?;
        if r != c {
            return Err(Error::dim("fill_diagonal", vx.shape(), &[c, r]));
        }
        let mut data = vx.data().to_vec();
        for i in 0..r {
            data[i * c + i] = value;
        }
        let out = Tensor::from_parts(vec![r, c], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::FillDiagonal(x), rg))
    }

    /// Rectangular block `[row..row+rows, col..col+cols]` of a matrix.
    pub fn slice(
        &mut self,
        x: Var,
        row: usize,
        rows: usize,
        col: usize,
        cols: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims("slice")?;
        if rows == 0 || cols == 0 || row + rows > r || col + cols > c {
            return Err(Error::dim("slice", vx.shape(), &[row + rows, col + cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in row..row + rows {
            data.extend_from_slice(&vx.data()[i * c + col..i * c + col + cols]);
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, row, col }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let c = self.value(first).matrix_dims("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            let (r, pc) = vp.matrix_dims("concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), vp.shape()));
            }
            data.extend_from_slice(vp.data());
            rows += r;
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let r = self.value(first).matrix_dims("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            let (pr, pc) = vp.matrix_dims("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), vp.shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(vp.row(i));
            }
            offset += w;
        }
        let out = Tensor::from_parts(vec![r, total], data);
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks `times` copies of a matrix vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims("tile_rows")?;
        if times == 0 {
            return Err(Error::Parameter("tile_rows needs times >= 1".into()));
        }
        let data = vx.data().repeat(times);
        let out = Tensor::from_parts(vec![r * times, c], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::TileRows(x), rg))
    }

    /// Gathers the listed rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims("select_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract(
                "select_rows needs at least one index".into(),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::dim("select_rows", vx.shape(), &[i]));
            }
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectRows(x, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Records an externally computed output with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                loss_value.shape()
            )));
        }
        self.check_finite()?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visit_order = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                visit_order.push(idx);
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::from_parts(shape, data)
                })
            })
            .collect();
        Ok(Gradients { grads, visit_order })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_nt_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_tn_into(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_tn_into(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(grads, *a), g);
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let vb = self.value(*b).data();
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let va = self.value(*a).data();
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                add_into(self.slot(grads, *x), g);
                if let Some(gb) = self.slot(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += factor * v);
                }
            }
            Op::ScaleBy(x, factor) => {
                let s = self.value(*factor).data()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v);
                }
                if let Some(gs) = self.slot(grads, *factor) {
                    let vx = self.value(*x).data();
                    gs[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gv * y;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let share = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += share);
                }
            }
            Op::SoftmaxRows(x, temperature) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for ((gxr, gr), yr) in
                        gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += temperature * yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, sums } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (((gxr, gr), yr), s) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data().chunks(c))
                        .zip(sums)
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += (gr[j] - dot) / s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gain_v = self.value(*gain).data();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gh = vec![0.0; c];
                    for (r, ((gxr, gr), hr)) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            gh[j] = gr[j] * gain_v[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxr[j] += inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        *o += gv * gelu_derivative(*xv);
                    }
                }
            }
            Op::Map { x, derivative } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        *o += gv * derivative(*xv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let share = g[0] / b as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * c + j] += share * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::FillDiagonal(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (i, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                        if i / c != i % c {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Slice { x, row, col } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let src_cols = self.value(*x).cols();
                    let (h, w) = (out.shape()[0], out.shape()[1]);
                    for i in 0..h {
                        let dst =
                            &mut gx[(row + i) * src_cols + col..(row + i) * src_cols + col + w];
                        dst.iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(self.slot(grads, p), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, v)| *o += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::TileRows(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len();
                    for block in g.chunks(n) {
                        gx.iter_mut().zip(block).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::SelectRows(x, indices) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (k, &i) in indices.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grad = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let contributions = rule.backward(&values, out, &grad);
                for (&input, contribution) in inputs.iter().zip(contributions) {
                    if let Some(c) = contribution {
                        add_into(self.slot(grads, input), c.data());
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }
}

fn add_into(dst: Option<&mut [f64]>, src: &[f64]) {
    if let Some(dst) = dst {
        dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
    }
}

pub(crate) fn softmax_row(src: &[f64], temperature: f64, dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (temperature * (s - max)).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
}
