use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Matmul { a: Var, b: Var, trans_b: bool },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, index: Vec<usize> },
    ScatterRows { a: Var, index: Vec<usize> },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Abs { a: Var },
    Sqrt { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanRows { a: Var },
    SumLast { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward simply walks it in reverse. A tape can be
/// differentiated once; build a new tape for the next forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(2)].iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..values.len() {
        out.push(values[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Tensor::from_parts(shape, values), op, needs_grad))
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Records a value whose gradient is reported in [`Gradients`] but not
    /// written to any parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, true)
    }

    /// Copies a parameter onto the tape; backward accumulates into its `grad`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let t = Tensor::from_parts(src.shape().to_vec(), src.values().to_vec());
        self.push(t, Op::Param(id), src.requires_grad)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("add: cannot broadcast {sb:?} onto {sa:?}"));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let m = bv.len().max(1);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % m]).collect();
        let shape = sa.to_vec();
        self.emit("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("sub", shape, out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("mul", shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).values().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.emit("scale", shape, out, Op::Scale { a, factor }, &[a])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("{name}: operands must be at least 2-D, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return dim_err(format!("{name}: inner extents differ in {sa:?} x {sb:?}"));
        }
        let broadcast_b = sb.len() == 2;
        if !broadcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return dim_err(format!("{name}: batch extents differ in {sa:?} x {sb:?}"));
        }
        let batch = leading(&sa);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).values();
            let bv = self.value(b).values();
            if broadcast_b {
                if trans_b {
                    gemm_nt(av, bv, &mut out, batch * m, k, n);
                } else {
                    gemm_nn(av, bv, &mut out, batch * m, k, n);
                }
            } else {
                for i in 0..batch {
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let bb = &bv[i * k * n..(i + 1) * k * n];
                    let ob = &mut out[i * m * n..(i + 1) * m * n];
                    if trans_b {
                        gemm_nt(ab, bb, ob, m, k, n);
                    } else {
                        gemm_nn(ab, bb, ob, m, k, n);
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.emit(name, shape, out, Op::Matmul { a, b, trans_b }, &[a, b])
    }

    /// Matrix product over the trailing two dims, batched over leading dims.
    /// A 2-D right operand is shared across all batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` on the trailing two dims.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return dim_err(format!("reshape: {:?} -> {shape:?}", self.shape(a)));
        }
        let values = self.value(a).values().to_vec();
        self.emit("reshape", shape.to_vec(), values, Op::Reshape { a }, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return dim_err(format!("permute: {axes:?} is not a permutation of rank {}", shape.len()));
        }
        let (out_shape, out) = permute_values(self.value(a).values(), &shape, axes);
        self.emit("permute", out_shape, out, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Swaps the trailing two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return dim_err("transpose: rank < 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat: no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return dim_err(format!("concat: {s:?} incompatible with trailing {tail:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).values());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.emit("concat", shape, out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Selects rows (leading-axis slices); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return dim_err("gather: scalar input");
        }
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return dim_err(format!("gather: index {bad} out of range {}", shape[0]));
        }
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&av[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![index.len()];
        out_shape.extend(&shape[1..]);
        self.emit("gather", out_shape, out, Op::GatherRows { a, index: index.to_vec() }, &[a])
    }

    /// Places row `j` of `a` at row `index[j]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[0] != index.len() {
            return dim_err(format!("scatter: {} indices for shape {shape:?}", index.len()));
        }
        let row: usize = shape[1..].iter().product();
        let mut seen = vec![false; rows];
        for &i in index {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return dim_err(format!("scatter: index {i} out of range or repeated"));
            }
        }
        let av = self.value(a).values();
        let mut out = vec![0.0; rows * row];
        for (j, &i) in index.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&av[j * row..(j + 1) * row]);
        }
        let mut out_shape = vec![rows];
        out_shape.extend(&shape[1..]);
        self.emit("scatter", out_shape, out, Op::ScatterRows { a, index: index.to_vec() }, &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = last_dim(&shape);
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.emit("softmax", shape, out, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last dimension with learnable scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm: scale {:?} / shift {:?} vs feature dim {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.emit("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(name, shape, out, op, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).values().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.emit("sum", vec![], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).values();
        if v.is_empty() {
            return dim_err("mean: empty tensor");
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.emit("mean", vec![], vec![s], Op::Mean { a }, &[a])
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return dim_err("mean_rows: no rows");
        }
        let row: usize = shape[1..].iter().product();
        let mut out = vec![0.0; row];
        for chunk in self.value(a).values().chunks(row.max(1)) {
            add_into(&mut out, chunk);
        }
        let n = shape[0] as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.emit("mean_rows", shape[1..].to_vec(), out, Op::MeanRows { a }, &[a])
    }

    /// Sum over the last axis: `[..., d] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return dim_err("sum_last: scalar input");
        }
        let d = last_dim(&shape);
        let out = self
            .value(a)
            .values()
            .chunks(d.max(1))
            .map(|c| c.iter().sum())
            .collect();
        self.emit("sum_last", shape[..shape.len() - 1].to_vec(), out, Op::SumLast { a }, &[a])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        if av.is_empty() {
            return dim_err("mse: empty tensors");
        }
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        self.emit("mse", vec![], vec![s], Op::Mse { a, b }, &[a, b])
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return dim_err(format!("cross_entropy: logits {shape:?} vs {} labels", labels.len()));
        }
        let p = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= p) {
            return dim_err(format!("cross_entropy: label {bad} >= {p} classes"));
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * p..(r + 1) * p];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..p {
                probs[r * p + j] = (row[j] - lse).exp();
            }
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        self.emit(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients accumulate into
    /// `store`; gradients of every node are also returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.consumed {
            return contract_err("backward already ran on this tape; re-run the forward pass");
        }
        if self.value(loss).numel() != 1 {
            return contract_err(format!("loss must be scalar, got shape {:?}", self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            if let Op::Param(id) = self.nodes[i].op {
                store.accumulate_grad(id, &g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.values();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), g);
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b);
                    let m = gb.len().max(1);
                    for (j, v) in g.iter().enumerate() {
                        gb[j % m] += v;
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), g);
                }
                if self.wants(b) {
                    self.acc(grads, b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = self.value(b).values();
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.wants(b) {
                    let av = self.value(a).values();
                    let gb = self.acc(grads, b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if self.wants(a) {
                    self.acc(grads, a).iter_mut().zip(g).for_each(|(d, s)| *d += s * factor);
                }
            }
            &Op::Matmul { a, b, trans_b } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
                let batch = leading(sa);
                let broadcast_b = sb.len() == 2;
                let av = self.value(a).values();
                let bv = self.value(b).values();
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    if broadcast_b {
                        if trans_b {
                            gemm_nn(g, bv, ga, batch * m, n, k);
                        } else {
                            gemm_nt(g, bv, ga, batch * m, n, k);
                        }
                    } else {
                        for t in 0..batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let bt = &bv[t * k * n..(t + 1) * k * n];
                            let gat = &mut ga[t * m * k..(t + 1) * m * k];
                            if trans_b {
                                gemm_nn(gt, bt, gat, m, n, k);
                            } else {
                                gemm_nt(gt, bt, gat, m, n, k);
                            }
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b);
                    if broadcast_b {
                        if trans_b {
                            gemm_tn(g, av, gb, batch * m, n, k);
                        } else {
                            gemm_tn(av, g, gb, batch * m, k, n);
                        }
                    } else {
                        for t in 0..batch {
                            let gt = &g[t * m * n..(t + 1) * m * n];
                            let at = &av[t * m * k..(t + 1) * m * k];
                            let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                            if trans_b {
                                gemm_tn(gt, at, gbt, m, n, k);
                            } else {
                                gemm_tn(at, gt, gbt, m, k, n);
                            }
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), g);
                }
            }
            Op::Permute { a, axes } => {
                if self.wants(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (_, back) = permute_values(g, node.value.shape(), &inverse);
                    add_into(self.acc(grads, *a), &back);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        add_into(self.acc(grads, p), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { a, index } => {
                if self.wants(*a) {
                    let row: usize = self.shape(*a)[1..].iter().product();
                    let ga = self.acc(grads, *a);
                    for (j, &r) in index.iter().enumerate() {
                        add_into(&mut ga[r * row..(r + 1) * row], &g[j * row..(j + 1) * row]);
                    }
                }
            }
            Op::ScatterRows { a, index } => {
                if self.wants(*a) {
                    let row: usize = self.shape(*a)[1..].iter().product();
                    let ga = self.acc(grads, *a);
                    for (j, &r) in index.iter().enumerate() {
                        add_into(&mut ga[j * row..(j + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let d = last_dim(node.value.shape()).max(1);
                    let ga = self.acc(grads, a);
                    for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            dst[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = last_dim(node.value.shape());
                let gv = self.value(*gamma).values();
                if self.wants(*x) {
                    let gx = self.acc(grads, *x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let gg = self.acc(grads, *gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.acc(grads, *beta);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
            }
            &Op::Gelu { a } => {
                if self.wants(a) {
                    let av = self.value(a).values();
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * gelu_grad(av[j]);
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            &Op::Tanh { a } => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                }
            }
            &Op::Abs { a } => {
                if self.wants(a) {
                    let av = self.value(a).values();
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        let s = if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[j] += g[j] * s;
                    }
                }
            }
            &Op::Sqrt { a } => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for j in 0..g.len() {
                        if out[j] == 0.0 {
                            return Err(Error::NonFinite("sqrt backward at zero"));
                        }
                        ga[j] += g[j] * 0.5 / out[j];
                    }
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    self.acc(grads, a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { a } => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::MeanRows { a } => {
                if self.wants(a) {
                    let n = self.shape(a)[0] as f64;
                    let row = g.len().max(1);
                    let ga = self.acc(grads, a);
                    for chunk in ga.chunks_mut(row) {
                        for (d, s) in chunk.iter_mut().zip(g) {
                            *d += s / n;
                        }
                    }
                }
            }
            &Op::SumLast { a } => {
                if self.wants(a) {
                    let d = last_dim(self.shape(a)).max(1);
                    let ga = self.acc(grads, a);
                    for (chunk, s) in ga.chunks_mut(d).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += s);
                    }
                }
            }
            &Op::Mse { a, b } => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let s = 2.0 * g[0] / av.len() as f64;
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for j in 0..av.len() {
                        ga[j] += s * (av[j] - bv[j]);
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b);
                    for j in 0..av.len() {
                        gb[j] -= s * (av[j] - bv[j]);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let p = probs.len() / labels.len();
                    let s = g[0] / labels.len() as f64;
                    let gl = self.acc(grads, *logits);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..p {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * p + j] += s * (probs[r * p + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
