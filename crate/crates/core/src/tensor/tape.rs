//! Define-by-run tape. Every primitive application appends one node; the
//! backward sweep walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because inputs always precede outputs.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b`.
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b`.
    Mul,
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul,
    /// `[n, m] + [m]`, the bias broadcast used by affine layers.
    AddRow,
    /// Multiply by a constant.
    Scale(f64),
    /// Stride-1, zero "same" padding convolution over `[n, c_in, h, w]`
    /// with kernel `[c_out, c_in, k, k]` (k odd) and bias `[c_out]`.
    Conv2d,
    Relu,
    /// Mean of all elements, scalar output.
    Mean,
    /// Sum of squared elements, scalar output.
    SumSquares,
    /// `[n, c, h, w] -> [n, c]` average over the spatial positions.
    SpatialMean,
    /// Row-wise softmax over `[n, c]`.
    Softmax,
    /// `-(1/n) sum target * log_softmax(logits)` for `[n, c]` inputs.
    SoftmaxCrossEntropy,
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::AddRow => "add_row",
            Primitive::Scale(_) => "scale",
            Primitive::Conv2d => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Mean => "mean",
            Primitive::SumSquares => "sum_squares",
            Primitive::SpatialMean => "spatial_mean",
            Primitive::Softmax => "softmax",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::AddRow
            | Primitive::SoftmaxCrossEntropy => 2,
            Primitive::Conv2d => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Origin {
    Leaf,
    Constant,
    Op(Primitive),
}

#[derive(Debug, Clone)]
struct Node {
    origin: Origin,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    /// Softmax probabilities kept by the cross-entropy forward.
    saved: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Tolerance on target row sums for cross-entropy.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push_source(value, Origin::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push_source(value, Origin::Constant, false)
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_node(Node {
            origin: Origin::Constant,
            inputs: vec![],
            value,
            requires_grad: false,
            saved: None,
        })
    }

    fn push_source(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: "input" });
        }
        Ok(self.push_node(Node {
            origin,
            inputs: vec![],
            value,
            requires_grad,
            saved: None,
        }))
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was
    /// reached by the sweep.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.len() != prim.arity() {
            return Err(TensorError::Arity {
                op: prim.name(),
                expected: prim.arity(),
                got: inputs.len(),
            });
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&prim, &vals)?;
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Node {
            origin: Origin::Op(prim),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            saved,
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::AddRow, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Conv2d, &[input, kernel, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SumSquares, &[a])
    }

    pub fn spatial_mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SpatialMean, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SoftmaxCrossEntropy, &[logits, target])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    /// Reverse sweep from a scalar root. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let prim = match &node.origin {
                Origin::Op(p) => p,
                _ => continue,
            };
            let upstream = match &self.grads[id] {
                Some(g) => g.data().to_vec(),
                None => continue,
            };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward_rule(prim, &vals, &node.value, node.saved.as_deref(), &upstream, &wanted);
            let inputs = node.inputs.clone();
            for ((input, grad), want) in inputs.into_iter().zip(input_grads).zip(wanted) {
                if !want {
                    continue;
                }
                let grad = grad.expect("backward rule must provide requested gradients");
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(TensorError::NonFinite { op: prim.name() });
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => {
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        *slot = Some(Tensor::new(shape, grad)?);
                    }
                }
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, r: usize) -> Result<(), TensorError> {
    if t.shape().len() != r {
        return Err(mismatch(op, format!("expected rank {}, got shape {:?}", r, t.shape())));
    }
    Ok(())
}

type Forward = (Tensor, Option<Vec<f64>>);

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<Forward, TensorError> {
    let op = prim.name();
    let out = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            same_shape(op, x[0], x[1])?;
            let f: fn(f64, f64) -> f64 = match prim {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(x[0].shape().to_vec(), data)?
        }
        Primitive::MatMul => {
            rank(op, x[0], 2)?;
            rank(op, x[1], 2)?;
            let (n, k) = (x[0].shape()[0], x[0].shape()[1]);
            let (k2, m) = (x[1].shape()[0], x[1].shape()[1]);
            if k != k2 {
                return Err(mismatch(op, format!("{:?} x {:?}", x[0].shape(), x[1].shape())));
            }
            Tensor::new(vec![n, m], matmul(x[0].data(), x[1].data(), n, k, m))?
        }
        Primitive::AddRow => {
            rank(op, x[0], 2)?;
            let m = x[0].shape()[1];
            if x[1].shape() != [m] {
                return Err(mismatch(op, format!("{:?} + {:?}", x[0].shape(), x[1].shape())));
            }
            let b = x[1].data();
            let data = x[0]
                .data()
                .chunks(m.max(1))
                .flat_map(|row| row.iter().zip(b).map(|(a, b)| a + b))
                .collect();
            Tensor::new(x[0].shape().to_vec(), data)?
        }
        Primitive::Scale(c) => {
            let data = x[0].data().iter().map(|v| c * v).collect();
            Tensor::new(x[0].shape().to_vec(), data)?
        }
        Primitive::Conv2d => {
            let g = ConvGeom::new(x[0], x[1], x[2])?;
            Tensor::new(vec![g.n, g.co, g.h, g.w], g.forward(x[0].data(), x[1].data(), x[2].data()))?
        }
        Primitive::Relu => {
            let data = x[0].data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::new(x[0].shape().to_vec(), data)?
        }
        Primitive::Mean => {
            if x[0].numel() == 0 {
                return Err(mismatch(op, "empty input".into()));
            }
            Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].numel() as f64)
        }
        Primitive::SumSquares => Tensor::scalar(x[0].data().iter().map(|v| v * v).sum()),
        Primitive::SpatialMean => {
            rank(op, x[0], 4)?;
            let s = x[0].shape();
            let plane = s[2] * s[3];
            if plane == 0 {
                return Err(mismatch(op, "empty spatial extent".into()));
            }
            let data = x[0].data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
            Tensor::new(vec![s[0], s[1]], data)?
        }
        Primitive::Softmax => {
            rank(op, x[0], 2)?;
            let c = x[0].shape()[1];
            let data = x[0].data().chunks(c.max(1)).flat_map(softmax_row).collect();
            Tensor::new(x[0].shape().to_vec(), data)?
        }
        Primitive::SoftmaxCrossEntropy => {
            rank(op, x[0], 2)?;
            same_shape(op, x[0], x[1])?;
            let (n, c) = (x[0].shape()[0], x[0].shape()[1]);
            if n == 0 || c == 0 {
                return Err(mismatch(op, "empty logits".into()));
            }
            let mut probs = Vec::with_capacity(n * c);
            let mut total = 0.0;
            for (row, (z, t)) in x[0].data().chunks(c).zip(x[1].data().chunks(c)).enumerate() {
                let sum: f64 = t.iter().sum();
                if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE || t.iter().any(|&v| v < -DISTRIBUTION_TOLERANCE) {
                    return Err(TensorError::InvalidTarget { row, sum });
                }
                let lse = log_sum_exp(z);
                total -= z.iter().zip(t).map(|(zi, ti)| ti * (zi - lse)).sum::<f64>();
                probs.extend(z.iter().map(|zi| (zi - lse).exp()));
            }
            return Ok((Tensor::scalar(total / n as f64), Some(probs)));
        }
        Primitive::Reshape(shape) => x[0].reshape(shape)?,
    };
    Ok((out, None))
}

/// Gradients for each input; `None` where not requested.
fn backward_rule(
    prim: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    saved: Option<&[f64]>,
    g: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| wanted[i];
    match prim {
        Primitive::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Primitive::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.iter().map(|v| -v).collect())],
        Primitive::Mul => vec![
            want(0).then(|| g.iter().zip(x[1].data()).map(|(g, b)| g * b).collect()),
            want(1).then(|| g.iter().zip(x[0].data()).map(|(g, a)| g * a).collect()),
        ],
        Primitive::MatMul => {
            let (n, k) = (x[0].shape()[0], x[0].shape()[1]);
            let m = x[1].shape()[1];
            vec![
                want(0).then(|| matmul_bt(g, x[1].data(), n, m, k)),
                want(1).then(|| matmul_at(x[0].data(), g, n, k, m)),
            ]
        }
        Primitive::AddRow => {
            let m = x[0].shape()[1];
            let bias_grad = want(1).then(|| {
                let mut acc = vec![0.0; m];
                for row in g.chunks(m.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![want(0).then(|| g.to_vec()), bias_grad]
        }
        Primitive::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        Primitive::Conv2d => {
            let geom = ConvGeom::new(x[0], x[1], x[2]).expect("validated in forward");
            let (di, dk, db) = geom.backward(x[0].data(), x[1].data(), g, wanted);
            vec![di, dk, db]
        }
        Primitive::Relu => vec![Some(
            g.iter()
                .zip(x[0].data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Primitive::Mean => {
            let n = x[0].numel() as f64;
            vec![Some(vec![g[0] / n; x[0].numel()])]
        }
        Primitive::SumSquares => vec![Some(x[0].data().iter().map(|v| 2.0 * v * g[0]).collect())],
        Primitive::SpatialMean => {
            let s = x[0].shape();
            let plane = s[2] * s[3];
            vec![Some(g.iter().flat_map(|v| std::iter::repeat_n(v / plane as f64, plane)).collect())]
        }
        Primitive::Softmax => {
            let c = out.shape()[1];
            let mut dx = Vec::with_capacity(g.len());
            for (s, gr) in out.data().chunks(c).zip(g.chunks(c)) {
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(s.iter().zip(gr).map(|(si, gi)| si * (gi - dot)));
            }
            vec![Some(dx)]
        }
        Primitive::SoftmaxCrossEntropy => {
            let probs = saved.expect("cross-entropy saves probabilities");
            let (n, c) = (x[0].shape()[0], x[0].shape()[1]);
            let scale = g[0] / n as f64;
            let t = x[1].data();
            let dlogits = want(0).then(|| {
                let mut d = Vec::with_capacity(n * c);
                for (p, tr) in probs.chunks(c).zip(t.chunks(c)) {
                    let mass: f64 = tr.iter().sum();
                    d.extend(p.iter().zip(tr).map(|(pi, ti)| scale * (pi * mass - ti)));
                }
                d
            });
            let dtarget = want(1).then(|| {
                let mut d = Vec::with_capacity(n * c);
                for z in x[0].data().chunks(c) {
                    let lse = log_sum_exp(z);
                    d.extend(z.iter().map(|zi| -scale * (zi - lse)));
                }
                d
            });
            vec![dlogits, dtarget]
        }
        Primitive::Reshape(_) => vec![Some(g.to_vec())],
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

/// `g [n, m] x b^T` where `b` is `[k, m]`.
fn matmul_bt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x g` where `a` is `[n, k]` and `g` is `[n, m]`.
fn matmul_at(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            orow.iter_mut().zip(grow).for_each(|(o, g)| *o += av * g);
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self, TensorError> {
        let op = "conv2d";
        rank(op, input, 4)?;
        rank(op, kernel, 4)?;
        let (n, ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (co, kci, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        if kci != ci || kh != kw || kh % 2 == 0 {
            return Err(mismatch(
                op,
                format!("input {:?} with kernel {:?}", input.shape(), kernel.shape()),
            ));
        }
        if bias.shape() != [co] {
            return Err(mismatch(op, format!("bias {:?} for {} output channels", bias.shape(), co)));
        }
        Ok(ConvGeom { n, ci, co, h, w, k: kh })
    }

    /// `[ci·k·k, h·w]` patch matrix of sample `b`: row `(c, dy, dx)` holds
    /// the input shifted by the kernel offset, zero outside the image.
    fn im2col(&self, input: &[f64], b: usize, col: &mut [f64]) {
        let (h, w, k, p) = (self.h, self.w, self.k, self.k / 2);
        let plane = h * w;
        col.fill(0.0);
        for c in 0..self.ci {
            let in_plane = &input[(b * self.ci + c) * plane..][..plane];
            for dy in 0..k {
                for dx in 0..k {
                    let row = &mut col[((c * k + dy) * k + dx) * plane..][..plane];
                    let (x0, x1) = (p.saturating_sub(dx), (w + p).saturating_sub(dx).min(w));
                    for y in p.saturating_sub(dy)..(h + p).saturating_sub(dy).min(h) {
                        let yi = y + dy - p;
                        row[y * w + x0..y * w + x1].copy_from_slice(&in_plane[yi * w + x0 + dx - p..yi * w + x1 + dx - p]);
                    }
                }
            }
        }
    }

    fn patch_len(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn forward(&self, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let plane = self.h * self.w;
        let patch = self.patch_len();
        let mut col = vec![0.0; patch * plane];
        let mut out = vec![0.0; self.n * self.co * plane];
        for b in 0..self.n {
            self.im2col(input, b, &mut col);
            for o in 0..self.co {
                let out_plane = &mut out[(b * self.co + o) * plane..][..plane];
                out_plane.fill(bias[o]);
                for (r, &kv) in kernel[o * patch..(o + 1) * patch].iter().enumerate() {
                    let src = &col[r * plane..(r + 1) * plane];
                    out_plane.iter_mut().zip(src).for_each(|(o, i)| *o += kv * i);
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        g: &[f64],
        wanted: &[bool],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let (h, w, k, p) = (self.h, self.w, self.k, self.k / 2);
        let plane = h * w;
        let patch = self.patch_len();
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut din = wanted[0].then(|| vec![0.0; input.len()]);
        let mut dk = wanted[1].then(|| vec![0.0; kernel.len()]);
        let mut db = wanted[2].then(|| vec![0.0; self.co]);
        let mut col = vec![0.0; if dk.is_some() { patch * plane } else { 0 }];
        // input gradient accumulates into a zero-padded copy, then is cropped
        let mut padded = vec![0.0; if din.is_some() { self.ci * ph * pw } else { 0 }];
        for b in 0..self.n {
            if dk.is_some() {
                self.im2col(input, b, &mut col);
            }
            padded.fill(0.0);
            for o in 0..self.co {
                let g_plane = &g[(b * self.co + o) * plane..][..plane];
                if let Some(db) = db.as_mut() {
                    db[o] += g_plane.iter().sum::<f64>();
                }
                if let Some(dk) = dk.as_mut() {
                    for r in 0..patch {
                        let src = &col[r * plane..(r + 1) * plane];
                        let mut acc = 0.0;
                        for (grow, irow) in g_plane.chunks_exact(w).zip(src.chunks_exact(w)) {
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dk[o * patch + r] += acc;
                    }
                }
                if din.is_some() {
                    for c in 0..self.ci {
                        let pad_plane = &mut padded[c * ph * pw..(c + 1) * ph * pw];
                        for dy in 0..k {
                            for dx in 0..k {
                                let kv = kernel[o * patch + (c * k + dy) * k + dx];
                                for (y, grow) in g_plane.chunks_exact(w).enumerate() {
                                    let dst = &mut pad_plane[(y + dy) * pw + dx..][..w];
                                    dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += kv * gv);
                                }
                            }
                        }
                    }
                }
            }
            if let Some(din) = din.as_mut() {
                for c in 0..self.ci {
                    for y in 0..h {
                        let src = &padded[c * ph * pw + (y + p) * pw + p..][..w];
                        din[((b * self.ci + c) * h + y) * w..][..w].copy_from_slice(src);
                    }
                }
            }
        }
        (din, dk, db)
    }
}
