use super::tensor::numel_of;
use super::{AgResult, AutogradError, Tensor};

/// Index of a value on a [`Tape`]. Only meaningful for the tape that issued
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation. Inputs are tape indices; a `Leaf` has none.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Conv2d { input: TensorId, kernel: TensorId, pad: usize },
    MeanPool2(TensorId),
    GlobalMeanPool(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Mean(TensorId),
    Sum(TensorId),
    Reshape(TensorId),
    SoftmaxCrossEntropy { logits: TensorId, labels: Vec<usize> },
    Mse { pred: TensorId, target: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Gradients for tape leaves, indexed by the ids the tape handed out.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Arena of values plus the ops that produced them. Consumed by
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Registers an input value, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor.requires_grad(false), Op::Leaf)
    }

    pub fn scalar_const(&mut self, value: f64) -> AgResult<TensorId> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn push_op(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> AgResult<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AutogradError::NonFinite { op: name });
        }
        let tensor = Tensor::new_unchecked(shape, data).requires_grad(requires);
        Ok(self.push(tensor, op))
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    // ── elementwise binary ops (equal shapes or scalar with tensor) ──

    fn binary_out_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> AgResult<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(AutogradError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn elementwise(&mut self, name: &'static str, a: TensorId, b: TensorId, f: fn(f64, f64) -> f64) -> AgResult<TensorId> {
        let shape = self.binary_out_shape(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if da.len() == 1 {
            db.iter().map(|&y| f(da[0], y)).collect()
        } else {
            da.iter().map(|&x| f(x, db[0])).collect()
        };
        let req = self.requires(&[a, b]);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push_op(name, shape, data, op, req)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> AgResult<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> AgResult<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> AgResult<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y)
    }

    /// `x * c` with a constant scalar.
    pub fn scale(&mut self, x: TensorId, c: f64) -> AgResult<TensorId> {
        let k = self.scalar_const(c)?;
        self.mul(x, k)
    }

    /// `x + c` with a constant scalar.
    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> AgResult<TensorId> {
        let k = self.scalar_const(c)?;
        self.add(x, k)
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> AgResult<TensorId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let req = self.requires(&[a, b]);
        self.push_op("matmul", vec![m, n], out, Op::MatMul(a, b), req)
    }

    /// 2d convolution, stride 1, square kernel, symmetric zero padding.
    /// Input is `[B,C,H,W]` or `[C,H,W]`; kernel is `[F,C,k,k]`.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, pad: usize) -> AgResult<TensorId> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(AutogradError::BadShape {
                op: "conv2d",
                shape: sk,
                why: "kernel must be [F,C,k,k] with square k".into(),
            });
        }
        let batched = match si.len() {
            3 => false,
            4 => true,
            _ => {
                return Err(AutogradError::BadShape {
                    op: "conv2d",
                    shape: si,
                    why: "input must be [C,H,W] or [B,C,H,W]".into(),
                })
            }
        };
        let (bsz, cin, h, w) = if batched {
            (si[0], si[1], si[2], si[3])
        } else {
            (1, si[0], si[1], si[2])
        };
        let (fout, kc, k) = (sk[0], sk[1], sk[2]);
        if kc != cin {
            return Err(AutogradError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(AutogradError::BadShape {
                op: "conv2d",
                shape: si,
                why: format!("kernel size {k} exceeds padded input with pad {pad}"),
            });
        }
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let (dx, dk) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; bsz * fout * ho * wo];
        for b in 0..bsz {
            for f in 0..fout {
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let wv = dk[((f * cin + c) * k + di) * k + dj];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..ho {
                                let y = (i + di) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let in_base = ((b * cin + c) * h + y as usize) * w;
                                let out_base = ((b * fout + f) * ho + i) * wo;
                                for j in 0..wo {
                                    let x = (j + dj) as isize - pad as isize;
                                    if x >= 0 && x < w as isize {
                                        out[out_base + j] += wv * dx[in_base + x as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if batched { vec![bsz, fout, ho, wo] } else { vec![fout, ho, wo] };
        let req = self.requires(&[input, kernel]);
        self.push_op("conv2d", shape, out, Op::Conv2d { input, kernel, pad }, req)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn mean_pool2(&mut self, input: TensorId) -> AgResult<TensorId> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 3 && si.len() != 4 {
            return Err(AutogradError::BadShape {
                op: "mean_pool2",
                shape: si,
                why: "input must be [C,H,W] or [B,C,H,W]".into(),
            });
        }
        let (h, w) = (si[si.len() - 2], si[si.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(AutogradError::BadShape {
                op: "mean_pool2",
                shape: si,
                why: "spatial dims must be even and nonzero".into(),
            });
        }
        let planes: usize = si[..si.len() - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let dx = self.value(input).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..ho {
                for j in 0..wo {
                    let base = (p * h + 2 * i) * w + 2 * j;
                    out[(p * ho + i) * wo + j] =
                        0.25 * (dx[base] + dx[base + 1] + dx[base + w] + dx[base + w + 1]);
                }
            }
        }
        let mut shape = si;
        let d = shape.len();
        shape[d - 2] = ho;
        shape[d - 1] = wo;
        let req = self.requires(&[input]);
        self.push_op("mean_pool2", shape, out, Op::MeanPool2(input), req)
    }

    /// Mean over the spatial dims: `[B,C,H,W]` -> `[B,C]`, `[C,H,W]` -> `[C]`.
    pub fn global_mean_pool(&mut self, input: TensorId) -> AgResult<TensorId> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 3 && si.len() != 4 {
            return Err(AutogradError::BadShape {
                op: "global_mean_pool",
                shape: si,
                why: "input must be [C,H,W] or [B,C,H,W]".into(),
            });
        }
        let (h, w) = (si[si.len() - 2], si[si.len() - 1]);
        if h == 0 || w == 0 {
            return Err(AutogradError::BadShape {
                op: "global_mean_pool",
                shape: si,
                why: "spatial dims must be nonzero".into(),
            });
        }
        let planes: usize = si[..si.len() - 2].iter().product();
        let dx = self.value(input).data();
        let inv = 1.0 / (h * w) as f64;
        let out: Vec<f64> = (0..planes)
            .map(|p| dx[p * h * w..(p + 1) * h * w].iter().sum::<f64>() * inv)
            .collect();
        let shape = si[..si.len() - 2].to_vec();
        let req = self.requires(&[input]);
        self.push_op("global_mean_pool", shape, out, Op::GlobalMeanPool(input), req)
    }

    // ── unary elementwise ──

    fn unary(&mut self, name: &'static str, x: TensorId, f: fn(f64) -> f64, op: Op) -> AgResult<TensorId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let req = self.requires(&[x]);
        self.push_op(name, shape, data, op, req)
    }

    pub fn relu(&mut self, x: TensorId) -> AgResult<TensorId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> AgResult<TensorId> {
        self.unary("sigmoid", x, sigmoid_stable, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> AgResult<TensorId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: TensorId) -> AgResult<TensorId> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Natural log; any input `<= 0` is reported as a non-finite result.
    pub fn log(&mut self, x: TensorId) -> AgResult<TensorId> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    // ── reductions and reshaping ──

    pub fn mean(&mut self, x: TensorId) -> AgResult<TensorId> {
        let t = self.value(x);
        let n = t.numel() as f64;
        let v = t.data().iter().sum::<f64>() / n;
        let req = self.requires(&[x]);
        self.push_op("mean", vec![], vec![v], Op::Mean(x), req)
    }

    pub fn sum(&mut self, x: TensorId) -> AgResult<TensorId> {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>();
        let req = self.requires(&[x]);
        self.push_op("sum", vec![], vec![v], Op::Sum(x), req)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> AgResult<TensorId> {
        let t = self.value(x);
        if numel_of(shape) != t.numel() {
            return Err(AutogradError::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                why: format!("element count does not match input {:?}", t.shape()),
            });
        }
        let data = t.data().to_vec();
        let req = self.requires(&[x]);
        self.push_op("reshape", shape.to_vec(), data, Op::Reshape(x), req)
    }

    // ── losses ──

    /// Mean cross entropy of row-wise softmax against integer labels.
    /// `logits` must be `[B,K]` with one label per row.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> AgResult<TensorId> {
        let t = self.value(logits);
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(AutogradError::BadShape {
                op: "softmax_cross_entropy",
                shape,
                why: "logits must be [B,K]".into(),
            });
        }
        let (bsz, k) = (shape[0], shape[1]);
        if labels.len() != bsz {
            return Err(AutogradError::LabelCount {
                op: "softmax_cross_entropy",
                labels: labels.len(),
                batch: bsz,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(AutogradError::LabelOutOfRange {
                op: "softmax_cross_entropy",
                label: bad,
                classes: k,
            });
        }
        let data = t.data();
        let mut total = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let z = &data[row * k..(row + 1) * k];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        let req = self.requires(&[logits]);
        self.push_op(
            "softmax_cross_entropy",
            vec![],
            vec![total / bsz as f64],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            req,
        )
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> AgResult<TensorId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "mse",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let n = tp.numel() as f64;
        let v = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let req = self.requires(&[pred, target]);
        self.push_op("mse", vec![], vec![v], Op::Mse { pred, target }, req)
    }

    // ── reverse pass ──

    /// Runs reverse-mode accumulation from a scalar output and consumes the
    /// tape. Returns one gradient buffer per `requires_grad` leaf.
    pub fn backward(self, out: TensorId) -> AgResult<Gradients> {
        let out_node = &self.nodes[out.0];
        if out_node.tensor.numel() != 1 {
            return Err(AutogradError::NonScalarOutput {
                shape: out_node.tensor.shape().to_vec(),
            });
        }
        if !out_node.tensor.requires_grad {
            return Err(AutogradError::DetachedOutput);
        }

        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adj[out.0] = Some(vec![1.0]);

        let needs = |id: TensorId| nodes[id.0].tensor.requires_grad;
        for i in (0..nodes.len()).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match nodes[i].op.clone() {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate_spread(&mut adj, nodes, a, &g, 1.0);
                    }
                    if needs(b) {
                        accumulate_spread(&mut adj, nodes, b, &g, 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate_spread(&mut adj, nodes, a, &g, 1.0);
                    }
                    if needs(b) {
                        accumulate_spread(&mut adj, nodes, b, &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (nodes[a.0].tensor.data(), nodes[b.0].tensor.data());
                    if needs(a) {
                        let contrib = mul_grad(&g, db);
                        accumulate_spread(&mut adj, nodes, a, &contrib, 1.0);
                    }
                    if needs(b) {
                        let contrib = mul_grad(&g, da);
                        accumulate_spread(&mut adj, nodes, b, &contrib, 1.0);
                    }
                }
                Op::MatMul(a, b) => {
                    let sa = nodes[a.0].tensor.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].tensor.shape()[1];
                    let (da, db) = (nodes[a.0].tensor.data(), nodes[b.0].tensor.data());
                    if needs(a) {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += gv * db[p * n + j];
                                }
                            }
                        }
                        accumulate(&mut adj, a, &ga);
                    }
                    if needs(b) {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = da[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut adj, b, &gb);
                    }
                }
                Op::Conv2d { input, kernel, pad } => {
                    conv2d_backward(&mut adj, nodes, input, kernel, pad, &g, needs(input), needs(kernel));
                }
                Op::MeanPool2(x) => {
                    let sx = nodes[x.0].tensor.shape();
                    let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                    let planes: usize = sx[..sx.len() - 2].iter().product();
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = 0.25 * g[(p * ho + i) * wo + j];
                                let base = (p * h + 2 * i) * w + 2 * j;
                                gx[base] += gv;
                                gx[base + 1] += gv;
                                gx[base + w] += gv;
                                gx[base + w + 1] += gv;
                            }
                        }
                    }
                    accumulate(&mut adj, x, &gx);
                }
                Op::GlobalMeanPool(x) => {
                    let sx = nodes[x.0].tensor.shape();
                    let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                    let planes: usize = sx[..sx.len() - 2].iter().product();
                    let inv = 1.0 / (h * w) as f64;
                    let mut gx = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        let gv = g[p] * inv;
                        for v in &mut gx[p * h * w..(p + 1) * h * w] {
                            *v += gv;
                        }
                    }
                    accumulate(&mut adj, x, &gx);
                }
                Op::Relu(x) => {
                    let dx = nodes[x.0].tensor.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(dx)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, x, &gx);
                }
                Op::Sigmoid(x) => {
                    let y = nodes[i].tensor.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                    accumulate(&mut adj, x, &gx);
                }
                Op::Tanh(x) => {
                    let y = nodes[i].tensor.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                    accumulate(&mut adj, x, &gx);
                }
                Op::Exp(x) => {
                    let y = nodes[i].tensor.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                    accumulate(&mut adj, x, &gx);
                }
                Op::Log(x) => {
                    let dx = nodes[x.0].tensor.data();
                    let gx: Vec<f64> = g.iter().zip(dx).map(|(&gv, &xv)| gv / xv).collect();
                    accumulate(&mut adj, x, &gx);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].tensor.numel();
                    let gv = g[0] / n as f64;
                    accumulate_fill(&mut adj, x, n, gv);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].tensor.numel();
                    accumulate_fill(&mut adj, x, n, g[0]);
                }
                Op::Reshape(x) => {
                    accumulate(&mut adj, x, &g);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let t = &nodes[logits.0].tensor;
                    let k = t.shape()[1];
                    let bsz = labels.len();
                    let data = t.data();
                    let scale = g[0] / bsz as f64;
                    let mut gl = vec![0.0; data.len()];
                    for (row, &y) in labels.iter().enumerate() {
                        let z = &data[row * k..(row + 1) * k];
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..k {
                            let p = (z[j] - m).exp() / denom;
                            gl[row * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut adj, logits, &gl);
                }
                Op::Mse { pred, target } => {
                    let (dp, dt) = (nodes[pred.0].tensor.data(), nodes[target.0].tensor.data());
                    let scale = 2.0 * g[0] / dp.len() as f64;
                    if needs(pred) {
                        let gp: Vec<f64> = dp.iter().zip(dt).map(|(&a, &b)| scale * (a - b)).collect();
                        accumulate(&mut adj, pred, &gp);
                    }
                    if needs(target) {
                        let gt: Vec<f64> = dp.iter().zip(dt).map(|(&a, &b)| -scale * (a - b)).collect();
                        accumulate(&mut adj, target, &gt);
                    }
                }
            }
        }

        // Only leaves keep their slots; interior adjoints were consumed above.
        Ok(Gradients { slots: adj })
    }
}

/// `g` elementwise times `other`, honoring the scalar broadcast cases of mul.
fn mul_grad(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()
    } else {
        // other is scalar
        g.iter().map(|&gv| gv * other[0]).collect()
    }
}

/// Adds `sign * contrib` into the adjoint of `id`, reducing to a scalar slot
/// when the target is a scalar that was broadcast.
fn accumulate_spread(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, contrib: &[f64], sign: f64) {
    let n = nodes[id.0].tensor.numel();
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; n]);
    if n == contrib.len() {
        for (s, &c) in slot.iter_mut().zip(contrib) {
            *s += sign * c;
        }
    } else {
        debug_assert_eq!(n, 1);
        slot[0] += sign * contrib.iter().sum::<f64>();
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
    for (s, &c) in slot.iter_mut().zip(contrib) {
        *s += c;
    }
}

fn accumulate_fill(adj: &mut [Option<Vec<f64>>], id: TensorId, n: usize, value: f64) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; n]);
    for s in slot.iter_mut() {
        *s += value;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    input: TensorId,
    kernel: TensorId,
    pad: usize,
    g: &[f64],
    need_input: bool,
    need_kernel: bool,
) {
    let si = nodes[input.0].tensor.shape();
    let sk = nodes[kernel.0].tensor.shape();
    let batched = si.len() == 4;
    let (bsz, cin, h, w) = if batched {
        (si[0], si[1], si[2], si[3])
    } else {
        (1, si[0], si[1], si[2])
    };
    let (fout, k) = (sk[0], sk[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let dx = nodes[input.0].tensor.data();
    let dk = nodes[kernel.0].tensor.data();

    let mut gx = if need_input { vec![0.0; dx.len()] } else { Vec::new() };
    let mut gk = if need_kernel { vec![0.0; dk.len()] } else { Vec::new() };

    for b in 0..bsz {
        for f in 0..fout {
            for c in 0..cin {
                for di in 0..k {
                    for dj in 0..k {
                        let widx = ((f * cin + c) * k + di) * k + dj;
                        let wv = dk[widx];
                        let mut wgrad = 0.0;
                        for i in 0..ho {
                            let y = (i + di) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let in_base = ((b * cin + c) * h + y as usize) * w;
                            let out_base = ((b * fout + f) * ho + i) * wo;
                            for j in 0..wo {
                                let x = (j + dj) as isize - pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let gv = g[out_base + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                if need_input {
                                    gx[in_base + x as usize] += wv * gv;
                                }
                                if need_kernel {
                                    wgrad += dx[in_base + x as usize] * gv;
                                }
                            }
                        }
                        if need_kernel {
                            gk[widx] += wgrad;
                        }
                    }
                }
            }
        }
    }
    if need_input {
        accumulate(adj, input, &gx);
    }
    if need_kernel {
        accumulate(adj, kernel, &gk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> TensorId {
        tape.leaf(Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap().requires_grad(true))
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &[3.0, -1.0, 2.0, 0.5]);
        let eye = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn conv2d_all_ones_interior() {
        // 3x3 ones kernel over a 4x4 ones image, pad 1: interior outputs see
        // a full 3x3 window away from borders only at no positions here, but
        // the exact zero-padded sums are easy to state: corners 4, edges 6,
        // interior 9.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4, 4], &[1.0; 16]);
        let k = tape.constant(Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4]);
        let d = tape.value(y).data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[5], 9.0);
    }

    #[test]
    fn conv2d_shape_mismatch_reports_op() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4, 4], &[0.0; 32]);
        let k = tape.constant(Tensor::from_vec(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap());
        let err = tape.conv2d(x, k, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{msg}");
    }

    #[test]
    fn mean_pool2_averages_blocks() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.mean_pool2(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn mean_pool2_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 4], &[0.0; 12]);
        assert!(tape.mean_pool2(x).is_err());
    }

    #[test]
    fn square_gradient() {
        // d(x*x)/dx at 3 is 6.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scalar_broadcast_grad_reduces() {
        // y = sum(c * v) with scalar c: dc = sum(v).
        let mut tape = Tape::new();
        let c = leaf(&mut tape, &[], &[2.0]);
        let v = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let prod = tape.mul(c, v).unwrap();
        let y = tape.sum(prod).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(c).unwrap(), &[6.0]);
    }

    #[test]
    fn add_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[0.0; 2]);
        let b = leaf(&mut tape, &[3], &[0.0; 3]);
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, AutogradError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn log_of_nonpositive_is_guarded() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[0.0]);
        assert!(matches!(tape.log(x), Err(AutogradError::NonFinite { op: "log" })));
    }

    #[test]
    fn exp_overflow_is_guarded() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[1000.0]);
        assert!(matches!(tape.exp(x), Err(AutogradError::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(AutogradError::NonScalarOutput { .. })));
    }

    #[test]
    fn backward_rejects_detached_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(AutogradError::DetachedOutput)));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // Uniform logits over K classes give ln K.
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[2, 4], &[0.0; 8]);
        let ce = tape.softmax_cross_entropy(z, &[1, 3]).unwrap();
        let v = tape.value(ce).item().unwrap();
        assert!((v - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_checks() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[2, 4], &[0.0; 8]);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0, 4]),
            Err(AutogradError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0]),
            Err(AutogradError::LabelCount { .. })
        ));
    }

    #[test]
    fn mse_matches_hand_value() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 3.0]);
        let b = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap());
        let y = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 2.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // y = x*x + x: dy/dx = 2x + 1 = 7 at x=3.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[2, 3], &[0.3, -0.2, 0.9, 1.4, -1.1, 0.05]);
            let w = leaf(&mut tape, &[3, 2], &[0.5, -0.7, 0.1, 0.2, 0.8, -0.3]);
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h).unwrap();
            let loss = tape.softmax_cross_entropy(a, &[0, 1]).unwrap();
            let v = tape.value(loss).item().unwrap();
            let grads = tape.backward(loss).unwrap();
            (v, grads.get(w).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
