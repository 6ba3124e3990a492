//! Recorded computation graph for reverse-mode differentiation.
//!
//! Primitives append nodes to a tape; inputs always precede consumers, so one
//! reverse sweep from the loss visits each node exactly once. Leaf gradients
//! accumulate across `backward` calls until the graph (or the persistent
//! tensor they are copied into) is explicitly reset.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Conv2d { input: Var, kernels: Var, stride: usize, padding: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddChannelBias { x: Var, bias: Var },
    Upsample2d { x: Var, factor: usize },
    Mean { x: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, label: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// The tape. One per forward pass (or training step); not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a copy of `t` as a leaf; gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad_flag();
        self.push_unchecked(Op::Leaf, t.clone(), requires_grad)
    }

    /// Inserts a copy of `t` as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t.clone(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Drops every accumulated gradient, including leaf gradients.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name, step: None });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Conv2d { input, kernels, .. } => self.rg(*input) || self.rg(*kernels),
            Op::AddChannelBias { x, bias } => self.rg(*x) || self.rg(*bias),
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::MaxPool2d { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Upsample2d { x, .. }
            | Op::Mean { x }
            | Op::Sum { x } => self.rg(*x),
            Op::SoftmaxCrossEntropy { logits, .. } => self.rg(*logits),
        };
        let value = Tensor { shape, values, grad: None, requires_grad: false };
        debug_assert_eq!(value.shape.iter().product::<usize>(), value.values.len());
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.values
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// Matrix product of `a: [m×k]` and `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.vals(a), self.vals(b), m, k, n);
        self.push("matmul", Op::Matmul { a, b }, vec![m, n], out)
    }

    /// 2-D cross-correlation of `input: [C_in×H×W]` with `kernels:
    /// [C_out×C_in×kh×kw]`. No kernel flip; output extents follow
    /// `floor((H + 2·padding − kh) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernels));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("expected input [C×H×W] and kernels [O×C×kh×kw], got {si:?} and {sk:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel channels {kc} vs input channels {c_in}"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let out = conv2d_forward(
            self.vals(input),
            self.vals(kernels),
            ConvDims { c_in, h, w, c_out, kh, kw, stride, padding, oh, ow },
        );
        self.push(
            "conv2d",
            Op::Conv2d { input, kernels, stride, padding },
            vec![c_out, oh, ow],
            out,
        )
    }

    /// Elementwise `max(0, x)`. The subgradient at zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", Op::Relu { x }, shape, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", Op::Sigmoid { x }, shape, out)
    }

    /// Window-max pooling over `x: [C×H×W]`. Windows must tile the input
    /// exactly: `(H − window) % stride == 0` and likewise for `W`; no partial
    /// windows are taken.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dimension("maxpool2d", format!("expected [C×H×W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if window == 0 || stride == 0 {
            return Err(Error::contract("maxpool2d", "window and stride must be positive"));
        }
        if window > h || window > w || (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(Error::dimension(
                "maxpool2d",
                format!("window {window} stride {stride} incompatible with {h}×{w}"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let vals = self.vals(x);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..window {
                        let iy = oy * stride + ky;
                        let row = (ch * h + iy) * w;
                        for kx in 0..window {
                            let idx = row + ox * stride + kx;
                            if vals[idx] > best {
                                best = vals[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push("maxpool2d", Op::MaxPool2d { x, argmax }, vec![c, oh, ow], out)
    }

    /// Reinterprets `x` with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.vals(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape(x)),
            ));
        }
        let out = self.vals(x).to_vec();
        self.push("reshape", Op::Reshape { x }, shape.to_vec(), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dimension("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let vals = self.vals(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = vals[i * c + j];
            }
        }
        self.push("transpose", Op::Transpose { x }, vec![c, r], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, op, shape, out)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale", step: None });
        }
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Op::Scale { x, c }, shape, out)
    }

    /// Adds `bias: [C]` to every spatial position of `x: [C×H×W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.shape(bias) != [s[0]] {
            return Err(Error::dimension(
                "add_channel_bias",
                format!("x {s:?} with bias {:?}", self.shape(bias)),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let mut out = self.vals(x).to_vec();
        let bvals = self.vals(bias).to_vec();
        for ch in 0..c {
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v += bvals[ch];
            }
        }
        self.push("add_channel_bias", Op::AddChannelBias { x, bias }, vec![c, h, w], out)
    }

    /// Nearest-neighbour upsampling of `x: [C×H×W]` by an integer factor.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dimension("upsample2d", format!("expected [C×H×W], got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::contract("upsample2d", "factor must be positive"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let vals = self.vals(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let iy = oy / factor;
                let src = (ch * h + iy) * w;
                let dst = (ch * oh + oy) * ow;
                for ox in 0..ow {
                    out[dst + ox] = vals[src + ox / factor];
                }
            }
        }
        self.push("upsample2d", Op::Upsample2d { x, factor }, vec![c, oh, ow], out)
    }

    /// Arithmetic mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals(x).len() as f64;
        let m = self.vals(x).iter().sum::<f64>() / n;
        self.push("mean", Op::Mean { x }, vec![1], vec![m])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.vals(x).iter().sum::<f64>();
        self.push("sum", Op::Sum { x }, vec![1], vec![s])
    }

    /// `−log softmax(logits)[label]` with log-sum-exp stabilization.
    /// `logits` must be a vector (any single-axis shape).
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vals = self.vals(logits);
        let k = vals.len();
        if label >= k {
            return Err(Error::index(
                "softmax_cross_entropy",
                format!("label {label} with {k} classes"),
            ));
        }
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let loss = z.ln() + m - vals[label];
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy { logits, probs, label },
            vec![1],
            vec![loss],
        )
    }

    // ── Composites ──────────────────────────────────────────────────────

    /// Sum of squared elements.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Fully connected layer: `x: [1×in]` times `w: [in×out]` plus `b: [1×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from the scalar `loss`. Gradients of leaves accumulate
    /// across calls; intermediate gradients are recomputed each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::index("backward", format!("node {} of {}", loss.0, self.nodes.len())));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        for id in 0..=loss.0 {
            if !self.nodes[id].requires_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let want = self.nodes[id].requires_grad
                || (matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].value.requires_grad_flag());
            if !want {
                continue;
            }
            let n = self.nodes[id].value.len();
            match (&self.nodes[id].op, &mut self.grads[id]) {
                // leaves persist so gradients accumulate across backward calls
                (Op::Leaf, slot @ None) => *slot = Some(vec![0.0; n]),
                (Op::Leaf, Some(_)) => {}
                (_, slot) => *slot = Some(vec![0.0; n]),
            }
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] += 1.0;
        } else {
            // loss does not depend on any gradient target; nothing to do
            return Ok(());
        }

        let Graph { nodes, grads } = self;
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, grads, id, &g);
            grads[id] = Some(g);
        }

        for g in grads[..=loss.0].iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward", step: None });
            }
        }
        Ok(())
    }
}

/// Adds the vector-Jacobian product of node `id` (upstream gradient `g`)
/// into the gradient buffers of its inputs.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    macro_rules! sink {
        ($v:expr) => {
            if nodes[$v.0].requires_grad || nodes[$v.0].value.requires_grad_flag() {
                grads[$v.0].as_mut()
            } else {
                None
            }
        };
    }
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let sa = nodes[a.0].value.shape();
            let (m, k) = (sa[0], sa[1]);
            let n = nodes[b.0].value.shape()[1];
            let av = nodes[a.0].value.values();
            let bv = nodes[b.0].value.values();
            if let Some(da) = sink!(a) {
                // dA = G · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        let grow = i * n;
                        let brow = p * n;
                        for j in 0..n {
                            s += g[grow + j] * bv[brow + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            }
            if let Some(db) = sink!(b) {
                // dB = Aᵀ · G
                for p in 0..k {
                    for i in 0..m {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let grow = i * n;
                        let brow = p * n;
                        for j in 0..n {
                            db[brow + j] += aip * g[grow + j];
                        }
                    }
                }
            }
        }
        Op::Conv2d { input, kernels, stride, padding } => {
            let si = nodes[input.0].value.shape();
            let sk = nodes[kernels.0].value.shape();
            let so = nodes[id].value.shape();
            let dims = ConvDims {
                c_in: si[0],
                h: si[1],
                w: si[2],
                c_out: sk[0],
                kh: sk[2],
                kw: sk[3],
                stride: *stride,
                padding: *padding,
                oh: so[1],
                ow: so[2],
            };
            let iv = nodes[input.0].value.values();
            let kv = nodes[kernels.0].value.values();
            if let Some(di) = sink!(input) {
                conv2d_backward_input(di, kv, g, &dims);
            }
            if let Some(dk) = sink!(kernels) {
                conv2d_backward_kernels(dk, iv, g, &dims);
            }
        }
        Op::Relu { x } => {
            let xv = nodes[x.0].value.values();
            if let Some(dx) = sink!(x) {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let yv = nodes[id].value.values();
            if let Some(dx) = sink!(x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = sink!(x) {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = sink!(x) {
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }
        }
        Op::Transpose { x } => {
            let s = nodes[x.0].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(dx) = sink!(x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = sink!(a) {
                for i in 0..g.len() {
                    da[i] += g[i];
                }
            }
            if let Some(db) = sink!(b) {
                for i in 0..g.len() {
                    db[i] += g[i];
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = sink!(a) {
                for i in 0..g.len() {
                    da[i] += g[i];
                }
            }
            if let Some(db) = sink!(b) {
                for i in 0..g.len() {
                    db[i] -= g[i];
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.values();
            let bv = nodes[b.0].value.values();
            if let Some(da) = sink!(a) {
                for i in 0..g.len() {
                    da[i] += bv[i] * g[i];
                }
            }
            if let Some(db) = sink!(b) {
                for i in 0..g.len() {
                    db[i] += av[i] * g[i];
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = sink!(x) {
                for i in 0..g.len() {
                    dx[i] += c * g[i];
                }
            }
        }
        Op::AddChannelBias { x, bias } => {
            if let Some(dx) = sink!(x) {
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }
            if let Some(dbias) = sink!(bias) {
                let s = nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                for ch in 0..s[0] {
                    dbias[ch] += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
            }
        }
        Op::Upsample2d { x, factor } => {
            let s = nodes[x.0].value.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (f, ow) = (*factor, s[2] * factor);
            if let Some(dx) = sink!(x) {
                for ch in 0..c {
                    for oy in 0..h * f {
                        let iy = oy / f;
                        let src = (ch * h + iy) * w;
                        let dst = (ch * h * f + oy) * ow;
                        for ox in 0..ow {
                            dx[src + ox / f] += g[dst + ox];
                        }
                    }
                }
            }
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.len() as f64;
            if let Some(dx) = sink!(x) {
                let c = g[0] / n;
                for v in dx.iter_mut() {
                    *v += c;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = sink!(x) {
                for v in dx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, probs, label } => {
            if let Some(dl) = sink!(logits) {
                for (k, &p) in probs.iter().enumerate() {
                    let onehot = if k == *label { 1.0 } else { 0.0 };
                    dl[k] += g[0] * (p - onehot);
                }
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    /// Output-column range for which the input column `ox·stride + kx − padding`
    /// stays inside `[0, w)`, plus the input column of the first valid tap.
    fn valid_cols(&self, kx: usize) -> Option<(usize, usize, usize)> {
        // ix = ox·s + kx − p must satisfy 0 ≤ ix < w
        let s = self.stride as isize;
        let off = kx as isize - self.padding as isize;
        let lo = (-off + s - 1).div_euclid(s).max(0) as usize;
        let hi_excl = if self.w as isize > off {
            ((self.w as isize - off + s - 1).div_euclid(s) as usize).min(self.ow)
        } else {
            0
        };
        if lo >= hi_excl {
            return None;
        }
        let ix0 = (lo as isize * s + off) as usize;
        Some((lo, hi_excl, ix0))
    }

    fn valid_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        if iy < 0 || iy >= self.h as isize {
            None
        } else {
            Some(iy as usize)
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn conv2d_forward(input: &[f64], kernels: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.oh * d.ow];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wgt = kernels[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi, ix0)) = d.valid_cols(kx) else { continue };
                    for oy in 0..d.oh {
                        let Some(iy) = d.valid_row(oy, ky) else { continue };
                        let irow = (ci * d.h + iy) * d.w;
                        let orow = (co * d.oh + oy) * d.ow;
                        let mut ix = ix0;
                        for ox in ox_lo..ox_hi {
                            out[orow + ox] += wgt * input[irow + ix];
                            ix += d.stride;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(di: &mut [f64], kernels: &[f64], g: &[f64], d: &ConvDims) {
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wgt = kernels[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let Some((ox_lo, ox_hi, ix0)) = d.valid_cols(kx) else { continue };
                    for oy in 0..d.oh {
                        let Some(iy) = d.valid_row(oy, ky) else { continue };
                        let irow = (ci * d.h + iy) * d.w;
                        let orow = (co * d.oh + oy) * d.ow;
                        let mut ix = ix0;
                        for ox in ox_lo..ox_hi {
                            di[irow + ix] += wgt * g[orow + ox];
                            ix += d.stride;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(dk: &mut [f64], input: &[f64], g: &[f64], d: &ConvDims) {
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let Some((ox_lo, ox_hi, ix0)) = d.valid_cols(kx) else { continue };
                    let mut acc = 0.0;
                    for oy in 0..d.oh {
                        let Some(iy) = d.valid_row(oy, ky) else { continue };
                        let irow = (ci * d.h + iy) * d.w;
                        let orow = (co * d.oh + oy) * d.ow;
                        let mut ix = ix0;
                        for ox in ox_lo..ox_hi {
                            acc += input[irow + ix] * g[orow + ox];
                            ix += d.stride;
                        }
                    }
                    dk[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}
