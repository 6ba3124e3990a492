//! Domain transfer: Gram-matrix style statistics over a fixed feature
//! network, a content-preservation loss, direct image optimization with
//! backtracking, and a small feed-forward transform network.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::opt::{Adam, AdamConfig};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

// ── Fixed feature network ───────────────────────────────────────────────

/// Frozen random-weight conv stack used to define the transfer losses:
/// three blocks of conv 3×3 → relu → pool 2×2 with channels (8, 12, 16).
/// Only the image (or the transform network) ever receives gradients.
pub struct LossNetwork {
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
    /// Layer whose activation must be preserved.
    pub content_layer: String,
    /// Layers whose Gram statistics define the domain term.
    pub domain_layers: Vec<String>,
}

const LOSS_NET_CHANNELS: [usize; 3] = [8, 12, 16];

impl LossNetwork {
    pub fn seeded(seed: u64) -> Self {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in LOSS_NET_CHANNELS.iter().enumerate() {
            let fan_in = c_in * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut r = stream(seed, "loss-net", i as u64);
            let values: Vec<f64> =
                (0..c_out * c_in * 9).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
            kernels.push(Tensor::new(vec![c_out, c_in, 3, 3], values).expect("finite init"));
            biases.push(Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        LossNetwork {
            kernels,
            biases,
            content_layer: "block2".into(),
            domain_layers: vec!["block1".into(), "block2".into(), "block3".into()],
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=LOSS_NET_CHANNELS.len()).map(|b| format!("block{b}")).collect()
    }

    /// Runs the stack on `image`, returning every block output in order.
    /// Network weights enter `g` as constants, so they stay frozen.
    pub fn features_on(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.kernels.len());
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            let kv = g.constant(k);
            let bv = g.constant(b);
            let conv = g.conv2d(x, kv, 1, 1)?;
            let biased = g.add_channel_bias(conv, bv)?;
            let act = g.relu(biased)?;
            x = g.maxpool2d(act, 2, 2)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Concrete block activations keyed by layer name.
    pub fn features(&self, image: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(image);
        let feats = self.features_on(&mut g, x)?;
        Ok(self
            .layer_names()
            .into_iter()
            .zip(feats)
            .map(|(name, v)| (name, g.value(v).clone()))
            .collect())
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::index("loss_network", format!("unknown layer {name:?}")))
    }

    /// Content-layer activation of `x`, used as a transfer target.
    pub fn content_target(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        Ok(feats[&self.content_layer].clone())
    }

    /// Gram matrices of `y_d` at every domain layer, used as transfer targets.
    pub fn gram_targets(&self, y_d: &Tensor) -> Result<Vec<Tensor>> {
        let feats = self.features(y_d)?;
        self.domain_layers.iter().map(|l| Ok(gram(&feats[l])?.matrix)).collect()
    }
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Channel-by-channel inner products of a `[C×H×W]` activation, normalized
/// by `C·H·W`. Symmetric and positive semi-definite by construction.
pub struct GramMatrix {
    pub matrix: Tensor,
}

/// Graph form of [`gram`]: reshape to `[C × HW]`, multiply by the transpose,
/// scale by `1/(C·H·W)`.
pub fn gram_on(g: &mut Graph, features: Var) -> Result<Var> {
    let s = g.value(features).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dimension("gram", format!("expected [C×H×W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let kappa = g.reshape(features, &[c, h * w])?;
    let kappa_t = g.transpose(kappa)?;
    let prod = g.matmul(kappa, kappa_t)?;
    g.scale(prod, 1.0 / (c * h * w) as f64)
}

pub fn gram(features: &Tensor) -> Result<GramMatrix> {
    let mut g = Graph::new();
    let f = g.constant(features);
    let out = gram_on(&mut g, f)?;
    Ok(GramMatrix { matrix: g.value(out).clone() })
}

/// Mean squared deviation between two same-shape activations:
/// `||y − x||² / (C·H·W)`.
pub fn content_loss_on(g: &mut Graph, y_feat: Var, x_feat: Var) -> Result<Var> {
    let n = g.value(y_feat).len();
    let d = g.sub(y_feat, x_feat)?;
    let sq = g.sum_squares(d)?;
    g.scale(sq, 1.0 / n as f64)
}

pub fn content_loss(y_feat: &Tensor, x_feat: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let y = g.constant(y_feat);
    let x = g.constant(x_feat);
    let out = content_loss_on(&mut g, y, x)?;
    Ok(g.value(out).item())
}

/// Squared Frobenius distance between the Gram matrices of two activations,
/// normalized by `C·H·W` of `y_feat`. Channel counts must match; spatial
/// extents may differ.
pub fn domain_loss_on(g: &mut Graph, y_feat: Var, yd_gram: Var) -> Result<Var> {
    let s = g.value(y_feat).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dimension("domain_loss", format!("expected [C×H×W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if g.value(yd_gram).shape() != [c, c] {
        return Err(Error::dimension(
            "domain_loss",
            format!("target Gram {:?} does not match {c} channels", g.value(yd_gram).shape()),
        ));
    }
    let gy = gram_on(g, y_feat)?;
    let d = g.sub(gy, yd_gram)?;
    let sq = g.sum_squares(d)?;
    g.scale(sq, 1.0 / (c * h * w) as f64)
}

pub fn domain_loss(y_feat: &Tensor, yd_feat: &Tensor) -> Result<f64> {
    if yd_feat.shape().len() != 3 || yd_feat.shape()[0] != y_feat.shape().first().copied().unwrap_or(0)
    {
        return Err(Error::dimension(
            "domain_loss",
            format!("channel mismatch: {:?} vs {:?}", y_feat.shape(), yd_feat.shape()),
        ));
    }
    let target = gram(yd_feat)?.matrix;
    let mut g = Graph::new();
    let y = g.constant(y_feat);
    let t = g.constant(&target);
    let out = domain_loss_on(&mut g, y, t)?;
    Ok(g.value(out).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for TransferWeights {
    fn default() -> Self {
        TransferWeights { lambda_c: 1.0, lambda_s: 5.0 }
    }
}

impl TransferWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite())
            || !(self.lambda_s >= 0.0 && self.lambda_s.is_finite())
        {
            return Err(Error::Config(format!(
                "transfer weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Precomputed targets: the content activation of the source image and the
/// Gram matrices of the target-domain image.
pub struct TransferTargets {
    pub content: Tensor,
    pub grams: Vec<Tensor>,
}

impl TransferTargets {
    pub fn new(phi: &LossNetwork, x: &Tensor, y_d: &Tensor) -> Result<Self> {
        Ok(TransferTargets { content: phi.content_target(x)?, grams: phi.gram_targets(y_d)? })
    }
}

/// Records the full objective `λ_c·content + λ_s·Σ domain` of image node `y`.
pub fn transfer_objective_on(
    g: &mut Graph,
    phi: &LossNetwork,
    y: Var,
    targets: &TransferTargets,
    w: &TransferWeights,
) -> Result<Var> {
    w.validate()?;
    let feats = phi.features_on(g, y)?;
    let names = phi.layer_names();
    let content_idx = phi.layer_index(&phi.content_layer)?;
    let ct = g.constant(&targets.content);
    let content = content_loss_on(g, feats[content_idx], ct)?;
    let mut total = g.scale(content, w.lambda_c)?;
    for (layer, target) in phi.domain_layers.iter().zip(&targets.grams) {
        let idx = names.iter().position(|n| n == layer).expect("domain layers are block names");
        let tg = g.constant(target);
        let d = domain_loss_on(g, feats[idx], tg)?;
        let weighted = g.scale(d, w.lambda_s)?;
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

fn objective_value(
    phi: &LossNetwork,
    image: &Tensor,
    targets: &TransferTargets,
    w: &TransferWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let y = g.constant(image);
    let obj = transfer_objective_on(&mut g, phi, y, targets, w)?;
    Ok(g.value(obj).item())
}

// ── Direct image optimization ───────────────────────────────────────────

pub struct TransferOutcome {
    pub image: Tensor,
    /// Objective after initialization and after every accepted step;
    /// non-increasing by construction.
    pub trace: Vec<f64>,
}

/// Projected gradient descent on the image itself, starting from `y = x`.
/// A trial step that raises the objective halves the step size and retries,
/// so the recorded objective trace never increases; iteration stops early
/// once the step size underflows.
pub fn transfer_image(
    x: &Tensor,
    y_d: &Tensor,
    phi: &LossNetwork,
    w: &TransferWeights,
    steps: usize,
    lr: f64,
) -> Result<TransferOutcome> {
    w.validate()?;
    if steps == 0 {
        return Err(Error::contract("transfer_image", "need at least one step"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract("transfer_image", format!("bad step size {lr}")));
    }
    let targets = TransferTargets::new(phi, x, y_d)?;
    let mut y = x.clone();
    let mut current = objective_value(phi, &y, &targets, w)?;
    let mut trace = vec![current];
    let mut lr = lr;
    for step in 0..steps {
        let mut g = Graph::new();
        let yv = g.leaf(&y.clone().requires_grad(true));
        let obj = transfer_objective_on(&mut g, phi, yv, &targets, w)?;
        if !g.value(obj).item().is_finite() {
            return Err(Error::NonFinite { op: "transfer_image", step: Some(step) });
        }
        g.backward(obj)?;
        let grad = g.grad(yv).expect("image is the gradient target").to_vec();

        loop {
            let trial_vals: Vec<f64> =
                y.values().iter().zip(&grad).map(|(v, d)| (v - lr * d).clamp(0.0, 1.0)).collect();
            let trial = Tensor::new(y.shape().to_vec(), trial_vals)?;
            let value = objective_value(phi, &trial, &targets, w)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "transfer_image", step: Some(step) });
            }
            if value <= current {
                y = trial;
                current = value;
                trace.push(current);
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                return Ok(TransferOutcome { image: y, trace });
            }
        }
    }
    Ok(TransferOutcome { image: y, trace })
}

// ── Transform network ───────────────────────────────────────────────────

const TRANSFORM_HIDDEN: usize = 8;

/// Small encoder-decoder: conv → relu → pool, conv → relu → 2× upsample,
/// conv → sigmoid. Output extent equals input extent (H, W must be even).
#[derive(Debug)]
pub struct TransformNet {
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl TransformNet {
    pub fn build(seed: u64) -> Self {
        let h = TRANSFORM_HIDDEN;
        let shapes: [(Vec<usize>, &str); 6] = [
            (vec![h, 3, 3, 3], "enc.weight"),
            (vec![h], "enc.bias"),
            (vec![h, h, 3, 3], "mid.weight"),
            (vec![h], "mid.bias"),
            (vec![3, h, 3, 3], "dec.weight"),
            (vec![3], "dec.bias"),
        ];
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (i, (shape, name)) in shapes.into_iter().enumerate() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut r = stream(seed, "transform-net", i as u64);
                let values: Vec<f64> =
                    (0..shape.iter().product()).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
                Tensor::new(shape, values).expect("finite init")
            };
            params.push(t.requires_grad(true));
            names.push(name.to_string());
        }
        TransformNet { params, names }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract(
                "set_params",
                format!("expected {} tensors, got {}", self.params.len(), params.len()),
            ));
        }
        for (new, old) in params.iter().zip(&self.params) {
            if new.shape() != old.shape() {
                return Err(Error::contract(
                    "set_params",
                    format!("shape {:?} vs {:?}", new.shape(), old.shape()),
                ));
            }
        }
        self.params = params.into_iter().map(|p| p.requires_grad(true)).collect();
        Ok(())
    }

    pub fn attach(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    pub fn forward_on(&self, g: &mut Graph, vars: &[Var], image: Var) -> Result<Var> {
        let s = g.value(image).shape().to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dimension(
                "transform_net",
                format!("expected [3×H×W] with even extents, got {s:?}"),
            ));
        }
        let c1 = g.conv2d(image, vars[0], 1, 1)?;
        let c1 = g.add_channel_bias(c1, vars[1])?;
        let c1 = g.relu(c1)?;
        let down = g.maxpool2d(c1, 2, 2)?;
        let c2 = g.conv2d(down, vars[2], 1, 1)?;
        let c2 = g.add_channel_bias(c2, vars[3])?;
        let c2 = g.relu(c2)?;
        let up = g.upsample2d(c2, 2)?;
        let c3 = g.conv2d(up, vars[4], 1, 1)?;
        let c3 = g.add_channel_bias(c3, vars[5])?;
        g.sigmoid(c3)
    }

    /// Maps an image through the network; output values lie in (0,1).
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.iter().map(|p| g.constant(p)).collect::<Vec<_>>();
        let x = g.constant(image);
        let y = self.forward_on(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

pub struct TransformTraining {
    pub net: TransformNet,
    /// Mean transfer objective of `net(x)` over the held-out split.
    pub heldout_objective: f64,
    /// Mean transfer objective of the identity map over the same split.
    pub identity_objective: f64,
    pub steps_run: usize,
}

/// Trains a [`TransformNet`] to minimize the transfer objective in
/// expectation over `dataset`, against one target-domain image. Every fifth
/// sample is held out for evaluation (the whole set when it is too small to
/// split). Deterministic under `seed`.
pub fn train_transform_net(
    dataset: &[Tensor],
    y_d: &Tensor,
    phi: &LossNetwork,
    w: &TransferWeights,
    epochs: usize,
    seed: u64,
) -> Result<TransformTraining> {
    w.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train_transform_net", "dataset is empty"));
    }
    if epochs == 0 {
        return Err(Error::contract("train_transform_net", "need at least one epoch"));
    }
    let heldout: Vec<usize> = if dataset.len() >= 5 {
        (0..dataset.len()).filter(|i| i % 5 == 0).collect()
    } else {
        (0..dataset.len()).collect()
    };
    let train: Vec<usize> = if dataset.len() >= 5 {
        (0..dataset.len()).filter(|i| i % 5 != 0).collect()
    } else {
        (0..dataset.len()).collect()
    };

    let gram_targets = phi.gram_targets(y_d)?;
    let content_targets: Vec<Tensor> =
        dataset.iter().map(|x| phi.content_target(x)).collect::<Result<_>>()?;

    let mut net = TransformNet::build(seed);
    let sizes: Vec<usize> = net.params.iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(AdamConfig { lr: 2e-3, ..AdamConfig::default() }, &sizes)?;

    let mut order = train.clone();
    let mut steps_run = 0;
    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        let mut r = stream(seed, "transform-epoch", epoch as u64);
        order.shuffle(&mut r);
        for &i in &order {
            let targets =
                TransferTargets { content: content_targets[i].clone(), grams: gram_targets.clone() };
            let mut g = Graph::new();
            let vars = net.attach(&mut g);
            let x = g.constant(&dataset[i]);
            let y = net.forward_on(&mut g, &vars, x)?;
            let obj = transfer_objective_on(&mut g, phi, y, &targets, w)?;
            if !g.value(obj).item().is_finite() {
                return Err(Error::NonFinite { op: "train_transform_net", step: Some(steps_run) });
            }
            g.backward(obj)?;
            let grads: Vec<Option<Vec<f64>>> =
                vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();
            opt.step(&mut net.params, &grads)?;
            steps_run += 1;
        }
    }

    let mut heldout_objective = 0.0;
    let mut identity_objective = 0.0;
    for &i in &heldout {
        let targets =
            TransferTargets { content: content_targets[i].clone(), grams: gram_targets.clone() };
        let mapped = net.apply(&dataset[i])?;
        heldout_objective += objective_value(phi, &mapped, &targets, w)?;
        identity_objective += objective_value(phi, &dataset[i], &targets, w)?;
    }
    heldout_objective /= heldout.len() as f64;
    identity_objective /= heldout.len() as f64;

    Ok(TransformTraining { net, heldout_objective, identity_objective, steps_run })
}
