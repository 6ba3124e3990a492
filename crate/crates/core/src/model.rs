//! Two-branch multi-task network: shared conv blocks and shared FC trunk,
//! with one small head per task (liveness and identity).
//!
//! Both branches read the same parameter store. The liveness branch takes the
//! full image; the identity branch takes a center crop, zero-padded back to
//! the nominal input extent so every shared layer sees its declared shape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleProfile {
    /// Full-size topology: 5 blocks of 3 conv layers, 4096-wide FC trunk.
    Paper,
    /// CPU-sized topology with the same block/FC/head layout.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// (conv layers, output channels) per block; each block ends in a 2×2 pool.
    pub blocks: Vec<(usize, usize)>,
    /// Input extent as (channels, height, width).
    pub input: (usize, usize, usize),
    /// Widths of the three FC layers; the third is the head width and must
    /// equal `anti_out` (the identity head replaces it with `recg_out`).
    pub fc_dims: [usize; 3],
    pub anti_out: usize,
    pub recg_out: usize,
    pub scale_profile: ScaleProfile,
}

impl BackboneConfig {
    /// CPU-sized default: 2 blocks × 2 conv layers with channels (8, 16),
    /// 3×32×32 input, FC widths 64/32.
    pub fn desk(recg_out: usize) -> Self {
        BackboneConfig {
            blocks: vec![(2, 8), (2, 16)],
            input: (3, 32, 32),
            fc_dims: [64, 32, 2],
            anti_out: 2,
            recg_out,
            scale_profile: ScaleProfile::Desk,
        }
    }

    /// Full-size configuration; used for topology accounting, not CPU training.
    pub fn paper(recg_out: usize) -> Self {
        BackboneConfig {
            blocks: vec![(3, 64), (3, 128), (3, 256), (3, 512), (3, 512)],
            input: (3, 224, 224),
            fc_dims: [4096, 4096, 2],
            anti_out: 2,
            recg_out,
            scale_profile: ScaleProfile::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match self.scale_profile {
            ScaleProfile::Paper => {
                if self.blocks.len() != 5 || self.blocks.iter().any(|&(l, _)| l != 3) {
                    return fail(format!(
                        "paper profile requires 5 blocks of 3 conv layers, got {:?}",
                        self.blocks
                    ));
                }
            }
            ScaleProfile::Desk => {
                if self.blocks.len() < 2 {
                    return fail(format!("desk profile requires >= 2 blocks, got {}", self.blocks.len()));
                }
                if self.blocks.iter().any(|&(l, _)| l < 1) {
                    return fail("every block needs >= 1 conv layer".into());
                }
            }
        }
        if self.blocks.iter().any(|&(_, c)| c == 0) {
            return fail("block channel counts must be positive".into());
        }
        if self.anti_out != 2 {
            return fail(format!("liveness head must output 2 logits, got {}", self.anti_out));
        }
        if self.fc_dims[2] != self.anti_out {
            return fail(format!(
                "third FC width {} must equal the liveness head width {}",
                self.fc_dims[2], self.anti_out
            ));
        }
        if self.fc_dims[0] == 0 || self.fc_dims[1] == 0 {
            return fail("FC widths must be positive".into());
        }
        if self.recg_out < 2 {
            return fail(format!("identity head needs >= 2 classes, got {}", self.recg_out));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return fail(format!("degenerate input extent {:?}", self.input));
        }
        let div = 1usize << self.blocks.len();
        if h % div != 0 || w % div != 0 {
            return fail(format!(
                "input {h}×{w} must be divisible by 2^{} for the pooling pyramid",
                self.blocks.len()
            ));
        }
        Ok(())
    }

    pub fn conv_layer_count(&self) -> usize {
        self.blocks.iter().map(|&(l, _)| l).sum()
    }

    /// Flattened width after the last block's pool.
    pub fn flatten_dim(&self) -> usize {
        let (_, h, w) = self.input;
        let div = 1usize << self.blocks.len();
        let channels = self.blocks.last().map(|&(_, c)| c).unwrap_or(0);
        channels * (h / div) * (w / div)
    }

    /// Closed-form total parameter count (kernels + biases + FC trunk + heads).
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input.0;
        for &(layers, c_out) in &self.blocks {
            for _ in 0..layers {
                total += c_out * c_in * 9 + c_out;
                c_in = c_out;
            }
        }
        let [fc1, fc2, _] = self.fc_dims;
        total += self.flatten_dim() * fc1 + fc1;
        total += fc1 * fc2 + fc2;
        total += fc2 * self.anti_out + self.anti_out;
        total += fc2 * self.recg_out + self.recg_out;
        total
    }
}

// ── Model ───────────────────────────────────────────────────────────────

/// Parameters in declaration order plus the feature taps of the most recent
/// liveness forward pass.
#[derive(Debug)]
pub struct MultiTaskModel {
    cfg: BackboneConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    taps: BTreeMap<String, Tensor>,
}

/// Graph handles for the parameter store, in declaration order. Create one
/// per graph with [`MultiTaskModel::attach`]; both branch passes reuse it, so
/// each parameter enters the graph exactly once.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Liveness-branch outputs inside a graph.
pub struct AntiPass {
    /// Live-vs-attack logits, shape `[2]`; index 0 is live.
    pub logits: Var,
    /// Second FC activation, the confusion-loss feature.
    pub fc2: Var,
    /// Post-pool output of every conv block, in block order.
    pub block_outputs: Vec<Var>,
}

impl MultiTaskModel {
    /// Deterministic fan-in-scaled normal initialization; biases start at zero.
    pub fn build(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut c_in = cfg.input.0;
        for (b, &(layers, c_out)) in cfg.blocks.iter().enumerate() {
            for l in 0..layers {
                params.push(Tensor::zeros(vec![c_out, c_in, 3, 3]));
                names.push(format!("block{}.conv{}.weight", b + 1, l + 1));
                params.push(Tensor::zeros(vec![c_out]));
                names.push(format!("block{}.conv{}.bias", b + 1, l + 1));
                c_in = c_out;
            }
        }
        let [fc1, fc2, _] = cfg.fc_dims;
        let dims = [
            (cfg.flatten_dim(), fc1, "fc1"),
            (fc1, fc2, "fc2"),
            (fc2, cfg.anti_out, "anti"),
            (fc2, cfg.recg_out, "recg"),
        ];
        for (d_in, d_out, name) in dims {
            params.push(Tensor::zeros(vec![d_in, d_out]));
            names.push(format!("{name}.weight"));
            params.push(Tensor::zeros(vec![1, d_out]));
            names.push(format!("{name}.bias"));
        }

        for (i, p) in params.iter_mut().enumerate() {
            let is_bias = names[i].ends_with(".bias");
            if is_bias {
                *p = p.clone().requires_grad(true);
                continue;
            }
            let shape = p.shape().to_vec();
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[0],
                _ => unreachable!("weights are conv kernels or FC matrices"),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut r = stream(seed, "init", i as u64);
            let values: Vec<f64> =
                (0..p.len()).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
            *p = Tensor::new(shape, values)?.requires_grad(true);
        }
        Ok(MultiTaskModel { cfg, params, names, taps: BTreeMap::new() })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Weight matrix of the liveness head, shape `[fc2, 2]` with the live
    /// logit in column 0.
    pub fn anti_head_weight(&self) -> &Tensor {
        let i = self.names.iter().position(|n| n == "anti.weight").expect("head always present");
        &self.params[i]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Replaces the parameter store; shapes must match the declaration order.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract(
                "set_params",
                format!("expected {} tensors, got {}", self.params.len(), params.len()),
            ));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::contract(
                    "set_params",
                    format!("{}: shape {:?} vs {:?}", self.names[i], new.shape(), old.shape()),
                ));
            }
        }
        self.params = params.into_iter().map(|p| p.requires_grad(true)).collect();
        Ok(())
    }

    /// Taps recorded by the most recent [`forward_anti`](Self::forward_anti):
    /// `block1..blockN` (post-pool) and `fc2_anti`. Each call overwrites them
    /// with fresh copies.
    pub fn taps(&self) -> &BTreeMap<String, Tensor> {
        &self.taps
    }

    /// Inserts every parameter into `g` as a gradient-tracked leaf.
    pub fn attach(&self, g: &mut Graph) -> ModelVars {
        ModelVars { vars: self.params.iter().map(|p| g.leaf(p)).collect() }
    }

    fn check_image(&self, image: &Tensor, op: &'static str) -> Result<()> {
        let (c, h, w) = self.cfg.input;
        if image.shape() != [c, h, w] {
            return Err(Error::dimension(
                op,
                format!("expected [{c}, {h}, {w}], got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    fn trunk(&self, g: &mut Graph, vars: &ModelVars, image: Var) -> Result<(Var, Vec<Var>)> {
        let mut x = image;
        let mut idx = 0;
        let mut block_outputs = Vec::with_capacity(self.cfg.blocks.len());
        for &(layers, _) in &self.cfg.blocks {
            for _ in 0..layers {
                let conv = g.conv2d(x, vars.vars[idx], 1, 1)?;
                let biased = g.add_channel_bias(conv, vars.vars[idx + 1])?;
                x = g.relu(biased)?;
                idx += 2;
            }
            x = g.maxpool2d(x, 2, 2)?;
            block_outputs.push(x);
        }
        let flat = g.reshape(x, &[1, self.cfg.flatten_dim()])?;
        let mut h = flat;
        for fc in 0..2 {
            let lin = g.linear(h, vars.vars[idx + 2 * fc], vars.vars[idx + 2 * fc + 1])?;
            h = g.relu(lin)?;
        }
        Ok((h, block_outputs))
    }

    fn head(&self, g: &mut Graph, vars: &ModelVars, h: Var, which: usize, out: usize) -> Result<Var> {
        let base = vars.vars.len() - 4 + 2 * which;
        let logits = g.linear(h, vars.vars[base], vars.vars[base + 1])?;
        g.reshape(logits, &[out])
    }

    /// Liveness pass over a full image, recorded on `g`.
    pub fn anti_pass(&self, g: &mut Graph, vars: &ModelVars, image: &Tensor) -> Result<AntiPass> {
        self.check_image(image, "forward_anti")?;
        let x = g.constant(image);
        let (fc2, block_outputs) = self.trunk(g, vars, x)?;
        let logits = self.head(g, vars, fc2, 0, self.cfg.anti_out)?;
        let fc2 = g.reshape(fc2, &[self.cfg.fc_dims[1]])?;
        Ok(AntiPass { logits, fc2, block_outputs })
    }

    /// Identity pass over a cropped image, recorded on `g`. The crop is
    /// zero-padded centrally back to the nominal input extent so the shared
    /// trunk runs unchanged.
    pub fn recg_pass(&self, g: &mut Graph, vars: &ModelVars, cropped: &Tensor) -> Result<Var> {
        let padded = self.pad_to_input(cropped)?;
        let x = g.constant(&padded);
        let (fc2, _) = self.trunk(g, vars, x)?;
        self.head(g, vars, fc2, 1, self.cfg.recg_out)
    }

    fn pad_to_input(&self, cropped: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.cfg.input;
        let s = cropped.shape();
        if s.len() != 3 || s[0] != c || s[1] > h || s[2] > w || s[1] == 0 || s[2] == 0 {
            return Err(Error::dimension(
                "forward_recg",
                format!("crop {s:?} does not fit input [{c}, {h}, {w}]"),
            ));
        }
        if s[1] == h && s[2] == w {
            return Ok(cropped.clone());
        }
        let (ch, cw) = (s[1], s[2]);
        let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
        let mut out = vec![0.0; c * h * w];
        let vals = cropped.values();
        for chan in 0..c {
            for y in 0..ch {
                let src = (chan * ch + y) * cw;
                let dst = (chan * h + oy + y) * w + ox;
                out[dst..dst + cw].copy_from_slice(&vals[src..src + cw]);
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Convenience liveness inference: returns (logits, fc2 feature) and
    /// refreshes the feature taps.
    pub fn forward_anti(&mut self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g);
        let pass = self.anti_pass(&mut g, &vars, image)?;
        self.taps.clear();
        for (b, &v) in pass.block_outputs.iter().enumerate() {
            self.taps.insert(format!("block{}", b + 1), g.value(v).clone());
        }
        self.taps.insert("fc2_anti".into(), g.value(pass.fc2).clone());
        Ok((g.value(pass.logits).clone(), g.value(pass.fc2).clone()))
    }

    /// Convenience identity inference over a crop.
    pub fn forward_recg(&self, cropped: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g);
        let logits = self.recg_pass(&mut g, &vars, cropped)?;
        Ok(g.value(logits).clone())
    }

    /// Probability assigned to the live class by the liveness branch.
    pub fn liveness_score(&mut self, image: &Tensor) -> Result<f64> {
        let (logits, _) = self.forward_anti(image)?;
        Ok(crate::tensor::softmax(logits.values())[0])
    }
}
