//! Biometric error rates over liveness scores, Gaussian feature-divergence
//! diagnostics, and the head-contribution balance profile.
//!
//! Score convention everywhere: a score is the softmax probability of the
//! live class, in `[0,1]`; a sample is accepted as live when `score >= t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Liveness;
use crate::error::{Error, Result};
use crate::fda::LossNetwork;
use crate::model::MultiTaskModel;
use crate::tensor::{Graph, Tensor};

// ── Score sets ──────────────────────────────────────────────────────────

/// Labelled liveness scores. Needs at least one record of each class for
/// any rate to be defined.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    records: Vec<(f64, Liveness)>,
}

impl ScoreSet {
    pub fn new(records: Vec<(f64, Liveness)>) -> Result<Self> {
        let lives = records.iter().filter(|(_, l)| *l == Liveness::Live).count();
        if lives == 0 || lives == records.len() {
            return Err(Error::contract(
                "ScoreSet",
                format!("need both classes, got {lives} live of {}", records.len()),
            ));
        }
        for &(s, _) in &records {
            if !(s.is_finite() && (0.0..=1.0).contains(&s)) {
                return Err(Error::contract("ScoreSet", format!("score {s} outside [0,1]")));
            }
        }
        Ok(ScoreSet { records })
    }

    pub fn records(&self) -> &[(f64, Liveness)] {
        &self.records
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    /// Fraction of attacks accepted as live (`score >= t`).
    pub far: f64,
    /// Fraction of lives rejected (`score < t`).
    pub frr: f64,
}

/// Error rates at one threshold.
fn rates_at(s: &ScoreSet, t: f64) -> (f64, f64) {
    let (mut fa, mut na, mut fr, mut nl) = (0usize, 0usize, 0usize, 0usize);
    for &(score, label) in &s.records {
        match label {
            Liveness::Attack => {
                na += 1;
                if score >= t {
                    fa += 1;
                }
            }
            Liveness::Live => {
                nl += 1;
                if score < t {
                    fr += 1;
                }
            }
        }
    }
    (fa as f64 / na as f64, fr as f64 / nl as f64)
}

/// Sweep over every distinct score plus a sentinel below and above all
/// scores, in ascending threshold order.
pub fn roc_points(s: &ScoreSet) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = s.records.iter().map(|&(score, _)| score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("scores validated finite"));
    thresholds.dedup();
    thresholds.insert(0, -1.0);
    thresholds.push(2.0);
    thresholds
        .into_iter()
        .map(|t| {
            let (far, frr) = rates_at(s, t);
            RocPoint { threshold: t, far, frr }
        })
        .collect()
}

/// Threshold minimizing `|FAR − FRR|` (smallest such threshold on ties) and
/// the rate `(FAR + FRR) / 2` there.
pub fn eer(s: &ScoreSet) -> (f64, f64) {
    let mut best: Option<RocPoint> = None;
    for p in roc_points(s) {
        let gap = (p.far - p.frr).abs();
        match &best {
            Some(b) if gap >= (b.far - b.frr).abs() => {}
            _ => best = Some(p),
        }
    }
    let b = best.expect("sweep always yields sentinels");
    ((b.far + b.frr) / 2.0, b.threshold)
}

/// Mean of attack-acceptance and bona-fide-rejection rates.
pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// (attack acceptance rate, bona-fide rejection rate, their mean) at `t`.
pub fn apcer_bpcer_acer(s: &ScoreSet, t: f64) -> (f64, f64, f64) {
    let (apcer, bpcer) = rates_at(s, t);
    (apcer, bpcer, acer(apcer, bpcer))
}

/// Half total error rate `(FAR(t) + FRR(t)) / 2` at a threshold fixed
/// elsewhere (convention: the source-domain EER threshold).
pub fn hter(s: &ScoreSet, t: f64) -> f64 {
    let (far, frr) = rates_at(s, t);
    (far + frr) / 2.0
}

// ── Score file I/O ──────────────────────────────────────────────────────

const SCORES_HEADER: &str = "score,label";

pub fn write_scores(path: &Path, s: &ScoreSet) -> Result<()> {
    let mut text = String::from(SCORES_HEADER);
    text.push('\n');
    for &(score, label) in &s.records {
        text.push_str(&format!("{score},{label}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCORES_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("bad header {h:?}"))),
        None => return Err(parse_err(1, "empty score file".into())),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (score, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err(lineno, "expected score,label".into()))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad score {score:?}")))?;
        let label = Liveness::parse(label.trim())
            .ok_or_else(|| parse_err(lineno, format!("bad label {label:?}")))?;
        records.push((score, label));
    }
    ScoreSet::new(records)
}

// ── Gaussian feature divergence ─────────────────────────────────────────

/// Mean and standard deviation of one channel's spatial-mean activation
/// over a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mu: f64,
    pub sigma: f64,
}

impl ChannelStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        ChannelStats { mu, sigma: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Gaussian KL with variance denominators, summed in both directions.
    Standard,
    /// The printed closed form: mean-squared denominator and inverted log
    /// ratio, summed in both directions. Kept for fidelity experiments;
    /// undefined at zero means.
    PaperLiteral,
}

/// Symmetric Gaussian divergence between two channel statistics.
pub fn symmetric_kl(a: ChannelStats, b: ChannelStats, mode: KlMode) -> Result<f64> {
    if !(a.sigma > 0.0 && b.sigma > 0.0 && a.sigma.is_finite() && b.sigma.is_finite()) {
        return Err(Error::contract(
            "symmetric_kl",
            format!("standard deviations must be positive, got {} and {}", a.sigma, b.sigma),
        ));
    }
    if !(a.mu.is_finite() && b.mu.is_finite()) {
        return Err(Error::contract("symmetric_kl", "means must be finite"));
    }
    match mode {
        KlMode::Standard => {
            let kl = |p: ChannelStats, q: ChannelStats| {
                (q.sigma / p.sigma).ln()
                    + (p.sigma * p.sigma + (p.mu - q.mu) * (p.mu - q.mu)) / (2.0 * q.sigma * q.sigma)
                    - 0.5
            };
            Ok(kl(a, b) + kl(b, a))
        }
        KlMode::PaperLiteral => {
            if a.mu == 0.0 || b.mu == 0.0 {
                return Err(Error::contract(
                    "symmetric_kl",
                    "literal mode divides by the squared means; zero mean is undefined",
                ));
            }
            let kl = |p: ChannelStats, q: ChannelStats| {
                (p.sigma / q.sigma).ln()
                    + (p.sigma * p.sigma + (p.mu - q.mu) * (p.mu - q.mu)) / (2.0 * q.mu * q.mu)
                    - 0.5
            };
            Ok(kl(a, b) + kl(b, a))
        }
    }
}

// ── Layer divergence over a feature extractor ───────────────────────────

/// Anything exposing named intermediate activations for probe images.
pub trait FeatureExtractor {
    fn feature_layers(&self) -> Vec<String>;
    fn features(&self, image: &Tensor) -> Result<BTreeMap<String, Tensor>>;
}

impl FeatureExtractor for LossNetwork {
    fn feature_layers(&self) -> Vec<String> {
        self.layer_names()
    }

    fn features(&self, image: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        LossNetwork::features(self, image)
    }
}

impl FeatureExtractor for MultiTaskModel {
    fn feature_layers(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (1..=self.cfg().blocks.len()).map(|b| format!("block{b}")).collect();
        names.push("fc2_anti".into());
        names
    }

    fn features(&self, image: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g);
        let pass = self.anti_pass(&mut g, &vars, image)?;
        let mut out = BTreeMap::new();
        for (b, &v) in pass.block_outputs.iter().enumerate() {
            out.insert(format!("block{}", b + 1), g.value(v).clone());
        }
        out.insert("fc2_anti".into(), g.value(pass.fc2).clone());
        Ok(out)
    }
}

/// Per-channel spatial means for one layer activation; a rank-1 activation
/// treats each element as its own channel.
fn channel_means(activation: &Tensor) -> Result<Vec<f64>> {
    let s = activation.shape();
    match s.len() {
        1 => Ok(activation.values().to_vec()),
        3 => {
            let (c, plane) = (s[0], s[1] * s[2]);
            Ok((0..c)
                .map(|ch| {
                    activation.values()[ch * plane..(ch + 1) * plane].iter().sum::<f64>()
                        / plane as f64
                })
                .collect())
        }
        _ => Err(Error::dimension(
            "layer_divergence",
            format!("expected rank-1 or rank-3 activation, got {s:?}"),
        )),
    }
}

fn stats_per_channel(
    extractor: &dyn FeatureExtractor,
    samples: &[Tensor],
    layer: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut per_channel: Vec<Vec<f64>> = Vec::new();
    for img in samples {
        let feats = extractor.features(img)?;
        let act = feats
            .get(layer)
            .ok_or_else(|| Error::index("layer_divergence", format!("unknown layer {layer:?}")))?;
        let means = channel_means(act)?;
        if per_channel.is_empty() {
            per_channel = vec![Vec::with_capacity(samples.len()); means.len()];
        }
        for (c, m) in means.into_iter().enumerate() {
            per_channel[c].push(m);
        }
    }
    Ok(per_channel)
}

/// One layer's divergence: per channel, the standard symmetric KL between
/// the two sample sets' spatial-mean statistics, averaged over channels.
/// Channels whose deviation vanishes in either set are skipped and counted;
/// if every channel is skipped the divergence reports 0.
pub fn layer_divergence(
    extractor: &dyn FeatureExtractor,
    samples_a: &[Tensor],
    samples_b: &[Tensor],
    layer: &str,
) -> Result<(f64, usize)> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::contract("layer_divergence", "both sample sets must be non-empty"));
    }
    let (rows, skipped) = channel_divergences(extractor, samples_a, samples_b, layer)?;
    let used: Vec<f64> = rows.iter().filter_map(|r| r.d).collect();
    let value = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
    Ok((value, skipped))
}

#[derive(Debug, Clone)]
pub struct ChannelDivergence {
    pub layer: String,
    pub channel: usize,
    pub a: ChannelStats,
    pub b: ChannelStats,
    /// `None` when the channel was skipped for zero deviation.
    pub d: Option<f64>,
}

fn channel_divergences(
    extractor: &dyn FeatureExtractor,
    samples_a: &[Tensor],
    samples_b: &[Tensor],
    layer: &str,
) -> Result<(Vec<ChannelDivergence>, usize)> {
    let stats_a = stats_per_channel(extractor, samples_a, layer)?;
    let stats_b = stats_per_channel(extractor, samples_b, layer)?;
    if stats_a.len() != stats_b.len() {
        return Err(Error::dimension(
            "layer_divergence",
            format!("channel counts differ: {} vs {}", stats_a.len(), stats_b.len()),
        ));
    }
    let mut rows = Vec::with_capacity(stats_a.len());
    let mut skipped = 0;
    for (c, (va, vb)) in stats_a.iter().zip(&stats_b).enumerate() {
        let a = ChannelStats::from_values(va);
        let b = ChannelStats::from_values(vb);
        let d = if a.sigma > 0.0 && b.sigma > 0.0 {
            Some(symmetric_kl(a, b, KlMode::Standard)?)
        } else {
            skipped += 1;
            None
        };
        rows.push(ChannelDivergence { layer: layer.to_string(), channel: c, a, b, d });
    }
    Ok((rows, skipped))
}

/// Divergence of every probed layer plus per-channel detail.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    /// (layer, mean divergence over usable channels, skipped channel count).
    pub per_layer: Vec<(String, f64, usize)>,
    pub channels: Vec<ChannelDivergence>,
}

pub fn divergence_report(
    extractor: &dyn FeatureExtractor,
    samples_a: &[Tensor],
    samples_b: &[Tensor],
) -> Result<DivergenceReport> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::contract("divergence_report", "both sample sets must be non-empty"));
    }
    let mut per_layer = Vec::new();
    let mut channels = Vec::new();
    for layer in extractor.feature_layers() {
        let (rows, skipped) = channel_divergences(extractor, samples_a, samples_b, &layer)?;
        let used: Vec<f64> = rows.iter().filter_map(|r| r.d).collect();
        let value =
            if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        per_layer.push((layer, value, skipped));
        channels.extend(rows);
    }
    Ok(DivergenceReport { per_layer, channels })
}

impl DivergenceReport {
    /// `layer,channel,mu_a,sigma_a,mu_b,sigma_b,d` rows; one `mean` summary
    /// row per layer; skipped channels leave `d` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,channel,mu_a,sigma_a,mu_b,sigma_b,d\n");
        for r in &self.channels {
            let d = r.d.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{d}\n",
                r.layer, r.channel, r.a.mu, r.a.sigma, r.b.mu, r.b.sigma
            ));
        }
        for (layer, value, skipped) in &self.per_layer {
            out.push_str(&format!("{layer},mean,,,,,{value}\n"));
            if *skipped > 0 {
                out.push_str(&format!("{layer},skipped,,,,,{skipped}\n"));
            }
        }
        out
    }
}

// ── Contribution balance ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ContributionProfile {
    /// Per-feature contribution, normalized to sum 1.
    pub contributions: Vec<f64>,
    /// Shannon entropy of the contributions divided by `ln(dims)`.
    pub normalized_entropy: f64,
}

/// Profile from raw ingredients: per-dimension decision weight magnitudes
/// and activation deviations.
pub fn profile_from(weight_spans: &[f64], stds: &[f64]) -> Result<ContributionProfile> {
    if weight_spans.len() != stds.len() || weight_spans.is_empty() {
        return Err(Error::contract(
            "contribution_profile",
            format!("need matching non-empty inputs, got {} and {}", weight_spans.len(), stds.len()),
        ));
    }
    let raw: Vec<f64> = weight_spans.iter().zip(stds).map(|(w, s)| w.abs() * s).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::contract("contribution_profile", "all contributions vanish"));
    }
    let contributions: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let entropy: f64 =
        contributions.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let normalized_entropy =
        if contributions.len() > 1 { entropy / (contributions.len() as f64).ln() } else { 1.0 };
    Ok(ContributionProfile { contributions, normalized_entropy })
}

/// How much each second-FC feature sways the live-vs-attack decision:
/// `|w_live − w_attack|` of the head column difference, times the feature's
/// activation deviation over `eval_set`, normalized to sum 1.
pub fn contribution_profile(
    model: &MultiTaskModel,
    eval_set: &[Tensor],
) -> Result<ContributionProfile> {
    if eval_set.is_empty() {
        return Err(Error::contract("contribution_profile", "evaluation set is empty"));
    }
    let fc2_dim = model.cfg().fc_dims[1];
    let mut activations: Vec<Vec<f64>> = vec![Vec::with_capacity(eval_set.len()); fc2_dim];
    for img in eval_set {
        let feats = FeatureExtractor::features(model, img)?;
        for (d, &v) in feats["fc2_anti"].values().iter().enumerate() {
            activations[d].push(v);
        }
    }
    let stds: Vec<f64> =
        activations.iter().map(|vals| ChannelStats::from_values(vals).sigma).collect();
    let w = model.anti_head_weight();
    let spans: Vec<f64> =
        (0..fc2_dim).map(|d| w.values()[d * 2] - w.values()[d * 2 + 1]).collect();
    profile_from(&spans, &stds)
}
