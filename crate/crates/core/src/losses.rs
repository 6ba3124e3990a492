//! Training objectives: liveness and identity cross-entropies are provided
//! by the graph; this module adds the pairwise feature-confusion loss, the
//! pair sampler that feeds it, and the weighted total objective.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

// ── Weights ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Identity-loss weight.
    pub lambda1: f64,
    /// Confusion-loss weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 2.5e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite())
            || !(self.lambda2 >= 0.0 && self.lambda2.is_finite())
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

// ── Pair sampling ───────────────────────────────────────────────────────

/// Default pairs per step: half the batch, so the pairs partition it.
pub fn default_pair_count(batch: usize) -> usize {
    batch / 2
}

/// Draws `m` position pairs (i, j), i ≠ j, from `indices`, uniformly and
/// deterministically under `seed`. Pairs are taken from successive seeded
/// shuffles in disjoint chunks, so within one shuffle round no sample joins
/// two pairs.
pub fn pair_sampler(indices: &[usize], m: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if indices.len() < 2 {
        return Err(Error::contract(
            "pair_sampler",
            format!("need at least 2 samples, got {}", indices.len()),
        ));
    }
    if m == 0 {
        return Err(Error::contract("pair_sampler", "need at least 1 pair"));
    }
    let mut r = stream(seed, "pair-sampler", 0);
    let mut order: Vec<usize> = indices.to_vec();
    let mut pairs = Vec::with_capacity(m);
    while pairs.len() < m {
        order.shuffle(&mut r);
        for chunk in order.chunks_exact(2) {
            if pairs.len() == m {
                break;
            }
            pairs.push((chunk[0], chunk[1]));
        }
    }
    Ok(pairs)
}

// ── Confusion loss ──────────────────────────────────────────────────────

/// Feature pairs for the confusion loss; both members are second-FC
/// activations of the liveness branch.
pub struct PairBatch {
    pairs: Vec<(Tensor, Tensor)>,
}

impl PairBatch {
    pub fn new(pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("PairBatch", "need at least one pair"));
        }
        let d = pairs[0].0.len();
        for (a, b) in &pairs {
            if a.len() != d || b.len() != d {
                return Err(Error::dimension(
                    "PairBatch",
                    format!("feature extents differ: {} and {} vs {}", a.len(), b.len(), d),
                ));
            }
        }
        Ok(PairBatch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Sum over pairs of squared Euclidean feature distance, recorded on `g`.
/// With `mean_over_pairs` the sum is divided by the pair count.
pub fn tpc_loss_on(
    g: &mut Graph,
    features: &[Var],
    pairs: &[(usize, usize)],
    mean_over_pairs: bool,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("tpc_loss", "need at least one pair"));
    }
    let mut total: Option<Var> = None;
    for &(i, j) in pairs {
        let (fi, fj) = (
            *features.get(i).ok_or_else(|| Error::index("tpc_loss", format!("feature {i}")))?,
            *features.get(j).ok_or_else(|| Error::index("tpc_loss", format!("feature {j}")))?,
        );
        let d = g.sub(fi, fj)?;
        let sq = g.sum_squares(d)?;
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    let total = total.expect("pairs checked non-empty");
    if mean_over_pairs {
        g.scale(total, 1.0 / pairs.len() as f64)
    } else {
        Ok(total)
    }
}

/// Plain-sum confusion loss over concrete feature pairs, as a scalar tensor.
pub fn tpc_loss(batch: &PairBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut features = Vec::with_capacity(2 * batch.pairs.len());
    let mut pairs = Vec::with_capacity(batch.pairs.len());
    for (a, b) in &batch.pairs {
        features.push(g.constant(a));
        features.push(g.constant(b));
        pairs.push((features.len() - 2, features.len() - 1));
    }
    let loss = tpc_loss_on(&mut g, &features, &pairs, false)?;
    Ok(g.value(loss).clone())
}

// ── Total objective ─────────────────────────────────────────────────────

/// Weighted sum: liveness + lambda1·identity + lambda2·confusion.
pub fn total_loss(anti: f64, recg: f64, tpc: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if !(anti.is_finite() && recg.is_finite() && tpc.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss", step: None });
    }
    Ok(anti + w.lambda1 * recg + w.lambda2 * tpc)
}

/// Graph form of [`total_loss`] for end-to-end training.
pub fn total_loss_on(g: &mut Graph, anti: Var, recg: Var, tpc: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let r = g.scale(recg, w.lambda1)?;
    let t = g.scale(tpc, w.lambda2)?;
    let ar = g.add(anti, r)?;
    g.add(ar, t)
}

/// Mean of scalar nodes; used for batch-averaged cross-entropies.
pub fn mean_of_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::contract("mean_of_scalars", "need at least one term"));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f64)
}
