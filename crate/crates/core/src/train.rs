//! Seeded end-to-end training: joint two-task stepping with Adam and a
//! halving learning-rate schedule, optional pairwise-confusion and
//! domain-transfer preprocessing, evaluation, and the 2×2 ablation driver.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::checkpoint;
use crate::data::{center_crop, read_ppm, FaceSample, Liveness};
use crate::error::{Error, Result};
use crate::fda::{train_transform_net, LossNetwork, TransferWeights, TransformNet};
use crate::losses::{
    default_pair_count, mean_of_scalars, pair_sampler, total_loss_on, tpc_loss_on, LossWeights,
};
use crate::metrics::{apcer_bpcer_acer, eer, hter, ScoreSet};
use crate::model::MultiTaskModel;
use crate::opt::{Adam, AdamConfig};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    /// The learning rate halves after every this many steps.
    pub decay_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub use_tpc: bool,
    pub use_fda: bool,
    /// Exemplar of the appearance domain the transform network maps into;
    /// required exactly when `use_fda` is set.
    pub target_domain_image: Option<PathBuf>,
    /// Center-crop fraction feeding the identity branch.
    pub crop_fraction: f64,
    /// Passes over the training images when pretraining the transform net.
    pub fda_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            decay_steps: 2000,
            batch_size: 32,
            steps: 0,
            weights: LossWeights::default(),
            use_tpc: false,
            use_fda: false,
            target_domain_image: None,
            crop_fraction: 0.6,
            fda_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.use_tpc && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "pairwise confusion needs batch_size >= 2, got {}",
                self.batch_size
            )));
        }
        if self.use_fda && self.fda_epochs == 0 {
            return Err(Error::Config("fda_epochs must be positive".into()));
        }
        self.weights.validate()
    }

    /// `key=value` lines; rerunning from this echo reproduces the run.
    pub fn echo(&self) -> String {
        let target = self
            .target_domain_image
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        format!(
            "lr0={}\ndecay_steps={}\nbatch_size={}\nsteps={}\nlambda1={}\nlambda2={}\n\
             use_tpc={}\nuse_fda={}\ntarget_domain_image={}\ncrop_fraction={}\nfda_epochs={}\nseed={}\n",
            self.lr0,
            self.decay_steps,
            self.batch_size,
            self.steps,
            self.weights.lambda1,
            self.weights.lambda2,
            self.use_tpc,
            self.use_fda,
            target,
            self.crop_fraction,
            self.fda_epochs,
            self.seed
        )
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub anti: f64,
    pub recg: f64,
    pub tpc: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: MultiTaskModel,
    /// Present when the run used domain-transfer preprocessing; evaluation
    /// must route liveness inputs through it.
    pub transform: Option<TransformNet>,
    pub log: Vec<LossRow>,
}

pub fn loss_csv(log: &[LossRow]) -> String {
    let mut out = String::from("step,anti,recg,tpc,total,lr\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.anti, r.recg, r.tpc, r.total, r.lr));
    }
    out
}

fn check_dataset(model: &MultiTaskModel, dataset: &[FaceSample]) -> Result<()> {
    let identities: BTreeSet<usize> = dataset.iter().map(|s| s.identity).collect();
    if identities.len() < 2 {
        return Err(Error::contract(
            "train",
            format!("need >= 2 identities, got {}", identities.len()),
        ));
    }
    let lives = dataset.iter().filter(|s| s.liveness == Liveness::Live).count();
    if lives == 0 || lives == dataset.len() {
        return Err(Error::contract("train", "need both liveness classes"));
    }
    let recg_out = model.cfg().recg_out;
    if let Some(&worst) = identities.iter().max() {
        if worst >= recg_out {
            return Err(Error::contract(
                "train",
                format!("identity {worst} outside the {recg_out}-way identity head"),
            ));
        }
    }
    Ok(())
}

/// Loads the target-domain exemplar named in `cfg` (when needed) and runs
/// [`train_with_target`].
pub fn train(
    model: MultiTaskModel,
    dataset: &[FaceSample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let target = if cfg.use_fda {
        let path = cfg.target_domain_image.as_ref().ok_or_else(|| {
            Error::Config("use_fda requires target_domain_image".into())
        })?;
        Some(read_ppm(path)?)
    } else {
        None
    };
    train_with_target(model, dataset, cfg, target.as_ref(), run_dir)
}

/// The training loop proper, with the target-domain exemplar already in
/// memory. Per step: sample a batch; liveness cross-entropy on (optionally
/// transformed) full images; identity cross-entropy on center crops;
/// optional pairwise-confusion term on the second-FC features; one Adam
/// update of the shared parameter store. Deterministic under `cfg.seed`.
///
/// A non-finite loss aborts with the step index; when `run_dir` is given
/// the pre-step parameters are saved there as `last_good.ckpt` first.
pub fn train_with_target(
    mut model: MultiTaskModel,
    dataset: &[FaceSample],
    cfg: &TrainConfig,
    target: Option<&Tensor>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("train", "dataset is empty"));
    }
    check_dataset(&model, dataset)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let transform = if cfg.use_fda {
        let y_d = target
            .ok_or_else(|| Error::Config("use_fda requires a target-domain image".into()))?;
        let phi = LossNetwork::seeded(cfg.seed);
        let images: Vec<Tensor> = dataset.iter().map(|s| s.image.clone()).collect();
        let trained = train_transform_net(
            &images,
            y_d,
            &phi,
            &TransferWeights::default(),
            cfg.fda_epochs,
            cfg.seed,
        )?;
        Some(trained.net)
    } else {
        None
    };

    // the transform net is frozen after pretraining, so each image's
    // transferred version and identity crop are fixed for the whole run
    let anti_inputs: Vec<Tensor> = match &transform {
        Some(net) => dataset.iter().map(|s| net.apply(&s.image)).collect::<Result<_>>()?,
        None => dataset.iter().map(|s| s.image.clone()).collect(),
    };
    let crops: Vec<Tensor> = dataset
        .iter()
        .map(|s| center_crop(&s.image, cfg.crop_fraction))
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr0, decay_steps: Some(cfg.decay_steps), ..AdamConfig::default() },
        &sizes,
    )?;
    let zero = Tensor::scalar(0.0);

    let mut log: Vec<LossRow> = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = stream(cfg.seed, "batch", step as u64);
        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| r.gen_range(0..dataset.len())).collect();

        let outcome = (|| -> Result<LossRow> {
            let mut g = Graph::new();
            let vars = model.attach(&mut g);
            let mut anti_terms = Vec::with_capacity(batch.len());
            let mut recg_terms = Vec::with_capacity(batch.len());
            let mut fc2_features = Vec::with_capacity(batch.len());
            for &i in &batch {
                let pass = model.anti_pass(&mut g, &vars, &anti_inputs[i])?;
                anti_terms
                    .push(g.softmax_cross_entropy(pass.logits, dataset[i].liveness.class_index())?);
                fc2_features.push(pass.fc2);
                let logits = model.recg_pass(&mut g, &vars, &crops[i])?;
                recg_terms.push(g.softmax_cross_entropy(logits, dataset[i].identity)?);
            }
            let anti = mean_of_scalars(&mut g, &anti_terms)?;
            let recg = mean_of_scalars(&mut g, &recg_terms)?;
            let tpc = if cfg.use_tpc {
                let pair_seed = stream(cfg.seed, "pairs", step as u64).gen::<u64>();
                let indices: Vec<usize> = (0..batch.len()).collect();
                let pairs =
                    pair_sampler(&indices, default_pair_count(batch.len()), pair_seed)?;
                tpc_loss_on(&mut g, &fc2_features, &pairs, true)?
            } else {
                g.constant(&zero)
            };
            let total = total_loss_on(&mut g, anti, recg, tpc, &cfg.weights)?;
            g.backward(total)?;
            let grads: Vec<Option<Vec<f64>>> =
                vars.all().iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
            let row = LossRow {
                step,
                anti: g.value(anti).item(),
                recg: g.value(recg).item(),
                tpc: g.value(tpc).item(),
                total: g.value(total).item(),
                lr: adam.current_lr(),
            };
            adam.step(model.params_mut(), &grads)?;
            Ok(row)
        })();

        match outcome {
            Ok(row) => log.push(row),
            Err(e) => {
                let e = match e {
                    Error::NonFinite { op, .. } => Error::NonFinite { op, step: Some(step) },
                    other => other,
                };
                if let (Some(dir), Error::NonFinite { .. }) = (run_dir, &e) {
                    // parameters predate the failed update, so they are the
                    // last good state
                    checkpoint::save_model(&dir.join("last_good.ckpt"), &model)?;
                    fs::write(dir.join("loss.csv"), loss_csv(&log))
                        .map_err(|io| Error::io(dir, io))?;
                }
                return Err(e);
            }
        }
    }

    if let Some(dir) = run_dir {
        fs::write(dir.join("loss.csv"), loss_csv(&log)).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_model(&dir.join("model.ckpt"), &model)?;
        if let Some(net) = &transform {
            checkpoint::save_transform(&dir.join("transform.ckpt"), net)?;
        }
    }
    Ok(TrainOutcome { model, transform, log })
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Operate at this set's own equal-error threshold.
    OwnEer,
    /// Operate at a threshold fixed elsewhere (cross-domain convention:
    /// the source set's equal-error threshold).
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scores: ScoreSet,
    pub eer: f64,
    pub eer_threshold: f64,
    /// Threshold the point metrics below are computed at.
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    /// Accuracy of liveness argmax (score against 0.5).
    pub anti_accuracy: f64,
    /// Top-1 identity accuracy over samples whose identity the head knows.
    pub recognition_accuracy: f64,
    /// Samples excluded from recognition accuracy for unknown identity.
    pub recognition_excluded: usize,
}

pub fn evaluate(
    model: &mut MultiTaskModel,
    transform: Option<&TransformNet>,
    dataset: &[FaceSample],
    policy: ThresholdPolicy,
    crop_fraction: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluate", "dataset is empty"));
    }
    let recg_out = model.cfg().recg_out;
    let mut records = Vec::with_capacity(dataset.len());
    let mut anti_correct = 0usize;
    let mut known = 0usize;
    let mut recg_correct = 0usize;
    let mut excluded = 0usize;
    for s in dataset {
        let image = match transform {
            Some(net) => net.apply(&s.image)?,
            None => s.image.clone(),
        };
        let score = model.liveness_score(&image)?;
        if (score >= 0.5) == (s.liveness == Liveness::Live) {
            anti_correct += 1;
        }
        records.push((score, s.liveness));

        if s.identity >= recg_out {
            excluded += 1;
            continue;
        }
        known += 1;
        let logits = model.forward_recg(&center_crop(&s.image, crop_fraction)?)?;
        let top1 = logits
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("logits finite"))
            .map(|(i, _)| i)
            .expect("head is non-empty");
        if top1 == s.identity {
            recg_correct += 1;
        }
    }
    if known == 0 {
        return Err(Error::contract("evaluate", "no sample has a known identity"));
    }
    let scores = ScoreSet::new(records)?;
    let (eer_rate, eer_threshold) = eer(&scores);
    let threshold = match policy {
        ThresholdPolicy::OwnEer => eer_threshold,
        ThresholdPolicy::Fixed(t) => t,
    };
    let (apcer, bpcer, acer) = apcer_bpcer_acer(&scores, threshold);
    let hter = hter(&scores, threshold);
    Ok(EvalReport {
        scores,
        eer: eer_rate,
        eer_threshold,
        threshold,
        apcer,
        bpcer,
        acer,
        hter,
        anti_accuracy: anti_correct as f64 / dataset.len() as f64,
        recognition_accuracy: recg_correct as f64 / known as f64,
        recognition_excluded: excluded,
    })
}

/// Metric lines for the run directory, full precision.
pub fn metrics_csv(report: &EvalReport) -> String {
    format!(
        "metric,value\neer,{}\neer_threshold,{}\nthreshold,{}\napcer,{}\nbpcer,{}\nacer,{}\n\
         hter,{}\nanti_accuracy,{}\nrecognition_accuracy,{}\nrecognition_excluded,{}\n",
        report.eer,
        report.eer_threshold,
        report.threshold,
        report.apcer,
        report.bpcer,
        report.acer,
        report.hter,
        report.anti_accuracy,
        report.recognition_accuracy,
        report.recognition_excluded
    )
}

// ── Ablation driver ─────────────────────────────────────────────────────

/// Split used by the ablation grid: train and held-out sets from the source
/// domain, a cross set from the other domain, and the exemplar the transfer
/// cells map images toward.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train: Vec<FaceSample>,
    pub intra: Vec<FaceSample>,
    pub cross: Vec<FaceSample>,
    pub target_image: Tensor,
}

impl AblationData {
    /// Strided split: within each liveness class of the source domain,
    /// every `heldout_every`-th sample is held out (so both classes appear
    /// on both sides); all other-domain samples form the cross set. The
    /// target exemplar is the first live training image.
    pub fn from_two_domain(
        samples: &[FaceSample],
        source_domain: &str,
        heldout_every: usize,
    ) -> Result<Self> {
        if heldout_every < 2 {
            return Err(Error::contract("ablation_data", "heldout_every must be >= 2"));
        }
        let mut train = Vec::new();
        let mut intra = Vec::new();
        let mut cross = Vec::new();
        let mut seen = [0usize; 2];
        for s in samples {
            if s.domain == source_domain {
                let class = &mut seen[s.liveness.class_index()];
                if *class % heldout_every == heldout_every - 1 {
                    intra.push(s.clone());
                } else {
                    train.push(s.clone());
                }
                *class += 1;
            } else {
                cross.push(s.clone());
            }
        }
        if train.is_empty() || intra.is_empty() || cross.is_empty() {
            return Err(Error::contract(
                "ablation_data",
                format!(
                    "split needs all three parts, got {}/{}/{} for source {source_domain:?}",
                    train.len(),
                    intra.len(),
                    cross.len()
                ),
            ));
        }
        let target_image = train
            .iter()
            .find(|s| s.liveness == Liveness::Live)
            .map(|s| s.image.clone())
            .ok_or_else(|| Error::contract("ablation_data", "no live training sample"))?;
        Ok(AblationData { train, intra, cross, target_image })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AblationCell {
    pub use_tpc: bool,
    pub use_fda: bool,
    pub seed: u64,
    pub intra_eer: f64,
    pub intra_hter: f64,
    pub cross_hter: f64,
    /// Source-set equal-error threshold the cross rate is measured at.
    pub threshold: f64,
    pub train_anti_accuracy: f64,
    pub train_recg_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
}

pub const ABLATION_GRID: [(bool, bool); 4] =
    [(false, false), (true, false), (false, true), (true, true)];

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "use_tpc,use_fda,seed,intra_eer,intra_hter,cross_hter,threshold,\
             train_anti_accuracy,train_recg_accuracy\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.use_tpc,
                c.use_fda,
                c.seed,
                c.intra_eer,
                c.intra_hter,
                c.cross_hter,
                c.threshold,
                c.train_anti_accuracy,
                c.train_recg_accuracy
            ));
        }
        out
    }

    /// Mean cross-domain half-total-error of one grid cell across seeds.
    pub fn mean_cross_hter(&self, use_tpc: bool, use_fda: bool) -> f64 {
        let picked: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.use_tpc == use_tpc && c.use_fda == use_fda)
            .map(|c| c.cross_hter)
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

/// Builds a fresh model per (cell, seed), trains it on the source split,
/// and measures held-out source error plus cross-domain error at the source
/// equal-error threshold.
pub fn run_ablation(
    base: &TrainConfig,
    data: &AblationData,
    seeds: &[u64],
    model_for: impl Fn(u64) -> Result<MultiTaskModel>,
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::contract("run_ablation", "need at least one seed"));
    }
    let mut cells = Vec::with_capacity(4 * seeds.len());
    for &seed in seeds {
        for (use_tpc, use_fda) in ABLATION_GRID {
            let mut cfg = base.clone();
            cfg.use_tpc = use_tpc;
            cfg.use_fda = use_fda;
            cfg.seed = seed;
            let model = model_for(seed)?;
            let target = use_fda.then_some(&data.target_image);
            let out = train_with_target(model, &data.train, &cfg, target, None)?;
            let mut model = out.model;
            let transform = out.transform.as_ref();
            let train_eval = evaluate(
                &mut model,
                transform,
                &data.train,
                ThresholdPolicy::Fixed(0.5),
                cfg.crop_fraction,
            )?;
            let intra =
                evaluate(&mut model, transform, &data.intra, ThresholdPolicy::OwnEer, cfg.crop_fraction)?;
            let cross = evaluate(
                &mut model,
                transform,
                &data.cross,
                ThresholdPolicy::Fixed(intra.eer_threshold),
                cfg.crop_fraction,
            )?;
            cells.push(AblationCell {
                use_tpc,
                use_fda,
                seed,
                intra_eer: intra.eer,
                intra_hter: intra.hter,
                cross_hter: cross.hter,
                threshold: intra.eer_threshold,
                train_anti_accuracy: train_eval.anti_accuracy,
                train_recg_accuracy: train_eval.recognition_accuracy,
            });
        }
    }
    Ok(AblationResult { cells })
}
