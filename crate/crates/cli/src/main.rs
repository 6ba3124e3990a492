//! Command-line surface for the face-authentication trainer.
//!
//! Every command writes its artifacts plus a `config.txt` echo into an
//! output directory (`--out`, else `$FACEAUTH_OUT/<command>`, else
//! `./<command>`); re-running with `--config <echo>` reproduces the run.
//! Exit codes: 1 usage, 2 I/O or malformed files, 3 numeric divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use faceauth_core::data::{generate, load_manifest, read_ppm, save_dataset, write_ppm, SyntheticConfig};
use faceauth_core::fda::{transfer_image, LossNetwork, TransferWeights};
use faceauth_core::losses::LossWeights;
use faceauth_core::metrics::{
    apcer_bpcer_acer, divergence_report, eer, hter, read_scores, FeatureExtractor,
};
use faceauth_core::model::{BackboneConfig, MultiTaskModel};
use faceauth_core::train::{
    evaluate, metrics_csv, run_ablation, train, AblationData, ThresholdPolicy, TrainConfig,
};
use faceauth_core::{checkpoint, Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "faceauth",
    about = "Desk-scale face-authentication training and analysis toolkit",
    version
)]
struct Cli {
    /// Key=value file of defaults; explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded two-domain synthetic dataset (PPM tree + manifest).
    GenData(GenDataArgs),
    /// Train the two-branch model on a dataset manifest.
    Train(TrainArgs),
    /// Score a dataset with a trained model and report error rates.
    Evaluate(EvaluateArgs),
    /// Re-render one image toward a target-domain exemplar.
    Transfer(TransferArgs),
    /// Per-layer feature divergence between two datasets.
    Divergence(DivergenceArgs),
    /// Train and evaluate the 2×2 grid over pairwise confusion and transfer.
    Ablation(AblationArgs),
    /// Error rates from a standalone score file.
    Metrics(MetricsArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    identities: usize,
    /// Samples per identity per domain (half live, half attack).
    #[arg(long, default_value_t = 8)]
    samples_per_id: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
#[command(args_override_self = true)]
struct TrainKnobs {
    #[arg(long, default_value_t = 3e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 2000)]
    decay_steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = LossWeights::default().lambda1)]
    lambda1: f64,
    #[arg(long, default_value_t = LossWeights::default().lambda2)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.6)]
    crop_fraction: f64,
    #[arg(long, default_value_t = 1)]
    fda_epochs: usize,
}

impl TrainKnobs {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            decay_steps: self.decay_steps,
            batch_size: self.batch_size,
            steps: self.steps,
            weights: LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 },
            crop_fraction: self.crop_fraction,
            fda_epochs: self.fda_epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    fn echo(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("decay-steps", self.decay_steps.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("crop-fraction", self.crop_fraction.to_string()),
            ("fda-epochs", self.fda_epochs.to_string()),
        ]
    }
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Dataset manifest (`path,identity,liveness,domain`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Add the pairwise-confusion term.
    #[arg(long)]
    tpc: bool,
    /// Pretrain a transform net and route liveness inputs through it.
    #[arg(long)]
    fda: bool,
    /// Target-domain exemplar PPM; required with --fda.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter-init seed; defaults to --seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Transform-net checkpoint to apply to liveness inputs.
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Operating threshold; defaults to this set's equal-error threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.6)]
    crop_fraction: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TransferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = TransferWeights::default().lambda_c)]
    lambda_c: f64,
    #[arg(long, default_value_t = TransferWeights::default().lambda_s)]
    lambda_s: f64,
    /// Seed of the fixed random probe network.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct DivergenceArgs {
    #[arg(long)]
    data_a: PathBuf,
    #[arg(long)]
    data_b: PathBuf,
    /// Probe a trained model checkpoint instead of the random probe net.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "studio")]
    source_domain: String,
    /// Every n-th source sample is held out for the intra test.
    #[arg(long, default_value_t = 5)]
    heldout_every: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[command(flatten)]
    knobs: TrainKnobs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct MetricsArgs {
    /// Score file (`score,label`).
    #[arg(long)]
    scores: PathBuf,
    /// Operating threshold; defaults to the equal-error threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── Shared plumbing ─────────────────────────────────────────────────────

fn out_dir(flag: Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| {
        let root = std::env::var_os("FACEAUTH_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        root.join(default_name)
    });
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// `config.txt` echo. The output directory itself is deliberately not
/// echoed, so identical runs produce identical trees; pass `--out` again
/// when replaying.
fn write_echo(dir: &Path, command: &str, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = dir.join("config.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splices `key=value` lines from a `--config` file in as flags right after
/// the subcommand, so explicit flags (later in argv) win.
fn expand_config(args: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut file: Option<PathBuf> = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            file = args.get(i + 1).map(PathBuf::from);
            i += 2;
        } else if let Some(v) = args[i].strip_prefix("--config=") {
            file = Some(PathBuf::from(v));
            i += 1;
        } else {
            i += 1;
        }
    }
    let Some(file) = file else { return Ok(args) };
    let text = fs::read_to_string(&file)
        .map_err(|e| format!("cannot read --config {}: {e}", file.display()))?;

    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", file.display(), lineno + 1))?;
        if key == "command" {
            continue;
        }
        match value {
            "true" => tokens.push(format!("--{key}")),
            "false" | "" => {}
            v => {
                tokens.push(format!("--{key}"));
                tokens.push(v.to_string());
            }
        }
    }

    // the subcommand is the first bare token after the program name that is
    // not the --config value
    let mut config_value_at = None;
    for (idx, a) in args.iter().enumerate().skip(1) {
        if a == "--config" {
            config_value_at = Some(idx + 1);
            break;
        }
    }
    let sub = args
        .iter()
        .enumerate()
        .skip(1)
        .find(|(idx, a)| !a.starts_with('-') && Some(*idx) != config_value_at)
        .map(|(idx, _)| idx);
    let Some(at) = sub else { return Ok(args) };
    let mut out = args;
    out.splice(at + 1..at + 1, tokens);
    Ok(out)
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::Decode { .. } => 2,
        _ => 1,
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let raw: Vec<String> = std::env::args().collect();
    let expanded = match expand_config(raw) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            code_for(&e)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => do_train(a),
        Command::Evaluate(a) => do_evaluate(a),
        Command::Transfer(a) => do_transfer(a),
        Command::Divergence(a) => do_divergence(a),
        Command::Ablation(a) => do_ablation(a),
        Command::Metrics(a) => do_metrics(a),
    }
}

// ── Command handlers ────────────────────────────────────────────────────

fn gen_data(a: GenDataArgs) -> Result<()> {
    let dir = out_dir(a.out, "dataset")?;
    let cfg = SyntheticConfig::two_domain(a.identities, a.samples_per_id, a.image_size, a.seed);
    let samples = generate(&cfg)?;
    let manifest = save_dataset(&samples, &dir)?;
    write_echo(
        &dir,
        "gen-data",
        &[
            ("identities", a.identities.to_string()),
            ("samples-per-id", a.samples_per_id.to_string()),
            ("image-size", a.image_size.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    println!("samples={}", samples.len());
    println!("manifest={}", manifest.display());
    Ok(())
}

/// Identity-head width implied by a dataset's labels.
fn head_width(samples: &[faceauth_core::data::FaceSample]) -> Result<usize> {
    let max = samples
        .iter()
        .map(|s| s.identity)
        .max()
        .ok_or_else(|| Error::contract("train", "dataset is empty"))?;
    Ok((max + 1).max(2))
}

fn desk_model(samples: &[faceauth_core::data::FaceSample], seed: u64) -> Result<MultiTaskModel> {
    let shape = samples[0].image.shape();
    let cfg = BackboneConfig {
        input: (shape[0], shape[1], shape[2]),
        ..BackboneConfig::desk(head_width(samples)?)
    };
    MultiTaskModel::build(cfg, seed)
}

fn do_train(a: TrainArgs) -> Result<()> {
    let dir = out_dir(a.out, "run")?;
    let samples = load_manifest(&a.data)?;
    let model_seed = a.model_seed.unwrap_or(a.seed);
    let model = desk_model(&samples, model_seed)?;
    let mut cfg = a.knobs.to_config(a.seed);
    cfg.use_tpc = a.tpc;
    cfg.use_fda = a.fda;
    cfg.target_domain_image = a.target.clone();

    let mut echo = vec![("data", a.data.display().to_string())];
    echo.extend(a.knobs.echo());
    echo.push(("tpc", a.tpc.to_string()));
    echo.push(("fda", a.fda.to_string()));
    echo.push(("target", a.target.map(|p| p.display().to_string()).unwrap_or_default()));
    echo.push(("seed", a.seed.to_string()));
    echo.push(("model-seed", model_seed.to_string()));
    write_echo(&dir, "train", &echo)?;

    let outcome = train(model, &samples, &cfg, Some(&dir))?;
    let last = outcome.log.last().map(|r| r.total);
    println!("steps={}", outcome.log.len());
    if let Some(total) = last {
        println!("final_total_loss={total}");
    }
    println!("model={}", dir.join("model.ckpt").display());
    Ok(())
}

fn do_evaluate(a: EvaluateArgs) -> Result<()> {
    let dir = out_dir(a.out, "eval")?;
    let mut model = checkpoint::load_model(&a.model)?;
    let transform = a.transform.as_ref().map(|p| checkpoint::load_transform(p)).transpose()?;
    let samples = load_manifest(&a.data)?;
    let policy = match a.threshold {
        Some(t) => ThresholdPolicy::Fixed(t),
        None => ThresholdPolicy::OwnEer,
    };
    let report = evaluate(&mut model, transform.as_ref(), &samples, policy, a.crop_fraction)?;
    write_echo(
        &dir,
        "evaluate",
        &[
            ("model", a.model.display().to_string()),
            ("data", a.data.display().to_string()),
            ("transform", a.transform.map(|p| p.display().to_string()).unwrap_or_default()),
            ("threshold", a.threshold.map(|t| t.to_string()).unwrap_or_default()),
            ("crop-fraction", a.crop_fraction.to_string()),
        ],
    )?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&report))?;
    faceauth_core::metrics::write_scores(&dir.join("scores.csv"), &report.scores)?;
    print!("{}", metrics_csv(&report).replace(',', "=").replace("metric=value\n", ""));
    Ok(())
}

fn do_transfer(a: TransferArgs) -> Result<()> {
    let dir = out_dir(a.out, "transfer")?;
    let x = read_ppm(&a.input)?;
    let y_d = read_ppm(&a.target)?;
    let phi = LossNetwork::seeded(a.probe_seed);
    let w = TransferWeights { lambda_c: a.lambda_c, lambda_s: a.lambda_s };
    let outcome = transfer_image(&x, &y_d, &phi, &w, a.steps, a.lr)?;
    write_echo(
        &dir,
        "transfer",
        &[
            ("input", a.input.display().to_string()),
            ("target", a.target.display().to_string()),
            ("steps", a.steps.to_string()),
            ("lr", a.lr.to_string()),
            ("lambda-c", a.lambda_c.to_string()),
            ("lambda-s", a.lambda_s.to_string()),
            ("probe-seed", a.probe_seed.to_string()),
        ],
    )?;
    let out_image = dir.join("transferred.ppm");
    write_ppm(&out_image, &outcome.image)?;
    let mut trace = String::from("step,objective\n");
    for (i, v) in outcome.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    write_file(&dir.join("trace.csv"), &trace)?;
    println!("initial_objective={}", outcome.trace.first().expect("trace non-empty"));
    println!("final_objective={}", outcome.trace.last().expect("trace non-empty"));
    println!("image={}", out_image.display());
    Ok(())
}

fn do_divergence(a: DivergenceArgs) -> Result<()> {
    let dir = out_dir(a.out, "divergence")?;
    let images = |path: &Path| -> Result<Vec<Tensor>> {
        Ok(load_manifest(path)?.into_iter().map(|s| s.image).collect())
    };
    let samples_a = images(&a.data_a)?;
    let samples_b = images(&a.data_b)?;
    let model = a.model.as_ref().map(|p| checkpoint::load_model(p)).transpose()?;
    let probe = LossNetwork::seeded(a.probe_seed);
    let extractor: &dyn FeatureExtractor = match &model {
        Some(m) => m,
        None => &probe,
    };
    let report = divergence_report(extractor, &samples_a, &samples_b)?;
    write_echo(
        &dir,
        "divergence",
        &[
            ("data-a", a.data_a.display().to_string()),
            ("data-b", a.data_b.display().to_string()),
            ("model", a.model.map(|p| p.display().to_string()).unwrap_or_default()),
            ("probe-seed", a.probe_seed.to_string()),
        ],
    )?;
    write_file(&dir.join("divergence.csv"), &report.to_csv())?;
    for (layer, value, skipped) in &report.per_layer {
        println!("{layer}={value} skipped={skipped}");
    }
    Ok(())
}

fn do_ablation(a: AblationArgs) -> Result<()> {
    let dir = out_dir(a.out, "ablation")?;
    let samples = load_manifest(&a.data)?;
    let split = AblationData::from_two_domain(&samples, &a.source_domain, a.heldout_every)?;
    let base = a.knobs.to_config(0);
    let train_split = split.train.clone();
    let result = run_ablation(&base, &split, &a.seeds, |seed| desk_model(&train_split, seed))?;

    let seeds_echo =
        a.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let mut echo = vec![
        ("data", a.data.display().to_string()),
        ("source-domain", a.source_domain.clone()),
        ("heldout-every", a.heldout_every.to_string()),
        ("seeds", seeds_echo),
    ];
    echo.extend(a.knobs.echo());
    write_echo(&dir, "ablation", &echo)?;
    write_file(&dir.join("ablation.csv"), &result.to_csv())?;
    for (use_tpc, use_fda) in faceauth_core::train::ABLATION_GRID {
        println!(
            "tpc={use_tpc} fda={use_fda} mean_cross_hter={}",
            result.mean_cross_hter(use_tpc, use_fda)
        );
    }
    Ok(())
}

fn do_metrics(a: MetricsArgs) -> Result<()> {
    let dir = out_dir(a.out, "metrics")?;
    let scores = read_scores(&a.scores)?;
    let (eer_rate, eer_threshold) = eer(&scores);
    let threshold = a.threshold.unwrap_or(eer_threshold);
    let (apcer, bpcer, acer) = apcer_bpcer_acer(&scores, threshold);
    let half_total = hter(&scores, threshold);
    write_echo(
        &dir,
        "metrics",
        &[
            ("scores", a.scores.display().to_string()),
            ("threshold", a.threshold.map(|t| t.to_string()).unwrap_or_default()),
        ],
    )?;
    let csv = format!(
        "metric,value\neer,{eer_rate}\neer_threshold,{eer_threshold}\nthreshold,{threshold}\n\
         apcer,{apcer}\nbpcer,{bpcer}\nacer,{acer}\nhter,{half_total}\n"
    );
    write_file(&dir.join("metrics.csv"), &csv)?;
    print!("{}", csv.replace(',', "=").replace("metric=value\n", ""));
    Ok(())
}
