use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cccdfsl::cycle::{self, Retrieval, TitMode};
use cccdfsl::episode::{self, Episode, EpisodeBundle};
use cccdfsl::metrics;
use cccdfsl::synth::{self, SynthSpec};
use cccdfsl::trainer::{self, EpisodeSource, TrainConfig};
use cccdfsl::transform;
use cccdfsl::Error;

mod config;

/// A failed command: message for stderr plus process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 5, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DivergenceDetected(_) => 3,
            Error::Io(_) => 5,
            Error::EmptyQuerySet | Error::MissingClassSupport(_) => 4,
            e if e.is_format_error() => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "cccdfsl", version, args_override_self = true, about = "Cycle-consistency regularised few-shot adaptation on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-signal synthetic episode bundle.
    GenSynth(GenSynthArgs),
    /// Train on one bundle's support set and write a checkpoint.
    Train(TrainArgs),
    /// Report query accuracy and alignment for a checkpoint as JSON.
    Eval(EvalArgs),
    /// Export cycle traces, similarity maps and anchor positions.
    Trace(TraceArgs),
    /// Train and evaluate over many episodes.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct SpecFlags {
    #[arg(long = "C", default_value_t = 5)]
    classes: usize,
    #[arg(long = "d", default_value_t = 32)]
    dim: usize,
    #[arg(long = "M", default_value_t = 16)]
    patches: usize,
    #[arg(long = "A", default_value_t = 2)]
    augmentations: usize,
    /// Support samples per class.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Query samples per class.
    #[arg(long, default_value_t = 15)]
    queries: usize,
    /// Planted signal patches per image.
    #[arg(long, default_value_t = 2)]
    signal: usize,
    #[arg(long, default_value_t = 0.8)]
    strength: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Cosine between distinct class directions.
    #[arg(long, default_value_t = 0.3)]
    overlap: f64,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SpecFlags {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            dim: self.dim,
            patches: self.patches,
            augmentations: self.augmentations,
            shots: self.shots,
            queries: self.queries,
            signal_patches: self.signal,
            signal_strength: self.strength,
            noise_sigma: self.noise,
            distractor_overlap: self.overlap,
            view_jitter_sigma: self.jitter,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenSynthArgs {
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long)]
    out: PathBuf,
}

/// Training and cycle options; each overrides the same key from `--config`.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Flat key=value file with defaults for the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-dataset cycle weights: chestx, isic, eurosat, cropdiseases.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Anchors per (image view, class).
    #[arg(long)]
    k: Option<usize>,
    /// Cross-entropy temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Temperature of the soft text reconstruction.
    #[arg(long)]
    tau_soft: Option<f64>,
    #[arg(long)]
    retrieval: Option<Retrieval>,
    #[arg(long)]
    tit_mode: Option<TitMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// MLP hidden width (defaults to the feature dimension).
    #[arg(long)]
    hidden: Option<usize>,
    /// Initialisation seed.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Refuse bundles with a different augmented-view count.
    #[arg(long)]
    expect_views: Option<usize>,
    /// Print progress every N epochs.
    #[arg(long)]
    log_every: Option<usize>,
}

impl TrainFlags {
    fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("dataset", self.dataset.clone());
        put("lambda1", self.lambda1.map(|v| v.to_string()));
        put("lambda2", self.lambda2.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("tau_soft", self.tau_soft.map(|v| v.to_string()));
        put("retrieval", self.retrieval.map(|v| v.to_string()));
        put("tit_mode", self.tit_mode.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("momentum", self.momentum.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("seed", self.train_seed.map(|v| v.to_string()));
        put("augmentations", self.expect_views.map(|v| v.to_string()));
        put("log_every", self.log_every.map(|v| v.to_string()));
        m
    }

    fn resolve(&self) -> Result<(TrainConfig, Option<String>), Failure> {
        let file = match &self.config {
            Some(p) => config::load(p)?,
            None => BTreeMap::new(),
        };
        let (cfg, dataset) = config::resolve(&file, &self.entries()).map_err(Failure::usage)?;
        cfg.validate()?;
        Ok((cfg, dataset))
    }
}

fn echo_config(cfg: &TrainConfig, dataset: Option<&str>) {
    let c = &cfg.cycle;
    eprintln!(
        "config: dataset={} lambda1={} lambda2={} k={} tau={} tau_soft={} retrieval={} tit_mode={} epochs={} lr={} momentum={}",
        dataset.unwrap_or("-"),
        c.lambda1,
        c.lambda2,
        c.k,
        c.tau_ce,
        c.tau_soft,
        c.retrieval,
        c.tit_mode,
        cfg.epochs,
        cfg.lr,
        cfg.momentum
    );
}

fn config_json(cfg: &TrainConfig, dataset: Option<&str>) -> serde_json::Value {
    let c = &cfg.cycle;
    json!({
        "dataset": dataset,
        "lambda1": c.lambda1,
        "lambda2": c.lambda2,
        "k": c.k,
        "tau": c.tau_ce,
        "tau_soft": c.tau_soft,
        "retrieval": c.retrieval,
        "tit_mode": c.tit_mode,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "seed": cfg.seed,
    })
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Per-epoch history CSV output path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Checkpoint to evaluate; a fresh zero-adapter initialisation when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Also report nearest-prototype accuracy.
    #[arg(long)]
    prototype: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    spec: SpecFlags,
    /// Directory of .ccfb bundles, used instead of synthetic episodes.
    #[arg(long)]
    bundles: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Also train a CE-only baseline on every episode.
    #[arg(long)]
    compare: bool,
    /// Per-episode CSV output path; written to stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn load_bundle(path: &Path) -> Result<EpisodeBundle, Failure> {
    episode::load_bundle(path).map_err(|e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    })
}

fn load_or_init(ckpt: Option<&Path>, bundle: &EpisodeBundle) -> Result<transform::ModelParams, Failure> {
    let params = match ckpt {
        Some(p) => transform::load_params(p)?,
        None => transform::init_params(bundle.dim(), bundle.dim(), 0),
    };
    if params.dim() != bundle.dim() {
        return Err(Failure {
            code: 4,
            message: format!("checkpoint has d={}, bundle has d={}", params.dim(), bundle.dim()),
        });
    }
    Ok(params)
}

fn gen_synth(args: GenSynthArgs) -> CmdResult {
    let spec = args.spec.spec();
    let bundle = synth::gen_synthetic(&spec)?;
    episode::save_bundle(&bundle, &args.out)?;
    eprintln!(
        "wrote {}: C={} d={} M={} A={} support={} query={} signal patches per image={}",
        args.out.display(),
        bundle.num_classes(),
        bundle.dim(),
        bundle.patches(),
        bundle.augmentations(),
        bundle.support().len(),
        bundle.query().len(),
        spec.signal_patches
    );
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    let (cfg, dataset) = args.train.resolve()?;
    let bundle = load_bundle(&args.bundle)?;
    echo_config(&cfg, dataset.as_deref());
    let log_every = cfg.log_every;
    let result = trainer::train_episode_with(&bundle, &cfg, |r| {
        if log_every > 0 && r.epoch % log_every == 0 {
            eprintln!(
                "epoch {:>4} total={:.6} ce={:.6} cyc_txt={:.6} cyc_img={:.6} hard_rate={:.3}",
                r.epoch, r.loss.total, r.loss.ce, r.loss.cyc_txt, r.loss.cyc_img, r.loss.hard_cycle_rate
            );
        }
    });
    let (params, history) = match result {
        Ok(v) => v,
        Err(Error::DivergenceDetected(d)) => {
            if let Some(p) = &args.history {
                write_file(p, d.history.to_csv())?;
            }
            return Err(Error::DivergenceDetected(d).into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(p) = &args.ckpt {
        transform::save_params(&params, p)?;
    }
    if let Some(p) = &args.history {
        write_file(p, history.to_csv())?;
    }
    let final_loss = cycle::total_loss(&bundle, &params, &cfg.cycle)?;
    let out = json!({
        "config": config_json(&cfg, dataset.as_deref()),
        "initial": history.epochs.first().map(|r| r.loss),
        "final": final_loss,
    });
    println!("{out}");
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let params = load_or_init(args.ckpt.as_deref(), &bundle)?;
    let ep = Episode::new(&bundle);
    let align = metrics::alignment_on(&ep, &params)?;
    let accuracy = metrics::accuracy_on(&ep, &params)?;
    let mut out = json!({
        "accuracy": accuracy,
        "A_g": align.a_g,
        "A_l": align.a_l,
        "A_l_transformed": align.a_l_transformed,
        "per_class": align.per_class,
    });
    if args.prototype {
        out["prototype_accuracy"] = json!(metrics::prototype_accuracy_on(&ep, &params)?);
    }
    eprintln!(
        "accuracy={accuracy:.4} A_g={:.4} A_l={:.4} A_l_transformed={:.4}",
        align.a_g, align.a_l, align.a_l_transformed
    );
    println!("{out}");
    Ok(())
}

fn trace(args: TraceArgs) -> CmdResult {
    let (cfg, dataset) = args.train.resolve()?;
    let bundle = load_bundle(&args.bundle)?;
    let params = load_or_init(args.ckpt.as_deref(), &bundle)?;
    echo_config(&cfg, dataset.as_deref());
    let ep = Episode::new(&bundle);
    let eval = cycle::evaluate(&ep, &params, &cfg.cycle)?;
    let trace = metrics::trace_of(&ep, &eval);

    let simdir = args.out.join("simmaps");
    fs::create_dir_all(&simdir).map_err(|e| Failure::io(format!("{}: {e}", simdir.display())))?;
    let trace_json = serde_json::to_string_pretty(&trace).map_err(Error::from)?;
    write_file(&args.out.join("trace.json"), trace_json)?;
    let maps = metrics::sim_maps(&ep, &eval);
    for m in &maps {
        let stem = format!("class{}_sample{}", m.class, m.sample);
        write_file(&simdir.join(format!("{stem}.csv")), m.to_csv())?;
        write_file(&simdir.join(format!("{stem}.pgm")), m.to_pgm())?;
    }
    write_file(&args.out.join("anchors.csv"), metrics::anchor_overlay(&ep, &eval))?;
    let summary = json!({
        "loss": eval.breakdown,
        "simmaps": maps.len(),
        "anchors": eval.anchors.len(),
    });
    eprintln!(
        "wrote trace with {} T-I-T steps, {} I-T-I steps, {} similarity maps to {}",
        trace.tit.len(),
        trace.iti.len(),
        maps.len(),
        args.out.display()
    );
    println!("{summary}");
    Ok(())
}

fn read_bundle_dir(dir: &Path) -> Result<Vec<EpisodeBundle>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Failure::io(e.to_string()))?.path();
        if path.extension().is_some_and(|x| x == "ccfb") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::usage(format!("no .ccfb files in {}", dir.display())));
    }
    paths.iter().map(|p| load_bundle(p)).collect()
}

fn bench(args: BenchArgs) -> CmdResult {
    let (cfg, dataset) = args.train.resolve()?;
    let source = match &args.bundles {
        Some(dir) => EpisodeSource::Bundles(read_bundle_dir(dir)?),
        None => EpisodeSource::Synthetic(args.spec.spec()),
    };
    echo_config(&cfg, dataset.as_deref());
    let summary = trainer::run_benchmark(&source, &cfg, args.episodes, args.compare)?;
    let pct = |m: &trainer::MeanCi| format!("{:.2}% ± {:.2}", 100.0 * m.mean, 100.0 * m.ci95);
    eprintln!("episodes: {}", summary.episodes.len());
    eprintln!("full method     {}", pct(&summary.full));
    if let (Some(ce), Some(delta)) = (&summary.ce_only, &summary.delta) {
        let wins = summary
            .episodes
            .iter()
            .filter(|e| e.ce_only.is_some_and(|c| e.full.a_l_transformed > c.a_l_transformed))
            .count();
        eprintln!("CE only         {}", pct(ce));
        eprintln!("paired delta    {}", pct(delta));
        eprintln!("A_l_transformed higher with cycles in {wins}/{} episodes", summary.episodes.len());
    }
    let csv = summary.to_csv();
    match &args.csv {
        Some(p) => write_file(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Trace(a) => trace(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
