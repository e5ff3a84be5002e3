mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use texvit_autodiff::{probe_by_name, GradCheckOptions, GradProbe};
use texvit_core::data::image_io::decode_image;
use texvit_core::data::{load_manifest, synth_texture_dataset, CorruptionKind};
use texvit_core::explain::{export_overlay, grad_cam, DEFAULT_LAYER};
use texvit_core::model::gradcheck::{all_probes, find_probe, TexViTProbe};
use texvit_core::model::parameter_count;
use texvit_core::protocol::{run_protocol, ProtocolSpec};
use texvit_core::train::{evaluate_manifest, train_manifests, Checkpoint, LogHooks};
use texvit_core::{preset, Error};

use config::CliConfig;

/// Exit statuses.
const EXIT_CONFIG: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum Failure {
    Core(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::GradCheck(_) => EXIT_NUMERIC,
            Failure::Core(Error::Protocol(_)) => EXIT_PROTOCOL,
            Failure::Core(Error::Divergence { .. }) => EXIT_NUMERIC,
            Failure::Core(Error::Tensor(texvit_autodiff::Error::NonFinite { .. })) => EXIT_NUMERIC,
            Failure::Core(_) => EXIT_CONFIG,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::GradCheck(s) => write!(f, "gradient check failed: {s}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "texvit", version, about = "Texture-aware dual-branch ViT for deepfake detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic smooth-vs-textured corpus with train/val/test manifests.
    Synth(SynthArgs),
    /// Train a model; the best validation epoch is written as the checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest, optionally under a corruption.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the parameter count of a preset.
    Params(ParamsArgs),
    /// Write a Grad-CAM overlay (original | heatmap blend) as PNG.
    Cam(CamArgs),
    /// Run an evaluation protocol (cross_domain, corruption_grid, ablation).
    Protocol(ProtocolArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Low-pass sigma for the smooth class, in pixels.
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long = "train")]
    train_manifest: Option<PathBuf>,
    #[arg(long = "val")]
    val_manifest: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker thread.
    #[arg(long)]
    reproducible: bool,
    /// Turn every augmentation off.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "none")]
    corrupt: CorruptionKind,
    /// Corruption parameters come from the `[corruption]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the noise corruption; defaults to the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `metrics.json` and `roc.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check the whole network built from this preset.
    #[arg(long)]
    preset: Option<String>,
    /// Check one registered probe (a primitive op or `texvit_micro`).
    #[arg(long)]
    op: Option<String>,
    /// Negate every analytic gradient; the check must then fail.
    #[arg(long)]
    corrupt_backward: bool,
    /// Random instances per probe.
    #[arg(long, default_value_t = 3)]
    instances: u64,
    /// Coordinates per instance.
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long, default_value = "paper_scale")]
    preset: String,
}

#[derive(Args, Debug)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    /// Target class; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// `TEXVIT_THREADS` caps the worker pool; reproducible runs use one thread.
fn init_threads(reproducible: bool) -> Result<(), Failure> {
    let from_env = match std::env::var("TEXVIT_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
            Error::Config(format!("TEXVIT_THREADS must be a positive integer, got `{v}`"))
        })?),
        Err(_) => None,
    };
    let threads = if reproducible { Some(1) } else { from_env };
    if let Some(n) = threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let corpus = synth_texture_dataset(a.n, a.size, a.sigma, a.seed, &a.out)?;
    for (m, p) in [&corpus.train, &corpus.val, &corpus.test].into_iter().zip(&corpus.manifest_paths) {
        println!("{} ({} images)", p.display(), m.len());
    }
    let [e0, e1] = corpus.laplacian_energy;
    println!(
        "mean Laplacian energy: class 0 (real) {e0:.6}, class 1 (fake) {e1:.6}; fake is {}",
        if e1 < e0 { "smoother" } else { "NOT smoother" }
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    if let Some(p) = &a.preset {
        cfg.preset = p.clone();
    }
    let t = &mut cfg.training;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.seed = a.seed.unwrap_or(t.seed);
    t.reproducible |= a.reproducible;
    if a.no_augment {
        t.augment = Default::default();
    }
    let need = |p: &Option<PathBuf>, over: &Option<PathBuf>, what: &str| {
        over.clone().or_else(|| p.clone()).ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")))
    };
    let train_m = need(&cfg.train_manifest, &a.train_manifest, "training manifest")?;
    let val_m = need(&cfg.val_manifest, &a.val_manifest, "validation manifest")?;
    let out = need(&cfg.checkpoint, &a.out, "checkpoint path")?;
    let model = cfg.validate()?;
    init_threads(cfg.training.reproducible)?;

    let (tr, va) = (load_manifest(&train_m)?, load_manifest(&val_m)?);
    log::info!("training {} on {} images, validating on {}", model.preset, tr.len(), va.len());
    let outcome = train_manifests(&model, &cfg.training, &tr, &va, &mut LogHooks)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    outcome.checkpoint.save(&out)?;
    let ck = &outcome.checkpoint;
    println!("best epoch {} val_accuracy {}", ck.best_epoch, ck.best_val_accuracy);
    println!("checkpoint {}", out.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let cfg = CliConfig::load_or_default(a.config.as_deref())?;
    let mut spec = cfg.corruption.clone();
    spec.kind = a.corrupt;
    spec.validate()?;
    init_threads(false)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let report = evaluate_manifest(&ckpt, &manifest, &spec, a.seed.unwrap_or(cfg.training.seed))?;
    let json = report.to_json();
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        write_file(&dir.join("metrics.json"), &json)?;
        if let Some(roc) = report.roc_csv() {
            write_file(&dir.join("roc.csv"), &roc)?;
        }
    }
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    init_threads(false)?;
    let probes: Vec<Box<dyn GradProbe>> = match (&a.op, &a.preset) {
        (Some(op), _) => vec![find_probe(op)
            .or_else(|| probe_by_name(op))
            .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?],
        (None, Some(p)) => vec![Box::new(TexViTProbe { name: "texvit", config: preset(p)?, batch: 2 })],
        (None, None) => all_probes(),
    };
    if a.probes == 0 || a.instances == 0 {
        return Err(Error::Config("--probes and --instances must be at least 1".into()).into());
    }
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for probe in &probes {
        let mut probe_worst = 0.0f64;
        for seed in 0..a.instances {
            let opts = GradCheckOptions { probes: a.probes, seed, flip_backward: a.corrupt_backward, ..Default::default() };
            let r = probe.check(seed, &opts).map_err(Error::from)?;
            probe_worst = probe_worst.max(r.max_rel_error);
        }
        let ok = probe_worst <= a.tolerance;
        println!("{:<20} max relative error {probe_worst:.3e}  {}", probe.name(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(probe.name());
        }
        worst = worst.max(probe_worst);
    }
    println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(failed.join(", ")))
    }
}

fn cmd_params(a: &ParamsArgs) -> CmdResult {
    let n = parameter_count(&preset(&a.preset)?);
    if a.preset == "paper_scale" {
        let ok = (38.7e6..=47.3e6).contains(&(n as f64));
        println!("{n} parameters ({:.2}M): {} (budget 38.7M..47.3M)", n as f64 / 1e6, if ok { "PASS" } else { "FAIL" });
    } else {
        println!("{n} parameters");
    }
    Ok(())
}

fn cmd_cam(a: &CamArgs) -> CmdResult {
    init_threads(false)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let img = decode_image(&a.image)?;
    let heat = grad_cam(&ckpt, &img, &a.layer, a.class)?;
    export_overlay(&img, &heat, &a.out)?;
    println!("{} (layer {}, class {})", a.out.display(), heat.layer, heat.target_class);
    Ok(())
}

fn cmd_protocol(a: &ProtocolArgs) -> CmdResult {
    let spec = ProtocolSpec::load(&a.spec)?;
    init_threads(spec.training.reproducible)?;
    let report = run_protocol(&spec, &a.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
        Command::Cam(a) => cmd_cam(a),
        Command::Protocol(a) => cmd_protocol(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
