//! `tsvit` — reproducible experiments from a JSON config.
//!
//! Exit codes: 0 success, 2 usage/config error, 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsvit_core::peft::{apply_peft, merge_lora, BiasSubset, PeftSpec, TokenMode};
use tsvit_core::{count_params, Rng, TsVit};
use tsvit_run::checkpoint::{load_checkpoint, restore_into, save_checkpoint, warm_start};
use tsvit_run::config::ExperimentConfig;
use tsvit_run::error::RunError;
use tsvit_run::manifest::{DatasetManifest, Split};
use tsvit_run::synthetic::{default_profiles, generate_synthetic, SyntheticConfig};
use tsvit_run::train::{lr_sweep, sweep_csv, train, HParams, DEFAULT_LR_GRID};
use tsvit_run::util::atomic_write;

#[derive(Parser)]
#[command(name = "tsvit", version, about = "TSViT PEFT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (tiles + manifest).
    GenData(GenDataArgs),
    /// Train per the experiment config; writes history CSV and best checkpoint.
    Train(TrainArgs),
    /// Report trainable-parameter counts.
    Count(CountArgs),
    /// Learning-rate sweep; writes a sweep CSV.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a split; prints metrics JSON.
    Eval(EvalArgs),
    /// Fold LoRA updates into base weights of a checkpoint.
    Merge(MergeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    tiles: usize,
    #[arg(long, default_value_t = 2)]
    classes: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    timesteps: usize,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    /// Shift every class's profile peak by this many days (for building
    /// distribution-shifted downstream tasks).
    #[arg(long, default_value_t = 0.0)]
    peak_shift: f32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
    /// Tabulate the eight canonical methods in ascending percent.
    #[arg(long)]
    all_methods: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated learning rates; defaults to the published grid.
    #[arg(long)]
    lrs: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Errors tagged with the exit code they should produce.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Config-loading failures are usage errors (exit 2).
fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &ExperimentConfig) -> CliResult<()> {
    let json = serde_json::to_string_pretty(cfg).map_err(RunError::Json)?;
    println!("resolved config:\n{json}");
    Ok(())
}

/// Fresh model with surgery applied and, when configured, base weights
/// warm-started from a pretraining checkpoint.
fn build_model(cfg: &ExperimentConfig, config_path: &Path) -> CliResult<TsVit> {
    let mut rng = Rng::new(cfg.hparams.seed);
    let mut model = TsVit::new(cfg.model.clone(), &mut rng.fork(1)).map_err(RunError::Core)?;
    if let Some(init) = &cfg.init_checkpoint {
        let path = cfg.resolve(config_path, init);
        let loaded = load_checkpoint(&path)
            .map_err(|e| CliError::Usage(format!("init checkpoint: {e}")))?;
        warm_start(&mut model, &loaded)?;
    }
    apply_peft(&mut model, &cfg.hparams.peft, cfg.unfreeze_head, &mut rng.fork(2))
        .map_err(RunError::Core)?;
    Ok(model)
}

fn load_manifest(cfg: &ExperimentConfig, config_path: &Path) -> CliResult<(PathBuf, DatasetManifest)> {
    let path = cfg.resolve(config_path, &cfg.dataset);
    let manifest = DatasetManifest::load(&path)
        .map_err(|e| CliError::Usage(format!("dataset manifest: {e}")))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((base, manifest))
}

fn write_resolved_config(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<()> {
    let json = serde_json::to_string_pretty(cfg).map_err(RunError::Json)?;
    atomic_write(&out_dir.join("config.json"), json.as_bytes())?;
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    if args.classes < 2 {
        return Err(CliError::Usage(format!(
            "--classes must be at least 2, got {}",
            args.classes
        )));
    }
    let mut profiles = default_profiles(args.classes);
    for p in &mut profiles {
        p.peak_day += args.peak_shift;
    }
    let cfg = SyntheticConfig {
        tiles: args.tiles,
        k: args.classes,
        t: args.timesteps,
        h: args.height,
        w: args.width,
        c: args.channels,
        profiles,
        noise_sigma: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&cfg).map_err(RunError::Json)?
    );
    let manifest = generate_synthetic(&cfg, &args.out)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn apply_overrides(hp: &mut HParams, seed: Option<u64>, lr: Option<f32>, epochs: Option<usize>) {
    if let Some(s) = seed {
        hp.seed = s;
    }
    if let Some(l) = lr {
        hp.lr = l;
    }
    if let Some(e) = epochs {
        hp.epochs = e;
    }
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg.hparams, args.seed, args.lr, args.epochs);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    echo_config(&cfg)?;
    let (base, manifest) = load_manifest(&cfg, &args.config)?;
    let mut model = build_model(&cfg, &args.config)?;
    let out_dir = cfg.resolve(&args.config, &cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(RunError::Io)?;
    write_resolved_config(&cfg, &out_dir)?;
    let history = train(&mut model, &base, &manifest, &cfg.hparams, &out_dir)?;
    atomic_write(&out_dir.join("history.csv"), history.to_csv().as_bytes())?;
    println!(
        "best epoch {} val_f1 {:.6} checkpoint {}",
        history.best_epoch,
        history.best_val_f1,
        history.best_checkpoint.display()
    );
    Ok(())
}

/// The eight canonical method specs of the published comparison.
fn canonical_specs() -> Vec<PeftSpec> {
    vec![
        PeftSpec::HeadTune,
        PeftSpec::BitFit { subset: BiasSubset::Partial },
        PeftSpec::BitFit { subset: BiasSubset::Full },
        PeftSpec::Vpt { temporal_len: 16, spatial_len: 16, external: true, deep: true },
        PeftSpec::Lora { rt: 4, rs: 4, rr: 4, alpha: 4.0 },
        PeftSpec::AdaptFormer {
            dt: 8,
            ds: 8,
            placement: tsvit_core::model::AdapterPlacement::Parallel,
            scale: 1.0,
        },
        PeftSpec::TokenTune { mode: TokenMode::Full },
        PeftSpec::FullFineTune,
    ]
}

fn cmd_count(args: &CountArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    echo_config(&cfg)?;
    if args.all_methods {
        let mut rows = Vec::new();
        for spec in canonical_specs() {
            let mut rng = Rng::new(cfg.hparams.seed);
            let mut model =
                TsVit::new(cfg.model.clone(), &mut rng.fork(1)).map_err(RunError::Core)?;
            apply_peft(&mut model, &spec, cfg.unfreeze_head, &mut rng.fork(2))
                .map_err(RunError::Core)?;
            let report = count_params(&model);
            rows.push((spec.name().to_string(), report));
        }
        rows.sort_by(|a, b| {
            (a.1.trainable * b.1.total)
                .cmp(&(b.1.trainable * a.1.total))
                .then_with(|| a.0.cmp(&b.0))
        });
        println!("{}", tsvit_core::accounting::CSV_HEADER);
        for (method, report) in &rows {
            println!("{}", report.render_csv_row(method));
        }
    } else {
        let model = build_model(&cfg, &args.config)?;
        let report = count_params(&model);
        println!("{}", report.render_text());
        println!("{}", tsvit_core::accounting::CSV_HEADER);
        println!("{}", report.render_csv_row(cfg.hparams.peft.name()));
    }
    Ok(())
}

fn parse_lrs(text: &str) -> CliResult<Vec<f32>> {
    let lrs: Result<Vec<f32>, _> = text.split(',').map(|s| s.trim().parse::<f32>()).collect();
    let lrs = lrs.map_err(|e| CliError::Usage(format!("bad --lrs list: {e}")))?;
    if lrs.is_empty() || lrs.iter().any(|&l| !(l > 0.0)) {
        return Err(CliError::Usage("learning rates must be positive".into()));
    }
    Ok(lrs)
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg.hparams, args.seed, None, args.epochs);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    echo_config(&cfg)?;
    let lrs = match &args.lrs {
        Some(text) => parse_lrs(text)?,
        None => DEFAULT_LR_GRID.to_vec(),
    };
    let (base, manifest) = load_manifest(&cfg, &args.config)?;
    let out_dir = cfg.resolve(&args.config, &cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(RunError::Io)?;
    write_resolved_config(&cfg, &out_dir)?;

    let jobs = args.jobs.max(1);
    let rows = if jobs == 1 {
        lr_sweep(
            || build_model(&cfg, &args.config).map_err(cli_to_run),
            &base,
            &manifest,
            &cfg.hparams,
            &lrs,
            &out_dir,
        )?
    } else {
        // Each entry trains an isolated model; results merge by lr key.
        let mut rows = Vec::new();
        let results: Vec<_> = std::thread::scope(|scope| {
            lrs.chunks(jobs.min(lrs.len()).max(1))
                .flat_map(|chunk| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&lr| {
                            let cfg = &cfg;
                            let base = &base;
                            let manifest = &manifest;
                            let out_dir = &out_dir;
                            let config_path = &args.config;
                            scope.spawn(move || {
                                lr_sweep(
                                    || build_model(cfg, config_path).map_err(cli_to_run),
                                    base,
                                    manifest,
                                    &cfg.hparams,
                                    &[lr],
                                    &out_dir.join(format!("lr{lr}")),
                                )
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("sweep worker panicked"))
                        .collect::<Vec<_>>()
                })
                .collect()
        });
        for result in results {
            rows.extend(result?);
        }
        rows.sort_by(|a, b| a.lr.partial_cmp(&b.lr).unwrap());
        rows
    };
    let csv = sweep_csv(&rows);
    atomic_write(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cli_to_run(e: CliError) -> RunError {
    match e {
        CliError::Usage(m) | CliError::Runtime(m) => RunError::Invalid(m),
    }
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    echo_config(&cfg)?;
    let split = Split::parse(&args.split).map_err(|e| CliError::Usage(e.to_string()))?;
    let (base, manifest) = load_manifest(&cfg, &args.config)?;
    let mut model = build_model(&cfg, &args.config)?;
    let loaded = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Usage(format!("checkpoint: {e}")))?;
    restore_into(&mut model, &loaded)?;
    let metrics = tsvit_run::train::evaluate(&model, &base, &manifest, split)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(RunError::Json)?);
    Ok(())
}

fn cmd_merge(args: &MergeArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    echo_config(&cfg)?;
    let mut model = build_model(&cfg, &args.config)?;
    let loaded = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Usage(format!("checkpoint: {e}")))?;
    restore_into(&mut model, &loaded)?;
    let merged = merge_lora(&mut model).map_err(RunError::Core)?;
    if !merged {
        eprintln!("warning: no LoRA modules attached; copying weights through");
    }
    save_checkpoint(&model.params, &args.out)?;
    println!("merged checkpoint: {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Count(a) => cmd_count(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Merge(a) => cmd_merge(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
