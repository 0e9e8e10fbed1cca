//! `sar`: one binary for training, evaluation and attention-map analysis.
//!
//! Every subcommand prints a JSON result on stdout. Failures print one JSON
//! error record on stderr and exit with a code from [`exit`].

pub mod manifest;

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sar_core::{connected_components, export_map, spatial_entropy, Grid2D};
use sar_train::trainer::RunSeeds;
use sar_train::{evaluate, evaluate_samples, generate_dataset, EpochRecord, RunOptions, Session, ShapeSample, TrainConfig, TrainData};
use sar_vit::{Checkpoint, Model};
use serde_json::{json, Value};

pub mod exit {
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG_PARSE: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const MISSING_INPUT: i32 = 5;
    pub const INVALID_INPUT: i32 = 6;
    pub const NON_FINITE: i32 = 7;
}

#[derive(Debug, Parser)]
#[command(name = "sar", version, about = "Spatial-entropy attention regularization: train, evaluate, analyze")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Config override such as `lambda=0` or `model.embedDim=32`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE", num_args = 1.., action = ArgAction::Append)]
    pub overrides: Vec<String>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; shorthand for `--override seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, env = "SAR_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapChoice {
    /// Post-softmax CLS attention (what the Jaccard metric thresholds).
    Post,
    /// Pre-softmax similarity (what the entropy loss sees).
    Pre,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the run log, checkpoints and final metrics under --out.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split regenerated from the config seed.
    Evaluate {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Spatial entropy of a grid file.
    Entropy {
        #[arg(value_name = "GRID")]
        input: PathBuf,
    },
    /// Connected components of a grid file (cells above --threshold).
    Ccl {
        #[arg(value_name = "GRID")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Per-image best-head Jaccard of thresholded attention against ground-truth masks.
    EvalJaccard {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Attention mass kept; defaults to the config's jaccard_fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Write per-head last-block maps of chosen test samples as PGM images.
    ExportAttention {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Test-split sample indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        /// Nearest-neighbor upscaling factor.
        #[arg(long, default_value_t = 8)]
        upscale: usize,
        #[arg(long, value_enum, default_value_t = MapChoice::Post)]
        kind: MapChoice,
    },
    /// Time connected-component labeling on random binary grids.
    BenchCcl {
        #[arg(long, default_value_t = 224)]
        side: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Entropy { .. } => "entropy",
            Command::Ccl { .. } => "ccl",
            Command::EvalJaccard { .. } => "eval-jaccard",
            Command::ExportAttention { .. } => "export-attention",
            Command::BenchCcl { .. } => "bench-ccl",
        }
    }
}

/// Settable config keys, listed in `--help`.
pub fn config_keys_help() -> String {
    let mut s = String::from("Config keys (for --config files and --override):\n");
    for k in sar_train::config::schema_keys() {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s
}

pub fn command() -> clap::Command {
    let keys = config_keys_help();
    Cli::command().after_long_help(keys.clone()).mut_subcommands(|c| c.after_long_help(keys.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        Self { kind, code, message: message.into() }
    }

    pub fn record(&self) -> Value {
        json!({ "error": { "kind": self.kind, "code": self.code, "message": self.message } })
    }
}

fn io_error(e: std::io::Error, what: &str) -> CliError {
    if e.kind() == ErrorKind::NotFound {
        CliError::new("missing-input", exit::MISSING_INPUT, format!("{what}: {e}"))
    } else {
        CliError::new("io", exit::INTERNAL, format!("{what}: {e}"))
    }
}

impl From<sar_core::Error> for CliError {
    fn from(e: sar_core::Error) -> Self {
        match e {
            sar_core::Error::Io(io) => io_error(io, "grid file"),
            sar_core::Error::InvalidArgument(_) => CliError::new("schema", exit::SCHEMA, e.to_string()),
            other => CliError::new("invalid-input", exit::INVALID_INPUT, other.to_string()),
        }
    }
}

impl From<sar_vit::Error> for CliError {
    fn from(e: sar_vit::Error) -> Self {
        match e {
            sar_vit::Error::Io(io) => io_error(io, "checkpoint"),
            sar_vit::Error::Config(_) => CliError::new("schema", exit::SCHEMA, e.to_string()),
            sar_vit::Error::Core(c) => c.into(),
            other => CliError::new("invalid-input", exit::INVALID_INPUT, other.to_string()),
        }
    }
}

impl From<sar_train::Error> for CliError {
    fn from(e: sar_train::Error) -> Self {
        use sar_train::Error as E;
        match e {
            E::Config(_) => CliError::new("config-parse", exit::CONFIG_PARSE, e.to_string()),
            E::Schema(_) | E::Incompatible(_) | E::Dataset(_) => CliError::new("schema", exit::SCHEMA, e.to_string()),
            E::NonFinite { .. } => CliError::new("non-finite", exit::NON_FINITE, e.to_string()),
            E::EmptyDataset => CliError::new("invalid-input", exit::INVALID_INPUT, e.to_string()),
            E::Io(io) => io_error(io, "file"),
            E::Vit(v) => v.into(),
            E::Core(c) => c.into(),
            E::Json(_) => CliError::new("invalid-input", exit::INVALID_INPUT, e.to_string()),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::new("internal", exit::INTERNAL, e.to_string())
}

type CliResult<T> = Result<T, CliError>;

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        o.push(format!("seed={seed}"));
    }
    o
}

fn read_config_text(cli: &Cli) -> CliResult<Option<String>> {
    cli.config
        .as_deref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| io_error(e, &format!("config {}", p.display()))))
        .transpose()
}

fn load_config(cli: &Cli) -> CliResult<TrainConfig> {
    let text = read_config_text(cli)?.unwrap_or_default();
    Ok(TrainConfig::from_toml_str(&text, &overrides(cli))?)
}

/// Config for checkpoint-based commands: --config if given, else the config
/// stored in the checkpoint, else defaults. The checkpoint fixes the architecture.
fn checkpoint_config(cli: &Cli, ck: &Checkpoint) -> CliResult<TrainConfig> {
    let model_cfg = ck.model_config()?;
    let text = match read_config_text(cli)? {
        Some(t) => t,
        None => match ck.header.get("train") {
            Some(v) => serde_json::from_value::<TrainConfig>(v.clone())
                .map_err(|e| CliError::new("invalid-input", exit::INVALID_INPUT, format!("checkpoint train config: {e}")))?
                .to_toml(),
            None => String::new(),
        },
    };
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| CliError::new("config-parse", exit::CONFIG_PARSE, e.message().to_string()))?;
    table.insert("model".into(), toml::Value::try_from(&model_cfg).expect("model config serializes"));
    let cfg = TrainConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"), &overrides(cli))?;
    if cfg.model != model_cfg {
        return Err(CliError::new("schema", exit::SCHEMA, "model keys cannot be overridden for an existing checkpoint"));
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::new("missing-input", exit::MISSING_INPUT, format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn test_split(cfg: &TrainConfig) -> CliResult<Vec<ShapeSample>> {
    Ok(generate_dataset(&cfg.test_spec(), RunSeeds::derive(cfg.seed).test_data)?)
}

fn write_json(dir: &Path, name: &str, v: &Value) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(internal)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(v).expect("json serializes") + "\n").map_err(internal)
}

fn require_out<'a>(cli: &'a Cli) -> CliResult<&'a Path> {
    cli.out.as_deref().ok_or_else(|| CliError::new("usage", exit::USAGE, format!("`{}` needs --out DIR", cli.command.name())))
}

fn cmd_train(cli: &Cli, resume: Option<&Path>) -> CliResult<(Value, Option<TrainConfig>)> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?.to_path_buf();
    let mut session = match resume {
        Some(p) => {
            let (s, stored) = Session::from_checkpoint(&load_checkpoint(p)?)?;
            if stored.model != cfg.model || stored.seed != cfg.seed {
                return Err(CliError::new("schema", exit::SCHEMA, "resume config differs from the checkpoint's model or seed"));
            }
            s
        }
        None => {
            let _ = std::fs::remove_file(out.join("runlog.jsonl"));
            let _ = std::fs::remove_dir_all(out.join("checkpoints"));
            Session::new(&cfg)?
        }
    };
    std::fs::create_dir_all(&out).map_err(internal)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(internal)?;
    let data = TrainData::generate(&cfg)?;
    let mut progress = |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  entropy {:.4}  h_r {:.3}",
            r.epoch, r.train_loss, r.train_accuracy, r.mean_entropy, r.mean_components
        )
    };
    session.run(&cfg, &data, &mut RunOptions { out_dir: Some(out.clone()), on_epoch: Some(&mut progress), ..Default::default() })?;
    let last = serde_json::to_value(session.log.last()).expect("record serializes");
    write_json(&out, "metrics.json", &last)?;
    Ok((last, Some(cfg)))
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path) -> CliResult<(Value, Option<TrainConfig>)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let model = ck.to_model()?;
    let metrics = evaluate(&model, &test_split(&cfg)?, &cfg.loss_config(), cfg.jaccard_fraction)?;
    let v = serde_json::to_value(&metrics).expect("metrics serialize");
    if let Some(out) = &cli.out {
        write_json(out, "metrics.json", &v)?;
    }
    Ok((v, Some(cfg)))
}

fn cmd_entropy(cli: &Cli, input: &Path) -> CliResult<(Value, Option<TrainConfig>)> {
    let cfg = load_config(cli)?;
    let grid = Grid2D::read_file(input)?;
    let r = spatial_entropy(&grid, &cfg.loss_config());
    let v = json!({
        "entropy": r.entropy,
        "components": r.component_count(),
        "probabilities": r.probabilities,
        "mean": r.mean,
        "support": r.components.support_size(),
    });
    if let Some(out) = &cli.out {
        write_json(out, "entropy.json", &v)?;
        std::fs::write(out.join("gradient.txt"), r.gradient.to_text()).map_err(internal)?;
    }
    Ok((v, None))
}

fn cmd_ccl(cli: &Cli, input: &Path, threshold: f64) -> CliResult<(Value, Option<TrainConfig>)> {
    let grid = Grid2D::read_file(input)?;
    let l = connected_components(&grid, threshold);
    let k = l.side();
    let rows: Vec<Vec<u32>> = l.labels().chunks(k).map(|r| r.to_vec()).collect();
    let v = json!({ "count": l.count(), "sizes": l.sizes(), "labels": rows });
    if let Some(out) = &cli.out {
        write_json(out, "ccl.json", &v)?;
    }
    Ok((v, None))
}

fn cmd_eval_jaccard(cli: &Cli, checkpoint: &Path, fraction: Option<f64>) -> CliResult<(Value, Option<TrainConfig>)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let fraction = fraction.unwrap_or(cfg.jaccard_fraction);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::new("schema", exit::SCHEMA, format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let model = ck.to_model()?;
    let data = test_split(&cfg)?;
    if data.is_empty() {
        return Err(sar_train::Error::EmptyDataset.into());
    }
    let per = evaluate_samples(&model, &data, &cfg.loss_config(), fraction)?;
    let mean = per.iter().map(|e| e.jaccard).sum::<f64>() / per.len() as f64;
    let images: Vec<Value> = per
        .iter()
        .enumerate()
        .map(|(i, e)| json!({ "index": i, "label": e.label, "best_head": e.best_head, "jaccard": e.jaccard }))
        .collect();
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).map_err(internal)?;
        let lines: String = images.iter().map(|v| v.to_string() + "\n").collect();
        std::fs::write(out.join("jaccard.jsonl"), lines).map_err(internal)?;
    }
    Ok((json!({ "fraction": fraction, "images": per.len(), "mean_jaccard": mean, "per_image": images }), Some(cfg)))
}

fn cmd_export(cli: &Cli, checkpoint: &Path, samples: &[usize], upscale: usize, kind: MapChoice) -> CliResult<(Value, Option<TrainConfig>)> {
    let out = require_out(cli)?.to_path_buf();
    if upscale == 0 {
        return Err(CliError::new("usage", exit::USAGE, "--upscale must be at least 1"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let model: Model = ck.to_model()?;
    let data = test_split(&cfg)?;
    std::fs::create_dir_all(&out).map_err(internal)?;
    let mut written = Vec::new();
    for &i in samples {
        let s = data.get(i).ok_or_else(|| {
            CliError::new("invalid-input", exit::INVALID_INPUT, format!("sample {i} out of range ({} test samples)", data.len()))
        })?;
        let trace = model.forward(&s.image)?;
        let maps = match kind {
            MapChoice::Post => trace.last_block_cls_attention(),
            MapChoice::Pre => trace.last_block_similarity.clone(),
        };
        let tag = match kind {
            MapChoice::Post => "attn",
            MapChoice::Pre => "sim",
        };
        for (h, m) in maps.iter().enumerate() {
            let name = format!("sample{i:04}-{tag}-head{h}.pgm");
            export_map(m, &out.join(&name), upscale)?;
            written.push(name);
        }
        let name = format!("sample{i:04}-mask.pgm");
        export_map(&s.mask, &out.join(&name), upscale)?;
        written.push(name);
    }
    Ok((json!({ "kind": format!("{kind:?}").to_lowercase(), "files": written }), Some(cfg)))
}

fn cmd_bench(cli: &Cli, side: usize, density: f64, iters: usize) -> CliResult<(Value, Option<TrainConfig>)> {
    if side == 0 || iters == 0 || !(0.0..=1.0).contains(&density) {
        return Err(CliError::new("usage", exit::USAGE, "need side >= 1, iters >= 1 and density in [0, 1]"));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid2D::from_fn(side, |_, _| if rng.gen_bool(density) { 1.0 } else { 0.0 })?;
    let mut times = Vec::with_capacity(iters);
    let mut count = 0;
    for _ in 0..iters {
        let t = Instant::now();
        count = connected_components(&grid, 0.0).count();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let v = json!({
        "side": side,
        "density": density,
        "seed": seed,
        "components": count,
        "min_ms": times[0],
        "median_ms": times[times.len() / 2],
        "max_ms": times[times.len() - 1],
    });
    if let Some(out) = &cli.out {
        write_json(out, "bench.json", &v)?;
    }
    Ok((v, None))
}

/// Runs a parsed command; returns the JSON printed on success.
pub fn execute(cli: &Cli) -> CliResult<Value> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new("usage", exit::USAGE, "--threads must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (value, cfg) = match &cli.command {
        Command::Train { resume } => cmd_train(cli, resume.as_deref())?,
        Command::Evaluate { checkpoint } => cmd_evaluate(cli, checkpoint)?,
        Command::Entropy { input } => cmd_entropy(cli, input)?,
        Command::Ccl { input, threshold } => cmd_ccl(cli, input, *threshold)?,
        Command::EvalJaccard { checkpoint, fraction } => cmd_eval_jaccard(cli, checkpoint, *fraction)?,
        Command::ExportAttention { checkpoint, samples, upscale, kind } => cmd_export(cli, checkpoint, samples, *upscale, *kind)?,
        Command::BenchCcl { side, density, iters } => cmd_bench(cli, *side, *density, *iters)?,
    };
    if let Some(out) = &cli.out {
        if out.exists() {
            let seed = cfg.as_ref().map(|c| c.seed).or(cli.seed);
            manifest::write_manifest(out, cli.command.name(), cfg.map(|c| c.digest()), seed).map_err(internal)?;
        }
    }
    Ok(value)
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { exit::USAGE } else { 0 };
            }
            let err = CliError::new("usage", exit::USAGE, e.render().to_string().trim().to_string());
            eprintln!("{}", err.record());
            return err.code;
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let err = CliError::new("usage", exit::USAGE, e.to_string());
            eprintln!("{}", err.record());
            return err.code;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", e.record());
            e.code
        }
    }
}
