use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use contextdet::autodiff::OpKind;
use contextdet::data::{
    generate_synthetic, ground_truth, load_dataset, save_dataset, synthetic_labels, RunConfig, VideoRecord,
};
use contextdet::detection::{predictions_to_json, VideoSegment};
use contextdet::eval::{evaluate, validate_thresholds, EvalReport};
use contextdet::gradcheck::{run_suite, SuiteConfig};
use contextdet::model::load_checkpoint;
use contextdet::train::{metrics_csv, predict, train, write_run};
use contextdet::{plot, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "contextdet", version, about = "Temporal action detection with adaptive context aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON or key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.embed_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated tIoU thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a loss plot.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or a predictions file) against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the configured validation data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score these predictions instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Write predictions of a checkpoint as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (`train/` and `val/`).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one model per grid entry.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One entry: `;`-separated overrides. Repeat for more rows.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Finite-difference gradient checks of every op and the network.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Test hook: scale the backward of this op.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

/// A failed acceptance-style check; maps to its own exit code.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        Some(e) if e.is_data() => EXIT_DATA,
        _ => 1,
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = &common.thresholds {
        cfg.eval.thresholds = t.clone();
    }
    Ok(cfg)
}

/// Training and validation records for `cfg`.
fn load_data(cfg: &RunConfig) -> anyhow::Result<(Vec<String>, Vec<VideoRecord>, Vec<VideoRecord>)> {
    match &cfg.data.train_dir {
        Some(dir) => {
            let train = load_dataset(dir)?;
            let val = match &cfg.data.val_dir {
                Some(v) => load_dataset(v)?.records,
                None => Vec::new(),
            };
            Ok((train.labels, train.records, val))
        }
        None => {
            let spec = &cfg.data.synthetic;
            let mut all = generate_synthetic(&contextdet::data::SyntheticSpec {
                num_videos: spec.num_videos + cfg.data.synthetic_holdout,
                ..spec.clone()
            })?;
            let val = all.split_off(spec.num_videos);
            Ok((synthetic_labels(spec.num_classes), all, val))
        }
    }
}

/// Labels and records to evaluate: `--data`, else the configured
/// validation set, else the training set.
fn eval_records(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<(Vec<String>, Vec<VideoRecord>)> {
    if let Some(dir) = data.map(Path::to_path_buf).or(cfg.data.val_dir.as_ref().map(PathBuf::from)) {
        let ds = load_dataset(dir)?;
        return Ok((ds.labels, ds.records));
    }
    let (labels, train, val) = load_data(cfg)?;
    Ok((labels, if val.is_empty() { train } else { val }))
}

fn validate_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    validate_thresholds(&cfg.eval.thresholds)?;
    cfg.eval.nms.validate()?;
    Ok(())
}

fn write(path: impl AsRef<Path>, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let (_, train_set, val) = load_data(&cfg)?;
    let outcome = train(&cfg, &train_set, &val, |m| {
        let map = m.eval.as_ref().map_or(String::new(), |r| format!(" average_map={:.4}", r.average_map));
        eprintln!("epoch {:>4} lr={:.3e} loss={:.5}{map}", m.epoch, m.lr, m.train_loss);
    })?;
    write_run(&common.out, &cfg, &outcome)?;
    write(common.out.join("loss.svg"), plot::loss_curve(&outcome.history))?;
    eprintln!("best epoch {} written to {}", outcome.best_epoch, common.out.display());
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    write(out.join("report.json"), report.to_json()?)?;
    write(out.join("per_class_ap.csv"), report.per_class_csv())?;
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    predictions: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    validate_eval(&cfg)?;
    let (labels, records) = eval_records(&cfg, data)?;
    let preds: Vec<VideoSegment> = match (predictions, checkpoint) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        (None, Some(c)) => {
            let model = load_checkpoint(c).with_context(|| format!("loading {}", c.display()))?;
            check_dims(model.config().input_dim, &records)?;
            predict(&model, &records, &cfg.eval)?
        }
        (None, None) => bail!(Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    let gts = ground_truth(&records);
    let report = evaluate(&preds, &gts, &cfg.eval.thresholds)?;
    write_report(&common.out, &report)?;
    write(
        common.out.join("pr.svg"),
        plot::pr_curves(&preds, &gts, cfg.eval.thresholds[0], &labels),
    )?;
    for t in &report.thresholds {
        println!("mAP@{:.2} = {:.4}", t.tiou, t.map);
    }
    println!("average mAP = {:.4}", report.average_map);
    Ok(())
}

fn check_dims(input_dim: usize, records: &[VideoRecord]) -> anyhow::Result<()> {
    if let Some(r) = records.iter().find(|r| r.input_dim() != input_dim) {
        bail!(Error::Config(format!(
            "video {} has feature dim {}, checkpoint expects {input_dim}",
            r.video_id,
            r.input_dim()
        )));
    }
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, data: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    validate_eval(&cfg)?;
    let (_, records) = eval_records(&cfg, data)?;
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_dims(model.config().input_dim, &records)?;
    let preds = predict(&model, &records, &cfg.eval)?;
    std::fs::create_dir_all(&common.out)?;
    write(common.out.join("predictions.json"), predictions_to_json(&preds)?)?;
    eprintln!("{} predictions for {} videos", preds.len(), records.len());
    Ok(())
}

fn cmd_gen_data(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.data.synthetic.validate()?;
    let (labels, train_set, val) = load_data(&RunConfig {
        data: contextdet::data::DataConfig {
            train_dir: None,
            ..cfg.data.clone()
        },
        ..cfg.clone()
    })?;
    save_dataset(common.out.join("train"), &labels, &train_set)?;
    save_dataset(common.out.join("val"), &labels, &val)?;
    eprintln!(
        "wrote {} training and {} validation videos to {}",
        train_set.len(),
        val.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_ablate(common: &Common, grid: &[String]) -> anyhow::Result<()> {
    let base = load_config(common)?;
    // validate every entry before any training
    let mut configs = Vec::with_capacity(grid.len());
    for entry in grid {
        let mut cfg = base.clone();
        let overrides: Vec<&str> = entry.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
        cfg.apply_overrides(&overrides)
            .and_then(|()| cfg.validate())
            .map_err(|e| anyhow::Error::new(e).context(format!("grid entry {entry:?}")))?;
        configs.push(cfg);
    }
    let (_, train_set, val) = load_data(&base)?;
    let mut csv = String::from("entry,best_epoch,average_map");
    for t in &base.eval.thresholds {
        csv.push_str(&format!(",map@{t:.2}"));
    }
    csv.push('\n');
    std::fs::create_dir_all(&common.out)?;
    for (i, (entry, cfg)) in grid.iter().zip(&configs).enumerate() {
        eprintln!("[{}/{}] {entry}", i + 1, grid.len());
        let outcome = train(cfg, &train_set, &val, |_| {})?;
        let report = contextdet::train::evaluate_model(&outcome.best, if val.is_empty() { &train_set } else { &val }, &cfg.eval)?;
        csv.push_str(&format!("\"{}\",{},{:.12}", entry.replace('"', "\"\""), outcome.best_epoch, report.average_map));
        for t in &report.thresholds {
            csv.push_str(&format!(",{:.12}", t.map));
        }
        csv.push('\n');
        write(
            common.out.join(format!("entry_{i}_metrics.csv")),
            metrics_csv(&outcome.history, &cfg.eval.thresholds),
        )?;
    }
    write(common.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, corrupt: Option<&str>) -> anyhow::Result<()> {
    let corrupt = corrupt.map(str::parse::<OpKind>).transpose()?;
    let mut cfg = SuiteConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_suite(&cfg, corrupt)?;
    print!("{}", report.to_text());
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        bail!(CheckFailed(format!("gradient check failed: {}", names.join(", "))));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Eval {
            common,
            checkpoint,
            data,
            predictions,
        } => cmd_eval(common, checkpoint.as_deref(), data.as_deref(), predictions.as_deref()),
        Command::Predict {
            common,
            checkpoint,
            data,
        } => cmd_predict(common, checkpoint, data.as_deref()),
        Command::GenData { common } => cmd_gen_data(common),
        Command::Ablate { common, grid } => cmd_ablate(common, grid),
        Command::Gradcheck { seed, corrupt_op } => cmd_gradcheck(*seed, corrupt_op.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
