//! Command implementations behind the `stageprompt` binary.

pub mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use image::GrayImage;
use ndarray::Array2;

use stageprompt_core::backbone::toy_mae_pretrain;
use stageprompt_core::config::CONFIG_ECHO_FILE;
use stageprompt_core::data::{gen_synthetic, write_dataset, write_manifest};
use stageprompt_core::experiment::run_ablation;
use stageprompt_core::metrics::evaluate_as;
use stageprompt_core::training::{
    load_checkpoint, predict_dataset, save_checkpoint, train, CheckpointMeta, CHECKPOINT_FILE,
    HISTORY_FILE,
};
use stageprompt_core::{AdapterMode, Regime, RunConfig, Task, TrainHistory};

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const LOSS_CURVE: &str = "loss_curve.svg";
pub const LR_CURVE: &str = "lr_curve.svg";
pub const CONTACT_SHEET: &str = "contact_sheet.png";
const SHEET_ROWS: usize = 4;

/// Bad command-line input; maps to exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

/// 1 for validation errors, 2 for failures while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || e.downcast_ref::<stageprompt_core::Error>()
                .is_some_and(|e| e.is_validation())
    });
    if validation {
        1
    } else {
        2
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stageprompt",
    version,
    about = "Prompted adapters for a frozen hierarchical encoder"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Byte-reproducible outputs (no wall-clock fields).
    #[arg(long, global = true)]
    pub strict: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset directory with `images/` and `masks/`; synthetic data when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Square input resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Number of synthetic samples.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(DataArgs),
    /// Masked-reconstruction pretraining of the encoder.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a segmenter and write checkpoint, history and config echo.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        adapter_mode: Option<AdapterMode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Checkpoint providing pretrained encoder weights.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Write one 8-bit probability PNG per sample.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a directory of probability maps.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Decoder-only vs shared adapter vs per-stage adapters.
    Ablate {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Loss and lr curves plus a contact sheet for each run directory.
    Report { runs: Vec<PathBuf> },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn apply_data(cfg: &mut RunConfig, args: &DataArgs) {
    if let Some(d) = &args.data {
        cfg.data.root = Some(d.clone());
    }
    if let Some(t) = args.task {
        cfg.data.task = Some(t);
    }
    if let Some(r) = args.resolution {
        cfg.data.resolution = Some((r, r));
    }
    if let Some(c) = args.count {
        cfg.data.synth.count = c;
    }
    if let Some(d) = args.difficulty {
        cfg.data.synth.difficulty = d;
    }
}

/// Config file, then global flags, then command flags.
pub fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.strict {
        cfg.strict = true;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    match &cli.command {
        Command::Synth(d) => {
            apply_data(&mut cfg, d);
            cfg.data.root = None;
            cfg.data.images = None;
            cfg.data.masks = None;
        }
        Command::Pretrain { data, steps } => {
            apply_data(&mut cfg, data);
            if let Some(s) = steps {
                cfg.pretrain.steps = *s;
            }
            if let Some(s) = cli.seed {
                cfg.pretrain.seed = s;
            }
        }
        Command::Train {
            data,
            regime,
            adapter_mode,
            epochs,
            lr,
            batch,
            encoder,
        } => {
            apply_data(&mut cfg, data);
            if let Some(r) = regime {
                cfg.train.regime = *r;
            }
            if let Some(m) = adapter_mode {
                cfg.adapter.mode = *m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = Some(*e);
            }
            if let Some(l) = lr {
                cfg.train.lr0 = *l;
            }
            if let Some(b) = batch {
                cfg.train.batch = *b;
            }
            if let Some(e) = encoder {
                cfg.backbone.encoder = Some(e.clone());
            }
        }
        Command::Predict { data, checkpoint } => {
            apply_data(&mut cfg, data);
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::Eval { data, predictions } => {
            apply_data(&mut cfg, data);
            if let Some(p) = predictions {
                cfg.predictions = Some(p.clone());
            }
        }
        Command::Ablate { epochs, seeds } => {
            if let Some(e) = epochs {
                cfg.ablation.epochs = *e;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s.clone();
            }
        }
        Command::Report { .. } => {}
    }
    if cfg.out.is_none() {
        cfg.out = Some(Path::new("runs").join(cli.command.name()));
    }
    Ok(cfg)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("cannot read {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            ));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    let out = cfg.out.clone().expect("out is always set");
    if !matches!(cli.command, Command::Predict { .. }) {
        let cfg = cfg.resolved();
        return match &cli.command {
            Command::Synth(_) => cmd_synth(&cfg, &out, cli.force),
            Command::Pretrain { .. } => cmd_pretrain(&cfg, &out, cli.force),
            Command::Train { .. } => cmd_train(&cfg, &out, cli.force),
            Command::Eval { .. } => cmd_eval(&cfg, &out, cli.force),
            Command::Ablate { .. } => cmd_ablate(&cfg, &out, cli.force),
            Command::Report { runs } => cmd_report(&cfg, runs, &out, cli.force),
            Command::Predict { .. } => unreachable!(),
        };
    }
    cmd_predict(&cfg, &out, cli.force)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let spec = cfg.synthetic_spec();
    spec.validate()?;
    prepare_out(out, force)?;
    let ds = gen_synthetic(&spec)?;
    write_dataset(&ds, out)?;
    write_manifest(&spec, out)?;
    cfg.write_echo(out)?;
    println!(
        "wrote {} {} samples to {}",
        ds.len(),
        spec.task,
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    prepare_out(out, force)?;
    let backbone = cfg.backbone_config();
    let outcome = toy_mae_pretrain(&backbone, &ds, &cfg.pretrain)?;
    let mut holder = cfg.clone();
    holder.train.regime = Regime::DecoderOnly;
    holder.backbone.encoder = None;
    let mut model = holder.build_model()?;
    model.backbone.encoder = outcome.encoder;
    let mut meta = CheckpointMeta::for_model(&model);
    meta.seed = cfg.pretrain.seed;
    meta.task = Some(cfg.task());
    save_checkpoint(&out.join(ENCODER_FILE), &model, &meta)?;
    let mut log = String::new();
    for (step, loss) in outcome.losses.iter().enumerate() {
        log.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
        log.push('\n');
    }
    fs::write(out.join(PRETRAIN_LOG_FILE), log)?;
    cfg.write_echo(out)?;
    println!(
        "reconstruction loss {:.5} -> {:.5} ({} steps); encoder written to {}",
        outcome.initial_loss,
        outcome.final_loss,
        cfg.pretrain.steps,
        out.join(ENCODER_FILE).display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let ds = cfg.dataset()?;
    let model = cfg.build_model()?;
    prepare_out(out, force)?;
    eprintln!(
        "training {} on {} {} samples for {} epochs",
        train_cfg.regime,
        ds.len(),
        train_cfg.task,
        train_cfg.epochs
    );
    let mut outcome = train(&train_cfg, model, &ds)?;
    outcome.write(out, &train_cfg)?;
    cfg.write_echo(out)?;
    for r in &outcome.history.records {
        println!(
            "epoch {:>4}  lr {:.3e}  loss {:.5}",
            r.epoch, r.lr, r.mean_loss
        );
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    match &cfg.checkpoint {
        Some(p) => Ok(p),
        None => usage("predict needs --checkpoint (or `checkpoint` in the config)"),
    }
}

pub fn cmd_predict(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let path = checkpoint_path(cfg)?;
    let (model, meta) =
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = cfg.clone();
    if cfg.data.resolution.is_none() {
        cfg.data.resolution = Some(meta.backbone.resolution);
    }
    let cfg = cfg.resolved();
    if cfg.resolution() != meta.backbone.resolution {
        return usage(format!(
            "data resolution {:?} does not match the checkpoint's {:?}",
            cfg.resolution(),
            meta.backbone.resolution
        ));
    }
    let ds = cfg.dataset()?;
    prepare_out(out, force)?;
    let preds = predict_dataset(&model, &ds)?;
    for (id, p) in &preds {
        let (h, w) = p.dim();
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([quantize(p[[y as usize, x as usize]])])
        });
        let file = out.join(format!("{id}.png"));
        img.save(&file)
            .with_context(|| format!("writing {}", file.display()))?;
    }
    cfg.write_echo(out)?;
    println!("wrote {} prediction maps to {}", preds.len(), out.display());
    Ok(())
}

/// `round(255·p)`.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads every PNG in `dir` as a `[0, 1]` map keyed by file stem.
pub fn read_prediction_maps(dir: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot read predictions in {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let img = image::open(&path)
            .with_context(|| format!("cannot decode {}", path.display()))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let map = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
        });
        out.insert(stem.to_string(), map);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let Some(pred_dir) = &cfg.predictions else {
        return usage("eval needs --predictions (or `predictions` in the config)");
    };
    let ds = cfg.dataset()?;
    let preds = read_prediction_maps(pred_dir)?;
    let mut report = evaluate_as(&preds, &ds, cfg.task())?;
    report.dataset_id = match &cfg.data.root {
        Some(r) => r.display().to_string(),
        None => format!("synthetic-{}", cfg.synthetic_spec().seed),
    };
    report.model_id = Some(pred_dir.display().to_string());
    prepare_out(out, force)?;
    fs::write(out.join(REPORT_JSON), report.to_json()?)?;
    fs::write(out.join(REPORT_CSV), report.to_csv())?;
    cfg.write_echo(out)?;
    println!("{}", report.table());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.ablation.validate()?;
    prepare_out(out, force)?;
    let report = run_ablation(&cfg.ablation)?;
    fs::write(out.join("ablation.md"), report.to_markdown())?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    cfg.write_echo(out)?;
    println!("{}", report.to_markdown());
    Ok(())
}

/// Output subdirectory name per run, made unique by suffixing the position.
fn report_names(runs: &[PathBuf]) -> Vec<String> {
    let base: Vec<String> = runs
        .iter()
        .map(|r| {
            r.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_string()
        })
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, b)| {
            if base.iter().filter(|x| *x == b).count() > 1 {
                format!("{b}-{i}")
            } else {
                b.clone()
            }
        })
        .collect()
}

pub fn cmd_report(cfg: &RunConfig, runs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    if runs.is_empty() {
        return usage("report needs at least one run directory");
    }
    for run in runs {
        for file in [HISTORY_FILE, CONFIG_ECHO_FILE, CHECKPOINT_FILE] {
            if !run.join(file).is_file() {
                return usage(format!("{} has no {file}", run.display()));
            }
        }
    }
    prepare_out(out, force)?;
    for (run, name) in runs.iter().zip(report_names(runs)) {
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        let history = TrainHistory::read(&run.join(HISTORY_FILE))?;
        let epochs: Vec<f64> = history.records.iter().map(|r| r.epoch as f64).collect();
        let losses: Vec<f64> = history.records.iter().map(|r| r.mean_loss).collect();
        let lrs: Vec<f64> = history.records.iter().map(|r| r.lr).collect();
        fs::write(
            dir.join(LOSS_CURVE),
            plot::line_chart_svg(&format!("{name}: training loss"), "epoch", &epochs, &losses),
        )?;
        fs::write(
            dir.join(LR_CURVE),
            plot::line_chart_svg(&format!("{name}: learning rate"), "epoch", &epochs, &lrs),
        )?;

        let echo = RunConfig::load(&run.join(CONFIG_ECHO_FILE))?;
        let (model, _) = load_checkpoint(&run.join(CHECKPOINT_FILE))?;
        let ds = echo.dataset()?;
        let samples = &ds.samples()[..ds.len().min(SHEET_ROWS)];
        let preds: Vec<Array2<f64>> = samples
            .iter()
            .map(|s| {
                Ok(model
                    .predict_logits(&s.image)?
                    .mapv(|v| 1.0 / (1.0 + (-v).exp())))
            })
            .collect::<stageprompt_core::Result<_>>()?;
        let rows: Vec<_> = samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (&s.image, &s.mask, p))
            .collect();
        let sheet = plot::contact_sheet(&rows);
        let file = dir.join(CONTACT_SHEET);
        sheet
            .save(&file)
            .with_context(|| format!("writing {}", file.display()))?;
        println!(
            "{}: {} epochs -> {}",
            run.display(),
            history.records.len(),
            dir.display()
        );
    }
    cfg.write_echo(out)?;
    Ok(())
}
