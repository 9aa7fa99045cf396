use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csunet::config::RunConfig;
use csunet::gradsuite::{self, Tier};
use csunet::network::{param_breakdown, CsUnet, ModelConfig, ABLATION_METHODS};
use csunet::params::ParamStore;
use csunet::training::io::{read_image, read_mask, read_tensor, write_mask, Raster};
use csunet::training::{
    self, aggregate, case_metrics, evaluate_cases, predict, Checkpoint, EvalReport, SegSample, TrainState,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
};
use csunet::Error;

const THREADS_ENV: &str = "CSUNET_THREADS";
const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Parser)]
#[command(name = "csunet", version, about = "Train, evaluate and inspect CS-Unet segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; missing keys take the preset's values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<String>) -> Result<RunConfig, Error> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        match &self.config {
            Some(path) => RunConfig::load(path, &all),
            None => RunConfig::from_overrides(&all),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, a metrics log and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (overrides `output`).
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Continue from `last.ckpt` in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or a directory of predicted masks) on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "masks", conflicts_with = "masks")]
        checkpoint: Option<PathBuf>,
        /// Evaluate `<id>.pgm` label masks from this directory instead of a model.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Which samples to score.
        #[arg(long, default_value = "val", value_parser = ["train", "val", "all"])]
        split: String,
        /// Hausdorff percentile.
        #[arg(long, default_value_t = 95.0)]
        percentile: f64,
        /// Line-delimited JSON records (per case, then the summary).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image and write the label mask plus a legend sidecar.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM/PPM raster or a raw tensor file (`.cstn`, `[C, H, W]` f32).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write an ASCII (P2) mask instead of binary (P5).
        #[arg(long)]
        ascii: bool,
    },
    /// Parameter counts per module and in total.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from a preset instead of the tiny defaults.
        #[arg(long)]
        preset: Option<String>,
        /// Apply one of the ablation variants 0..=6.
        #[arg(long)]
        method: Option<usize>,
    },
    /// Finite-difference gradient checks: an op name, `full`, `all` or `list`.
    Gradcheck {
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the ablation variants: parameter counts and optionally trained Dice.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated method ids.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
        ids: Vec<usize>,
        /// Also train the run config's model for each variant.
        #[arg(long)]
        train: bool,
    },
    /// Print the fully resolved configuration as TOML.
    DumpConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        preset: Option<String>,
    },
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={raw} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train { cfg, lr, epochs, seed, output, resume } => {
            let mut extra = Vec::new();
            if let Some(v) = lr {
                extra.push(format!("train.lr={v:?}"));
            }
            if let Some(v) = epochs {
                extra.push(format!("train.epochs={v}"));
            }
            if let Some(v) = seed {
                extra.push(format!("train.seed={v}"));
            }
            if let Some(v) = output {
                extra.push(format!("output={}", toml_string(&v)));
            }
            cmd_train(&cfg.resolve(extra)?, resume)
        }
        Command::Eval { cfg, checkpoint, masks, split, percentile, out } => {
            cmd_eval(&cfg, checkpoint.as_deref(), masks.as_deref(), &split, percentile, out.as_deref())
        }
        Command::Predict { checkpoint, image, out, ascii } => cmd_predict(&checkpoint, &image, &out, ascii),
        Command::Params { cfg, preset, method } => cmd_params(&cfg, preset.as_deref(), method),
        Command::Gradcheck { scope, seed } => cmd_gradcheck(&scope, seed),
        Command::Ablate { cfg, ids, train } => cmd_ablate(&cfg.resolve(Vec::new())?, &ids, train),
        Command::DumpConfig { cfg, preset } => {
            print!("{}", with_preset(&cfg, preset.as_deref())?.to_toml());
            Ok(())
        }
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// Resolves a config whose unspecified keys come from `preset`.
fn with_preset(cfg: &ConfigArgs, preset: Option<&str>) -> Result<RunConfig, Error> {
    let base = RunConfig::preset(preset.unwrap_or("tiny"))?;
    match &cfg.config {
        Some(path) => RunConfig::load_over(&base, path, &cfg.overrides),
        None => RunConfig::layered(&base, None, &cfg.overrides),
    }
}

fn print_epoch(r: &training::EpochRecord) {
    println!(
        "epoch {:>3}  lr {:.3e}  loss {:.4}  val dsc {:.4}  val hd {:.2}",
        r.epoch + 1,
        r.lr,
        r.train_loss,
        r.val_mean_dsc,
        r.val_mean_hd
    );
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> CmdResult {
    let dir = &cfg.output;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::Io { path: snapshot, source: e })?;
    let (model, params) = CsUnet::new::<f32>(&cfg.model, cfg.train.seed)?;
    let mut state = if resume {
        TrainState::resume(&model, Checkpoint::load(&dir.join(LAST_CHECKPOINT))?)?
    } else {
        let log = dir.join(METRICS_LOG);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::Io { path: log, source: e })?;
        }
        TrainState::fresh(params)
    };
    let (train_set, val_set) = cfg.data.load()?;
    println!(
        "training {} samples, validating {}, {} parameters, run dir {}",
        train_set.len(),
        val_set.len(),
        state.params.num_scalars(),
        dir.display()
    );
    training::train(&model, &mut state, &cfg.train, &train_set, &val_set, dir, print_epoch)?;
    println!(
        "done: best val dsc {:.4}; wrote {}, {}, {}",
        state.best_score.unwrap_or(0.0),
        BEST_CHECKPOINT,
        LAST_CHECKPOINT,
        METRICS_LOG
    );
    Ok(())
}

fn pick_split(cfg: &RunConfig, split: &str) -> Result<Vec<SegSample>, Error> {
    let (train, val) = cfg.data.load()?;
    Ok(match split {
        "train" => train,
        "val" => val,
        _ => train.into_iter().chain(val).collect(),
    })
}

fn report_table(report: &EvalReport, hd_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>9}", "class", "dsc", hd_label);
    for (k, (d, h)) in report.dsc.iter().zip(&report.hd).enumerate() {
        let _ = writeln!(s, "{:<8} {:>8.4} {:>9.3}", k + 1, d, h);
    }
    let _ = writeln!(s, "{:<8} {:>8.4} {:>9.3}", "mean", report.mean_dsc, report.mean_hd);
    s
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    masks: Option<&Path>,
    split: &str,
    percentile: f64,
    out: Option<&Path>,
) -> CmdResult {
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    // default to the run's own config snapshot when it sits next to the checkpoint
    let snapshot = checkpoint
        .and_then(|c| c.parent())
        .map(|d| d.join(CONFIG_SNAPSHOT))
        .filter(|p| p.exists() && args.config.is_none());
    let mut cfg = match snapshot {
        Some(path) => RunConfig::load(&path, &args.overrides)?,
        None => args.resolve(Vec::new())?,
    };
    if let Some(ck) = &ck {
        cfg.model = ck.model.clone();
    }
    let samples = pick_split(&cfg, split)?;
    let rows = match (&ck, masks) {
        (Some(ck), _) => {
            let (model, reference) = CsUnet::new::<f32>(&ck.model, 0)?;
            ck.check_compatible(&reference)?;
            evaluate_cases(&model, &ck.params, &samples, percentile)?
        }
        (None, Some(dir)) => {
            let k = cfg.model.num_classes;
            let mut rows = Vec::with_capacity(samples.len());
            for s in &samples {
                let path = dir.join(format!("{}.pgm", s.id));
                let (h, w, labels) = read_mask(&path)?;
                if (h, w) != (s.height, s.width) {
                    return Err(Error::Format(format!(
                        "{}: {h}x{w} mask for a {}x{} image",
                        path.display(),
                        s.height,
                        s.width
                    ))
                    .into());
                }
                rows.push(case_metrics(&labels, &s.mask, s.height, s.width, k, percentile));
            }
            rows
        }
        (None, None) => unreachable!("clap requires a checkpoint or masks"),
    };
    let report = aggregate(&rows);
    let hd_label = format!("hd{}", percentile);
    print!("{}", report_table(&report, &hd_label));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| match checkpoint {
        Some(c) => c.with_extension("eval.jsonl"),
        None => PathBuf::from("eval.jsonl"),
    });
    let mut text = String::new();
    for (s, (dsc, hd)) in samples.iter().zip(&rows) {
        let line = serde_json::json!({ "id": s.id, "dsc": dsc, "hd": hd });
        let _ = writeln!(text, "{line}");
    }
    let summary = serde_json::json!({
        "summary": true,
        "split": split,
        "cases": report.cases,
        "percentile": percentile,
        "dsc": report.dsc,
        "mean_dsc": report.mean_dsc,
        "hd": report.hd,
        "mean_hd": report.mean_hd,
    });
    let _ = writeln!(text, "{summary}");
    std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    println!("records written to {}", out.display());
    Ok(())
}

fn load_raster(path: &Path) -> Result<Raster, Error> {
    if path.extension().is_some_and(|e| e == "cstn") {
        let t = read_tensor::<f32>(path)?;
        let &[channels, height, width] = t.shape() else {
            return Err(Error::Shape(format!(
                "{}: expected a [C, H, W] tensor, got {:?}",
                path.display(),
                t.shape()
            )));
        };
        return Ok(Raster { channels, height, width, data: t.into_data() });
    }
    read_image(path)
}

fn legend_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".legend.txt");
    out.with_file_name(name)
}

fn class_name(k: usize) -> String {
    if k == 0 {
        "background".into()
    } else {
        format!("class_{k}")
    }
}

fn cmd_predict(checkpoint: &Path, image: &Path, out: &Path, ascii: bool) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let model = CsUnet::new::<f32>(&ck.model, 0)?.0;
    ck.check_compatible(&CsUnet::new::<f32>(&ck.model, 0)?.1)?;
    let r = load_raster(image)?;
    let sample = SegSample {
        id: image.display().to_string(),
        channels: r.channels,
        height: r.height,
        width: r.width,
        mask: vec![0; r.height * r.width],
        image: r.data,
    };
    let labels = predict(&model, &ck.params, &sample)?;
    write_mask(out, r.height, r.width, &labels, ascii)?;
    let legend = legend_path(out);
    let text: String = (0..ck.model.num_classes)
        .map(|k| format!("{k}\t{}\n", class_name(k)))
        .collect();
    std::fs::write(&legend, text).map_err(|e| Error::Io { path: legend.clone(), source: e })?;
    println!("wrote {} and {}", out.display(), legend.display());
    Ok(())
}

/// Counts grouped two levels deep: components, then their direct children.
fn breakdown_lines(store: &ParamStore<f32>) -> Vec<(String, usize, Vec<(String, usize)>)> {
    param_breakdown(store)
        .into_iter()
        .map(|(group, total)| {
            let mut children: Vec<(String, usize)> = Vec::new();
            for (name, t) in store.iter() {
                let Some(rest) = name.strip_prefix(&group).and_then(|r| r.strip_prefix('.')) else {
                    continue;
                };
                let child = rest.split('.').next().unwrap_or(rest).to_string();
                match children.last_mut() {
                    Some((c, n)) if *c == child => *n += t.numel(),
                    _ => children.push((child, t.numel())),
                }
            }
            (group, total, children)
        })
        .collect()
}

fn cmd_params(args: &ConfigArgs, preset: Option<&str>, method: Option<usize>) -> CmdResult {
    let mut model = with_preset(args, preset)?.model;
    if let Some(m) = method {
        model = model.with_ablation(m)?;
    }
    let (_, store) = CsUnet::new::<f32>(&model, 0)?;
    match model.ablation_method() {
        Some(m) => println!("ablation method {m}"),
        None => println!("custom variant"),
    }
    for (group, total, children) in breakdown_lines(&store) {
        println!("{group:<14} {total:>12}");
        if children.len() > 1 {
            for (child, n) in children {
                println!("  {child:<12} {n:>12}");
            }
        }
    }
    let total = store.num_scalars();
    println!("{:<14} {total:>12}", "total");
    println!("total: {:.2}M", total as f64 / 1e6);
    Ok(())
}

fn cmd_gradcheck(scope: &str, seed: u64) -> CmdResult {
    if scope == "list" {
        for c in gradsuite::registry() {
            println!("{:<18} {:?}", c.name, c.tier);
        }
        println!("{:<18} {:?}", "full", Tier::Model);
        return Ok(());
    }
    let checks: Vec<(&str, Tier)> = match scope {
        "all" => gradsuite::registry()
            .iter()
            .map(|c| (c.name, c.tier))
            .chain([("full", Tier::Model)])
            .collect(),
        "full" => vec![("full", Tier::Model)],
        name => match gradsuite::find(name) {
            Some(c) => vec![(c.name, c.tier)],
            None => {
                return Err(Error::Usage(format!(
                    "unknown gradcheck scope `{name}`; run `csunet gradcheck list`"
                ))
                .into())
            }
        },
    };
    let mut failed = Vec::new();
    println!("{:<18} {:>7} {:>12} {:>9}  result", "check", "points", "max rel err", "tol");
    for (name, tier) in checks {
        let report = if name == "full" {
            gradsuite::full_model(seed)?
        } else {
            gradsuite::find(name).expect("registered").run(seed)?
        };
        let tol = tier.tolerance();
        let ok = report.passes(tol);
        println!(
            "{:<18} {:>7} {:>12.3e} {:>9.0e}  {}",
            name,
            report.checked,
            report.max_rel_err,
            tol,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

fn cmd_ablate(cfg: &RunConfig, ids: &[usize], train: bool) -> CmdResult {
    if let Some(bad) = ids.iter().find(|i| !ABLATION_METHODS.contains(i)) {
        return Err(Error::Usage(format!("ablation id {bad} is outside 0..=6")).into());
    }
    let data = if train { Some(cfg.data.load()?) } else { None };
    let mut header = format!(
        "{:<6} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>9}",
        "method", "cemb", "cproj", "bias", "refine", "dsf", "sc", "#param"
    );
    if train {
        let _ = write!(header, " {:>9} {:>8} {:>8}", "#param*", "dsc", "hd");
    }
    println!("{header}");
    for &id in ids {
        let full = ModelConfig::default().with_ablation(id)?;
        let (_, store) = CsUnet::new::<f32>(&full, 0)?;
        let mut line = format!(
            "{:<6} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>8.2}M",
            id,
            flag(full.conv_embedding),
            flag(full.conv_projection),
            flag(full.use_bias_table),
            flag(full.conv_attention_refine),
            flag(full.use_dsf),
            flag(full.use_sc),
            store.num_scalars() as f64 / 1e6
        );
        if let Some((train_set, val_set)) = &data {
            let model_cfg = cfg.model.clone().with_ablation(id)?;
            let (model, params) = CsUnet::new::<f32>(&model_cfg, cfg.train.seed)?;
            let n = params.num_scalars();
            let mut state = TrainState::fresh(params);
            let dir = cfg.output.join(format!("ablate-{id}"));
            let records = training::train(&model, &mut state, &cfg.train, train_set, val_set, &dir, |_| {})?;
            let last = records.last().expect("at least one epoch");
            let _ = write!(line, " {:>8.3}M {:>8.4} {:>8.2}", n as f64 / 1e6, last.val_mean_dsc, last.val_mean_hd);
        }
        println!("{line}");
    }
    println!("#param: full-size model (224x224, C=96, M=7).");
    if train {
        println!("#param*, dsc, hd: run-config model after the final epoch on the validation split.");
    }
    Ok(())
}
