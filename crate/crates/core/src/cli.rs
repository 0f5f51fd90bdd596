//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::backbone::{pretrain_backbone, EpochLog};
use crate::checkpoint::Checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::data::{evaluate, generate_synthetic, sample_episode, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::explain::{export_explanation, matching_matrix};
use crate::model::{load_backbone, load_pattern_extractor, Mtunet};
use crate::rng;
use crate::train::{train_matcher, train_pe};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "mtunet", version, about = "Explainable few-shot image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural dataset (images + index.csv).
    GenData(GenDataArgs),
    /// Pretrain the backbone on the base split.
    TrainBackbone(StageArgs),
    /// Train the pattern extractor on a frozen backbone.
    TrainPe(StageArgs),
    /// Train the matcher on a frozen backbone and pattern extractor.
    TrainMatcher(StageArgs),
    /// Few-shot evaluation over sampled episodes.
    Eval(EvalArgs),
    /// Export attention overlays and the matching matrix of one episode.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub n_base: usize,
    #[arg(long, default_value_t = 5)]
    pub n_val: usize,
    #[arg(long, default_value_t = 5)]
    pub n_test: usize,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

/// Flags mirroring config keys. Stage keys apply to the subcommand's
/// stage.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<String>,
    #[arg(long, value_name = "K")]
    pub way: Option<String>,
    #[arg(long, value_name = "N")]
    pub shot: Option<String>,
    #[arg(long, value_name = "M")]
    pub query: Option<String>,
    #[arg(long, value_name = "E")]
    pub episodes: Option<String>,
    #[arg(long, value_name = "E")]
    pub val_episodes: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub lr_step: Option<String>,
    #[arg(long)]
    pub lr_factor: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Pattern count z, or `auto`.
    #[arg(long, value_name = "Z")]
    pub slots: Option<String>,
    /// Use every I-th base category for pattern training.
    #[arg(long, value_name = "I")]
    pub pe_stride: Option<String>,
    /// Comma-separated base categories for pattern training.
    #[arg(long, value_name = "a,b,c")]
    pub pe_cats: Option<String>,
    #[arg(long, value_name = "F")]
    pub lambda: Option<String>,
    #[arg(long)]
    pub e: Option<String>,
    /// bce | softmax_ce
    #[arg(long)]
    pub loss: Option<String>,
    /// zl | l
    #[arg(long)]
    pub area_norm: Option<String>,
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub iterations: Option<String>,
    /// Switch final metrics to single-line JSON.
    #[arg(long)]
    pub json: bool,
}

/// `MTUNET_SEED`, or 0 when unset.
fn env_seed() -> Result<u64> {
    match std::env::var("MTUNET_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::usage(format!("MTUNET_SEED `{s}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl ConfigArgs {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("way", &self.way),
            ("shot", &self.shot),
            ("query", &self.query),
            ("episodes", &self.episodes),
            ("val_episodes", &self.val_episodes),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_step", &self.lr_step),
            ("lr_factor", &self.lr_factor),
            ("batch_size", &self.batch_size),
            ("slots", &self.slots),
            ("pe_stride", &self.pe_stride),
            ("pe_cats", &self.pe_cats),
            ("lambda", &self.lambda),
            ("e", &self.e),
            ("loss", &self.loss),
            ("area_norm", &self.area_norm),
            ("augment", &self.augment),
            ("dim", &self.dim),
            ("iterations", &self.iterations),
        ]
    }

    /// Defaults, then `MTUNET_SEED`, then the config file, then flags.
    pub fn resolve(&self, stage: Stage) -> Result<TrainConfig> {
        let base = TrainConfig {
            seed: env_seed()?,
            ..TrainConfig::default()
        };
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                TrainConfig::from_ini_over(base, &text)?
            }
            None => base,
        };
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(&[stage], key, v)
                    .map_err(|m| Error::usage(format!("--{}: {m}", key.replace('_', "-"))))?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct StageArgs {
    /// Dataset root containing index.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Checkpoint from the previous stage.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Where to write the full report as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Which episode of the seeded sequence to explain.
    #[arg(long, default_value_t = 0)]
    pub episode: u64,
    /// Normalize all heatmaps of an image over one shared range.
    #[arg(long)]
    pub global_norm: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Run record written when a command starts and rewritten when it ends.
struct Manifest {
    path: PathBuf,
    record: Value,
    started: Instant,
}

impl Manifest {
    fn begin(path: PathBuf, command: &str, cfg: Option<&TrainConfig>, inputs: Value, output: &Path) -> Result<Self> {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let record = json!({
            "version": VERSION,
            "command": command,
            "status": "running",
            "seed": cfg.map(|c| c.seed),
            "config": cfg.map(|c| c.resolved()),
            "inputs": inputs,
            "output": output,
            "started_unix": started_unix,
        });
        let m = Manifest {
            path,
            record,
            started: Instant::now(),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.record).expect("manifest serializes");
        fs::write(&self.path, text + "\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self, outcome: &Result<Value>) -> Result<()> {
        let rec = self.record.as_object_mut().expect("manifest is an object");
        rec.insert("wall_time_s".into(), json!(self.started.elapsed().as_secs_f64()));
        match outcome {
            Ok(metrics) => {
                rec.insert("status".into(), json!("complete"));
                rec.insert("metrics".into(), metrics.clone());
            }
            Err(e) => {
                rec.insert("status".into(), json!("failed"));
                rec.insert("error".into(), json!(e.to_string()));
            }
        }
        self.write()
    }
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Progress lines go to stdout, or stderr when stdout carries JSON.
struct Progress {
    json: bool,
}

impl Progress {
    fn line(&self, text: &str) {
        if self.json {
            eprintln!("{text}");
        } else {
            println!("{text}");
            let _ = std::io::stdout().flush();
        }
    }

    fn epoch(&self, stage: &str, log: &EpochLog) {
        self.line(&format!(
            "{stage} epoch {:>3}  lr {:.1e}  loss {:.4}  train_acc {:.4}  val_acc {:.4}",
            log.epoch + 1,
            log.lr,
            log.train_loss,
            log.train_accuracy,
            log.val_accuracy
        ));
    }

    fn result(&self, human: &str, metrics: &Value) {
        if self.json {
            println!("{metrics}");
        } else {
            println!("{human}");
        }
    }
}

fn epoch_json(logs: &[EpochLog]) -> Value {
    Value::Array(
        logs.iter()
            .map(|l| {
                json!({
                    "epoch": l.epoch + 1,
                    "lr": l.lr,
                    "train_loss": l.train_loss,
                    "train_accuracy": l.train_accuracy,
                    "val_accuracy": l.val_accuracy,
                })
            })
            .collect(),
    )
}

fn load_input_checkpoint(path: Option<&PathBuf>, stage: &str) -> Result<Checkpoint> {
    let path = path.ok_or_else(|| Error::usage(format!("{stage} needs --checkpoint from the previous stage")))?;
    Checkpoint::load(path)
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = args.cfg.resolve(stage)?;
    let command = match stage {
        Stage::Backbone => "train-backbone",
        Stage::Pe => "train-pe",
        _ => "train-matcher",
    };
    ensure_parent(&args.out)?;
    let inputs = json!({ "data": args.data, "checkpoint": args.checkpoint, "config": args.cfg.config });
    let manifest = Manifest::begin(manifest_beside(&args.out), command, Some(&cfg), inputs, &args.out)?;
    let progress = Progress { json: args.cfg.json };
    let outcome = (|| -> Result<Value> {
        let ds = Dataset::load(&args.data)?;
        let mut logs = Vec::new();
        let mut on_epoch = |l: &EpochLog| {
            progress.epoch(stage.section(), l);
            logs.push(l.clone());
        };
        let ckpt = match stage {
            Stage::Backbone => {
                let b = pretrain_backbone(&ds, &cfg, &mut on_epoch)?;
                Checkpoint::from_stores([&b.params])
            }
            Stage::Pe => {
                let prev = load_input_checkpoint(args.checkpoint.as_ref(), command)?;
                let backbone = load_backbone(&prev)?;
                let pe = train_pe(&ds, &backbone, &cfg, &mut on_epoch)?;
                Checkpoint::from_stores([&backbone.params, &pe.params])
            }
            _ => {
                let prev = load_input_checkpoint(args.checkpoint.as_ref(), command)?;
                let backbone = load_backbone(&prev)?;
                let pe = load_pattern_extractor(&prev, cfg.iterations)?;
                let matcher = train_matcher(&ds, &backbone, &pe, &cfg, &mut on_epoch)?;
                Checkpoint::from_stores([&backbone.params, &pe.params, &matcher.params])
            }
        };
        ckpt.save(&args.out)?;
        let best = logs.iter().map(|l| l.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        let metrics = json!({ "stage": stage.section(), "best_val_accuracy": best, "epochs": epoch_json(&logs) });
        progress.result(
            &format!("{} done: best val accuracy {:.4}, checkpoint {}", stage.section(), best, args.out.display()),
            &json!({ "stage": stage.section(), "best_val_accuracy": best, "checkpoint": args.out }),
        );
        Ok(metrics)
    })();
    manifest.finish(&outcome)?;
    outcome.map(|_| ())
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?,
    };
    let cfg = SynthConfig {
        n_base: args.n_base,
        n_val: args.n_val,
        n_test: args.n_test,
        per_class: args.per_class,
        size: args.size,
        seed,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let inputs = json!({
        "seed": seed,
        "n_base": cfg.n_base,
        "n_val": cfg.n_val,
        "n_test": cfg.n_test,
        "per_class": cfg.per_class,
        "size": cfg.size,
    });
    let manifest = Manifest::begin(args.out.join("manifest.json"), "gen-data", None, inputs, &args.out)?;
    let outcome = generate_synthetic(&args.out, &cfg).map(|ds| {
        println!("wrote {} images in {} categories to {}", ds.len(), ds.all_categories().len(), args.out.display());
        json!({ "images": ds.len(), "categories": ds.all_categories().len() })
    });
    manifest.finish(&outcome)?;
    outcome.map(|_| ())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.cfg.resolve(Stage::Eval)?;
    let manifest = match &args.out {
        Some(out) => {
            ensure_parent(out)?;
            let inputs = json!({ "data": args.data, "checkpoint": args.checkpoint, "split": args.split.as_str() });
            Some(Manifest::begin(manifest_beside(out), "eval", Some(&cfg), inputs, out)?)
        }
        None => None,
    };
    let progress = Progress { json: args.cfg.json };
    let outcome = (|| -> Result<Value> {
        let ds = Dataset::load(&args.data)?;
        let model = Mtunet::from_checkpoint(&Checkpoint::load(&args.checkpoint)?, cfg.iterations)?;
        let spec = cfg.episode_spec();
        // reject infeasible settings before computing representations
        sample_episode(&ds, args.split, spec, &mut rng::indexed(cfg.seed, 0))?;
        let clf = model.classifier(&ds, &ds.images(args.split))?;
        let report = evaluate(&clf, &ds, args.split, spec, cfg.eval.episodes, cfg.seed, args.jobs)?;
        let summary = json!({
            "mean": report.mean,
            "ci95": report.ci95,
            "episodes": report.episodes,
            "way": spec.way,
            "shot": spec.shot,
            "query": spec.query,
            "split": args.split.as_str(),
        });
        if let Some(out) = &args.out {
            let text = serde_json::to_string(&report).expect("report serializes");
            fs::write(out, text + "\n").map_err(|e| Error::io(out, e))?;
        }
        progress.line(&format!(
            "{}-way {}-shot, {} queries per category, {} episodes on the {} split",
            spec.way, spec.shot, spec.query, report.episodes, args.split
        ));
        progress.result(&report.summary(), &summary);
        Ok(summary)
    })();
    if let Some(m) = manifest {
        m.finish(&outcome)?;
    }
    outcome.map(|_| ())
}

fn run_explain(args: &ExplainArgs) -> Result<()> {
    let cfg = args.cfg.resolve(Stage::Eval)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let inputs = json!({
        "data": args.data,
        "checkpoint": args.checkpoint,
        "split": args.split.as_str(),
        "episode": args.episode,
        "global_norm": args.global_norm,
    });
    let manifest = Manifest::begin(args.out.join("manifest.json"), "explain", Some(&cfg), inputs, &args.out)?;
    let progress = Progress { json: args.cfg.json };
    let outcome = (|| -> Result<Value> {
        let ds = Dataset::load(&args.data)?;
        let model = Mtunet::from_checkpoint(&Checkpoint::load(&args.checkpoint)?, cfg.iterations)?;
        let ep = sample_episode(&ds, args.split, cfg.episode_spec(), &mut rng::indexed(cfg.seed, args.episode))?;
        let files = export_explanation(&model, &ds, &ep, &args.out, args.global_norm)?;
        let matrix = matching_matrix(&model, &ds, &ep)?;
        let mut text = String::from("matching scores (%), rows = support, columns = query\n");
        for (name, row) in matrix.names.iter().zip(&matrix.scores) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:6.2}")).collect();
            text.push_str(&format!("{name:>24} {}\n", cells.join(" ")));
        }
        text.push_str(&format!("wrote {} files to {}", files.len(), args.out.display()));
        let metrics = json!({ "files": files.len(), "categories": matrix.names, "matrix": matrix.scores });
        progress.result(&text, &metrics);
        Ok(metrics)
    })();
    manifest.finish(&outcome)?;
    outcome.map(|_| ())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => run_gen_data(a),
        Command::TrainBackbone(a) => run_stage(Stage::Backbone, a),
        Command::TrainPe(a) => run_stage(Stage::Pe, a),
        Command::TrainMatcher(a) => run_stage(Stage::Matcher, a),
        Command::Eval(a) => run_eval(a),
        Command::Explain(a) => run_explain(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
