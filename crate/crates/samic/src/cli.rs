//! The `samic` command line. Every subcommand is a thin shell over library
//! calls and writes its outputs plus `run_manifest.json` into `--out`.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use samic_core::backbone::Backbone;
use samic_core::net::CorrelationNet;
use samic_core::{encode_prompts, extract_peaks, PointPrompt};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::annotation::AnnotationService;
use crate::checkpoint::load_checkpoint;
use crate::config::{hex, RunConfig};
use crate::dataset::{load_split_manifest, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_kshot, predict_image, HeatmapPredictor, NetPredictor, NoisePredictor, OraclePredictor};
use crate::gateway::{BackendRegistry, Gateway};
use crate::io::{heatmap_png, heatmap_raw, load_heatmap, load_rgb, mask_png, write_atomic};
use crate::prompts::PromptRecord;
use crate::report::{render_table, Metric, ReportEntry};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{train, FeatureBank, TRAIN_LOG};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "samic", version, about = "In-context point prompts for a promptable segmenter")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory every output is written to.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Sets `train.deterministic`.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Renders point prompts as a heatmap.
    Encode {
        /// `x,y` in pixels; repeat for more points.
        #[arg(long = "points", value_name = "X,Y", required = true, value_parser = parse_point)]
        points: Vec<PointPrompt>,
        #[arg(long, value_name = "HxW", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Extracts point prompts from a heatmap.
    Peaks {
        #[arg(long = "in", value_name = "HEATMAP")]
        input: PathBuf,
        /// Sets `heatmap.tau`.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Trains the correlation network on a dataset's train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Sets `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Benchmark whose split class counts the dataset must match.
        #[arg(long)]
        benchmark: Option<String>,
    },
    /// Predicts prompts and a mask for a target from K annotated contexts.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context image; repeat for K shots.
        #[arg(long = "context", required = true)]
        contexts: Vec<PathBuf>,
        /// Prompt record of each context, in the same order.
        #[arg(long = "context-prompts", required = true)]
        context_prompts: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
    },
    /// Runs K-shot evaluation on a dataset split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictorKind::Net)]
        predictor: PredictorKind,
        /// Required for the `net` predictor.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset column name in the report; defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        benchmark: Option<String>,
    },
    /// Runs the annotation service; sessions live under `--out`.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Renders report JSON files as one table, or exports an annotation
    /// session as a dataset.
    Export {
        #[arg(long = "report", conflicts_with = "session")]
        reports: Vec<PathBuf>,
        /// Annotation service root holding the session.
        #[arg(long, requires = "session")]
        annotations: Option<PathBuf>,
        #[arg(long, requires = "annotations")]
        session: Option<String>,
    },
    /// Writes a synthetic flat-region shape dataset.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        test_classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Net,
    Oracle,
    Noise,
}

fn parse_point(s: &str) -> std::result::Result<PointPrompt, String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(PointPrompt::new(p(x)?, p(y)?))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let p = |v: &str| match v.trim().parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("{v:?} is not a positive size")),
        Ok(n) => Ok(n),
    };
    Ok((p(h)?, p(w)?))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Encode { .. } => "encode",
            Command::Peaks { .. } => "peaks",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
            Command::Export { .. } => "export",
            Command::Synth { .. } => "synth",
        }
    }

    /// Dedicated flags that are shorthands for configuration keys. They
    /// apply after the file and after `--set`.
    fn overrides(&self) -> Vec<String> {
        match self {
            Command::Peaks { tau: Some(t), .. } => vec![format!("heatmap.tau={t}")],
            Command::Train { seed: Some(s), .. } => vec![format!("train.seed={s}")],
            _ => Vec::new(),
        }
    }
}

/// Accumulates the run manifest while a command runs.
#[derive(Debug, Default)]
struct Run {
    inputs: Vec<Value>,
    outputs: Vec<Value>,
    extra: serde_json::Map<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(crate::io::read(path)?)))
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(json!({"path": path.display().to_string(), "sha256": sha256_file(path)?}));
        Ok(())
    }

    /// The manifest plus one digest over every file it references, in
    /// manifest order.
    fn dataset_input(&mut self, path: &Path, dataset: &Dataset) -> Result<()> {
        let manifest = if path.is_dir() { path.join(crate::dataset::MANIFEST_FILE) } else { path.to_path_buf() };
        self.input(&manifest)?;
        let mut h = Sha256::new();
        for it in &dataset.items {
            for f in [&it.image, &it.prompts, &it.mask] {
                h.update(crate::io::read(f)?);
            }
        }
        self.inputs.push(json!({"path": dataset.root.display().to_string(), "files_sha256": hex(&h.finalize()), "items": dataset.items.len()}));
        Ok(())
    }

    fn write(&mut self, out: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = out.join(name);
        write_atomic(&path, bytes)?;
        self.outputs.push(json!({"path": name, "sha256": hex(&Sha256::digest(bytes))}));
        Ok(path)
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.extra.insert(key.into(), serde_json::to_value(value).expect("serializable"));
    }
}

/// Parses `args` and runs the command. Returns the process exit status:
/// 0 on success, 2 on a usage error, 1 when the command itself fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    let Some(out) = cli.common.out.clone() else {
        eprintln!("error: --out <DIR> is required");
        return 2;
    };
    let mut overrides = cli.common.overrides.clone();
    if cli.common.deterministic {
        overrides.push("train.deterministic=true".into());
    }
    overrides.extend(cli.command.overrides());
    let config = match RunConfig::load(cli.common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e @ (Error::Argument(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut run = Run::default();
    let result = std::fs::create_dir_all(&out)
        .map_err(|e| Error::io(&out, e))
        .and_then(|_| {
            if let Some(c) = &cli.common.config {
                run.input(c)?;
            }
            execute(&cli.command, &config, &out, &mut run)
        });
    let status = match &result {
        Ok(()) => json!("ok"),
        Err(e) => json!({"error": e.to_string()}),
    };
    let manifest = json!({
        "command": cli.command.name(),
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "inputs": run.inputs,
        "outputs": run.outputs,
        "config": config,
        "config_hash": config.hash(),
        "versions": {"samic": env!("CARGO_PKG_VERSION"), "checkpoint_format": "SAMIC-CKPT-1"},
        "details": run.extra,
        "status": status,
    });
    let written = write_atomic(&out.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest).unwrap().as_bytes());
    match result.and(written) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn gateway(config: &RunConfig, run: &mut Run) -> Result<Gateway> {
    let seg = config.segmenter.clone().with_env();
    run.note("segmenter", &seg);
    Gateway::from_config(&seg, &BackendRegistry::default())
}

/// Loads a checkpoint and its backbone, checking the backbone is the one it
/// was trained against.
fn load_net(path: &Path, run: &mut Run) -> Result<(CorrelationNet, Arc<Backbone>)> {
    run.input(path)?;
    let (net, header) = load_checkpoint(path)?;
    let backbone = Arc::new(Backbone::from_id(&net.config().backbone_id)?);
    if backbone.fingerprint() != header.backbone_fingerprint {
        return Err(Error::format(path, "checkpoint was trained against a different backbone"));
    }
    run.note("backbone", json!({"id": backbone.id(), "fingerprint": format!("{:016x}", backbone.fingerprint())}));
    Ok((net, backbone))
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn execute(command: &Command, config: &RunConfig, out: &Path, run: &mut Run) -> Result<()> {
    match command {
        Command::Encode { points, size } => {
            let map = encode_prompts(points, size.0, size.1, &config.heatmap)?;
            run.write(out, "heatmap.png", &heatmap_png(&map)?)?;
            run.write(out, "heatmap.raw", &heatmap_raw(&map))?;
        }
        Command::Peaks { input, .. } => {
            run.input(input)?;
            let peaks = extract_peaks(&load_heatmap(input)?, &config.heatmap);
            let body = json!({
                "points": peaks.points.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
                "fallback": peaks.fallback,
            });
            run.write(out, "peaks.json", &pretty(&body))?;
            println!("{body}");
        }
        Command::Train { dataset, benchmark, .. } => {
            let ds = load_split_manifest(dataset, benchmark.as_deref())?;
            run.dataset_input(dataset, &ds)?;
            run.write(out, "config.toml", config.to_toml().as_bytes())?;
            let log_path = out.join(TRAIN_LOG);
            let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let outcome = train(&ds, &config.net, &config.train, &config.heatmap, Some(out), &mut log);
            std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
            drop(log);
            run.outputs.push(json!({"path": TRAIN_LOG, "sha256": sha256_file(&log_path)?}));
            let outcome = outcome?;
            if let Some(ckpt) = &outcome.checkpoint {
                let name = ckpt.file_name().expect("checkpoint has a name").to_string_lossy().into_owned();
                run.outputs.push(json!({"path": name, "sha256": sha256_file(ckpt)?}));
            }
            let summary = json!({
                "epochs": outcome.summary.epochs.len(),
                "best_epoch": outcome.summary.best_epoch,
                "best_loss": outcome.summary.best_loss,
                "early_stopped": outcome.summary.early_stopped,
                "steps": outcome.steps,
                "subsample": outcome.subsample.selected,
                "learnable_params": outcome.net.param_count(),
            });
            run.write(out, "summary.json", &pretty(&summary))?;
            run.note("backbone", json!({"id": outcome.backbone.id(), "fingerprint": format!("{:016x}", outcome.backbone.fingerprint())}));
        }
        Command::Predict { checkpoint, contexts, context_prompts, target } => {
            if contexts.len() != context_prompts.len() {
                return Err(Error::Argument(format!(
                    "{} context images but {} prompt records",
                    contexts.len(),
                    context_prompts.len()
                )));
            }
            let (net, backbone) = load_net(checkpoint, run)?;
            let gw = gateway(config, run)?;
            let mut shots = Vec::new();
            for (img, rec) in contexts.iter().zip(context_prompts) {
                run.input(img)?;
                run.input(rec)?;
                let image = load_rgb(img)?;
                let record = PromptRecord::load(rec)?;
                if (record.height(), record.width()) != (image.height() as usize, image.width() as usize) {
                    return Err(Error::format(rec, "prompt record size does not match its image"));
                }
                shots.push((image, record));
            }
            run.input(target)?;
            let timg = load_rgb(target)?;
            let id = target.file_stem().map_or("target".into(), |s| s.to_string_lossy().into_owned());
            let bank = FeatureBank::new(backbone, net.config().input_size, config.heatmap);
            let p = predict_image(&net, &bank, &shots, &timg, &id, &config.heatmap, &gw)?;
            let size = (timg.height() as usize, timg.width() as usize);
            let record = PromptRecord::new(&p.prompts, size, p.segmentation.confidence, gw.backend_id());
            run.write(out, "heatmap.png", &heatmap_png(&p.heatmap)?)?;
            run.write(out, "prompts.json", record.to_json().as_bytes())?;
            run.write(out, "mask.png", &mask_png(&p.segmentation.mask)?)?;
            run.note("fallback", p.fallback);
            run.note("confidence", p.segmentation.confidence);
        }
        Command::Eval { dataset, predictor, checkpoint, name, benchmark } => {
            let ds = load_split_manifest(dataset, benchmark.as_deref())?;
            run.dataset_input(dataset, &ds)?;
            let gw = gateway(config, run)?;
            let ec = config.eval_config();
            let (mut p, method, params): (Box<dyn HeatmapPredictor>, String, Option<usize>) = match predictor {
                PredictorKind::Net => {
                    let path = checkpoint.as_deref().ok_or_else(|| Error::Argument("--checkpoint is required for the net predictor".into()))?;
                    let (net, backbone) = load_net(path, run)?;
                    let n = net.param_count();
                    (Box::new(NetPredictor::with_backbone(net, backbone, config.heatmap)?), "SAMIC".into(), Some(n))
                }
                PredictorKind::Oracle => (Box::new(OraclePredictor { heatmap: config.heatmap }), "Ground-truth heatmap".into(), None),
                PredictorKind::Noise => (Box::new(NoisePredictor::new(ec.seed, config.net.input_size)), "Noise heatmap".into(), None),
            };
            let evaluation = evaluate_kshot(p.as_mut(), &ds, &gw, &ec)?;
            let dataset_name = name.clone().unwrap_or_else(|| {
                let dir = if dataset.is_dir() { dataset.as_path() } else { dataset.parent().unwrap_or(dataset) };
                dir.file_name().map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
            });
            let entry = ReportEntry {
                method,
                learnable_params: params,
                dataset: dataset_name,
                metric: Metric::MIoU,
                shots: ec.shots,
                report: evaluation.report.clone(),
            };
            run.write(out, "report.json", &pretty(&entry))?;
            run.write(out, "episodes.json", &pretty(&evaluation.episodes))?;
            let table = render_table(std::slice::from_ref(&entry));
            run.write(out, "table.txt", table.as_bytes())?;
            print!("{table}");
        }
        Command::Serve { addr } => {
            let gw = Arc::new(gateway(config, run)?);
            let service = Arc::new(AnnotationService::open(out, gw)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Error::io(out, e))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(out, e))?;
                let local = listener.local_addr().map_err(|e| Error::io(out, e))?;
                println!("listening on http://{local}/v1");
                log::info!("serving annotation sessions from {}", out.display());
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                crate::server::serve(service, listener, shutdown).await.map_err(|e| Error::io(out, e))
            })?;
        }
        Command::Export { reports, annotations, session } => match (annotations, session) {
            (Some(root), Some(id)) => {
                let svc = AnnotationService::open(root, Arc::new(gateway(config, run)?))?;
                let manifest = svc.export_dataset(id, out)?;
                run.outputs.push(json!({"path": crate::dataset::MANIFEST_FILE, "sha256": sha256_file(&manifest)?}));
            }
            _ => {
                if reports.is_empty() {
                    return Err(Error::Argument("nothing to export: pass --report files or --annotations with --session".into()));
                }
                let mut entries = Vec::new();
                for r in reports {
                    run.input(r)?;
                    let text = crate::io::read(r)?;
                    let e: ReportEntry = serde_json::from_slice(&text).map_err(|e| Error::format(r, e))?;
                    entries.push(e);
                }
                let table = render_table(&entries);
                run.write(out, "table.txt", table.as_bytes())?;
                run.write(out, "reports.json", &pretty(&entries))?;
                print!("{table}");
            }
        },
        Command::Synth { classes, per_class, test_classes, size, seed } => {
            let d = SynthConfig::default();
            let sc = SynthConfig {
                classes: classes.unwrap_or(d.classes),
                per_class: per_class.unwrap_or(d.per_class),
                test_classes: test_classes.unwrap_or(d.test_classes),
                size: size.unwrap_or(d.size),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let manifest = generate(out, &sc)?;
            run.outputs.push(json!({"path": crate::dataset::MANIFEST_FILE, "sha256": sha256_file(&manifest)?}));
            run.note("synth", &sc);
        }
    }
    Ok(())
}
