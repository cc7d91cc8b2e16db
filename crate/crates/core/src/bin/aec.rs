//! Command-line front end: dataset synthesis, offline processing,
//! training, evaluation and the ablation matrix.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use aec_core::evaluate::{
    evaluate_items, format_ablation, EvalConfig, load_net, read_dataset, run_ablation, summarize, write_report,
};
use aec_core::kv::KvMap;
use aec_core::net::NetConfig;
use aec_core::pipeline::{Pipeline, PipelineConfig};
use aec_core::signal::{read_wav, write_wav, WavEncoding};
use aec_core::simulate::{parse_manifest, synth_dataset, synth_item, SynthItem};
use aec_core::train::{prepare_items, train, TrainConfig};
use aec_core::{AecError, Result};

#[derive(Parser)]
#[command(name = "aec", version, about = "Hybrid acoustic echo cancellation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key=value config file; later files override earlier ones.
    #[arg(long = "config", global = true)]
    config: Vec<PathBuf>,
    /// Override a single key, e.g. --set kalman.block=512.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for item-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled dataset from a manifest.
    Synth {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cancel echo in one recording.
    Process {
        /// Microphone signal.
        #[arg(long)]
        d: PathBuf,
        /// Far-end reference.
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Post-filter checkpoint; without it only the linear stage runs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the post-filter on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a synthesized dataset per scenario.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines report, one record per item.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and compare base, +TFCM and +gated PE.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Optional JSON-lines dump of the table rows.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_kv(g: &Global) -> Result<KvMap> {
    let mut kv = KvMap::new();
    for p in &g.config {
        kv.merge(&KvMap::read(p)?);
    }
    for s in &g.set {
        kv.insert_token(s)?;
    }
    Ok(kv)
}

fn synth_manifest(path: &Path) -> Result<Vec<SynthItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| AecError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let items = parse_manifest(&text)?;
    if items.is_empty() {
        return Err(AecError::EmptyDataset);
    }
    use rayon::prelude::*;
    items.par_iter().map(|it| synth_item(it, base)).collect()
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn run(cli: Cli) -> Result<()> {
    let kv = load_kv(&cli.global)?;
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(AecError::InvalidConfig("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AecError::InvalidConfig(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { manifest, out } => {
            let summary = synth_dataset(&manifest, &out)?;
            println!("{}", json!({"written": summary.written.len(), "failed": summary.errors.len()}));
            if let Some((id, msg)) = summary.errors.first() {
                for (id, msg) in &summary.errors {
                    eprintln!("{}", json!({"item": id, "error": msg}));
                }
                return Err(AecError::Parse(format!("item {id} failed: {msg}")));
            }
        }
        Command::Process {
            d,
            x,
            out,
            checkpoint,
        } => {
            let net = checkpoint.map(|c| load_net(&c, &kv)).transpose()?;
            let pipeline = Pipeline::new(PipelineConfig::from_kv(&kv)?, net);
            let r = pipeline.process(&read_wav(&d)?, &read_wav(&x)?)?;
            write_wav(&out, &r.output, WavEncoding::Float32)?;
            println!(
                "{}",
                json!({"delay": r.linear.delay.delay, "confidence": r.linear.delay.confidence})
            );
        }
        Command::Train { manifest, out } => {
            let pipe = PipelineConfig::from_kv(&kv)?;
            let net = NetConfig::from_kv(&kv)?;
            let cfg = TrainConfig::from_kv(&kv)?;
            let mixtures: Vec<_> = synth_manifest(&manifest)?
                .into_iter()
                .map(|it| (it.id, it.mixture))
                .collect();
            let items = prepare_items(&mixtures, &pipe)?;
            let s = train(&items, &net, &cfg, Some(&out))?;
            let last = s.records.last();
            println!(
                "{}",
                json!({
                    "steps": s.trainer.step,
                    "epochs": s.trainer.epoch,
                    "final_loss": last.map(|r| r.total),
                    "checkpoint": s.checkpoint,
                })
            );
        }
        Command::Evaluate {
            dataset,
            checkpoint,
            report,
        } => {
            let net = checkpoint.map(|c| load_net(&c, &kv)).transpose()?;
            let pipeline = Pipeline::new(PipelineConfig::from_kv(&kv)?, net);
            let items = read_dataset(&dataset)?;
            let records = evaluate_items(&pipeline, &items, &EvalConfig::from_kv(&kv)?)?;
            write_report(&report, &records)?;
            for s in summarize(&records) {
                println!("{}", json_line(&s));
            }
        }
        Command::Ablate { manifest, report } => {
            let items = synth_manifest(&manifest)?;
            let rows = run_ablation(
                &items,
                &NetConfig::from_kv(&kv)?,
                &TrainConfig::from_kv(&kv)?,
                &PipelineConfig::from_kv(&kv)?,
                &EvalConfig::from_kv(&kv)?,
            )?;
            print!("{}", format_ablation(&rows));
            if let Some(p) = report {
                let text: String = rows.iter().map(|r| json_line(r) + "\n").collect();
                std::fs::write(&p, text).map_err(|e| AecError::Io { path: p, source: e })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "{}",
                json!({"error": "usage", "code": 64, "message": msg.lines().next().unwrap_or("")})
            );
            return ExitCode::from(64);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": e.kind(), "code": e.code(), "message": e.to_string()})
            );
            ExitCode::from(u8::try_from(e.code()).unwrap_or(1).max(1))
        }
    }
}
