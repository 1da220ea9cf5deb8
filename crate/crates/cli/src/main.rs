use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sincadapt::adapt::AdaptMode;
use sincadapt::analysis::{
    avg_log_mel, export_filters, export_response, export_scaling, export_spectra, scaling_pairs, write_sidecar,
    Sidecar, DEFAULT_MELS,
};
use sincadapt::checkpoint::Checkpoint;
use sincadapt::data::{frame_corpus, read_corpus, read_json, synthesize_utterances, write_corpus, CorpusSpec, Split};
use sincadapt::nnet::Model;
use sincadapt::pipeline::{inspect, run_adapt, run_train, AdaptRequest, RunConfig, REPORT_FILE};
use sincadapt::train::evaluate;

/// Log verbosity, read by env_logger (`error`, `warn`, `info`, `debug`, ...).
const LOG_ENV: &str = "SINCADAPT_LOG";

#[derive(Parser)]
#[command(name = "sincadapt", version, about = "Sinc filterbank acoustic models and speaker adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Adapt,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Adapt => Split::Adapt,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAV files plus index) from a corpus spec.
    GenData {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model; writes checkpoint, metrics and resolved config.
    Train { config: PathBuf },
    /// Adapt the base checkpoint to target speakers.
    Adapt {
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AdaptMode>,
        /// Adapt only this speaker.
        #[arg(long)]
        speaker: Option<String>,
        /// Adaptation utterances per speaker.
        #[arg(long)]
        utts: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Adapt each target speaker separately from the same base model.
        #[arg(long, conflicts_with = "speaker")]
        all_speakers: bool,
    },
    /// Frame accuracy of a checkpoint on one corpus split.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter edges and gains as CSV.
    ExportFilters {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapted against reference centre frequencies as CSV.
    ExportScaling {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        adapted: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Magnitude responses of the gain-scaled filters as CSV.
    ExportResponse {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 512)]
        n_fft: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average log-mel spectra per speaker of one split as CSV.
    ExportSpectra {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = DEFAULT_MELS)]
        n_mels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count of the model in a run config.
    ParamCount {
        config: PathBuf,
        /// Also print per-block counts.
        #[arg(long)]
        blocks: bool,
    },
    /// Summary of a checkpoint as JSON.
    Inspect { checkpoint: PathBuf },
}

fn parse_mode(s: &str) -> std::result::Result<AdaptMode, String> {
    s.parse().map_err(|e: sincadapt::Error| e.to_string())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn sidecar(export: &str, ck: Option<(&Path, &Checkpoint)>) -> Sidecar {
    Sidecar {
        export: export.into(),
        seed: ck.map(|(_, c)| c.manifest.seed),
        checkpoint: ck.map(|(p, _)| p.display().to_string()),
        mode: ck.and_then(|(p, _)| adapted_mode(p)),
        params: Default::default(),
    }
}

/// Adaptation mode recorded in the report next to an adapted checkpoint.
fn adapted_mode(checkpoint: &Path) -> Option<String> {
    let report = checkpoint.parent()?.join(REPORT_FILE);
    let v: serde_json::Value = read_json(report).ok()?;
    v.get("mode")?.as_str().map(String::from)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: CorpusSpec = read_json(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let utts = synthesize_utterances(&spec)?;
            let index = write_corpus(&out, &spec, &utts)?;
            log::info!("wrote {} utterances to {}", index.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = run_train(&cfg)?;
            if let Some(last) = out.metrics.iter().rev().find(|m| m.split == "dev") {
                log::info!("dev frame accuracy {:.4}", last.frame_accuracy);
            }
            println!("{}", out.checkpoint_dir.display());
        }
        Command::Adapt {
            config,
            mode,
            speaker,
            utts,
            epochs,
            all_speakers,
        } => {
            let cfg = RunConfig::load(&config)?;
            let req = AdaptRequest {
                mode,
                speaker,
                utts,
                epochs,
                all_speakers,
            };
            for o in run_adapt(&cfg, &req)? {
                if let Some(last) = o.report.epochs.iter().rev().find(|m| m.split == "test") {
                    log::info!("{}: test frame accuracy {:.4}", o.label, last.frame_accuracy);
                }
                println!("{}", o.dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            out,
        } => {
            let (_, model) = load_checkpoint(&checkpoint)?;
            let (_, utts) = read_corpus(&corpus)?;
            let frames = frame_corpus(&utts)?;
            let split = Split::from(split);
            let data = frames.split(split);
            if data.is_empty() {
                bail!("split {split:?} of {} has no frames", corpus.display());
            }
            let e = evaluate(&model, data)?;
            let v = json!({
                "checkpoint": checkpoint.display().to_string(),
                "split": split,
                "frames": data.len(),
                "loss": e.loss,
                "frame_accuracy": e.frame_accuracy,
            });
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&v)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&v)?;
        }
        Command::ExportFilters { checkpoint, out } => {
            let (ck, model) = load_checkpoint(&checkpoint)?;
            export_filters(&model.filterbank, &out)?;
            write_sidecar(&out, &sidecar("filters", Some((&checkpoint, &ck))))?;
        }
        Command::ExportScaling { reference, adapted, out } => {
            let (ck, base) = load_checkpoint(&reference)?;
            let mut fns = Vec::new();
            for p in &adapted {
                let (_, m) = load_checkpoint(p)?;
                let mut s = scaling_pairs(&m.filterbank, &base.filterbank)?;
                // Per-speaker runs live in `.../<speaker>/checkpoint`.
                s.speaker = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned());
                fns.push(s);
            }
            export_scaling(&fns, &out)?;
            let mut sc = sidecar("scaling", Some((&reference, &ck)));
            sc.params.insert(
                "adapted".into(),
                json!(adapted.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()),
            );
            write_sidecar(&out, &sc)?;
        }
        Command::ExportResponse { checkpoint, n_fft, out } => {
            let (ck, model) = load_checkpoint(&checkpoint)?;
            export_response(&model.filterbank, n_fft, &out)?;
            let mut sc = sidecar("response", Some((&checkpoint, &ck)));
            sc.params.insert("n_fft".into(), json!(n_fft));
            write_sidecar(&out, &sc)?;
        }
        Command::ExportSpectra {
            corpus,
            split,
            n_mels,
            out,
        } => {
            let (spec, utts) = read_corpus(&corpus)?;
            let split = Split::from(split);
            let frames = frame_corpus(&utts)?;
            let data = frames.split(split);
            let mut speakers: Vec<&str> = data.iter().map(|e| e.speaker_id.as_str()).collect();
            speakers.dedup();
            if speakers.is_empty() {
                bail!("split {split:?} of {} has no frames", corpus.display());
            }
            let mut stats = Vec::new();
            for spk in speakers {
                let f: Vec<&[f64]> = data
                    .iter()
                    .filter(|e| e.speaker_id == spk)
                    .map(|e| e.frame.as_slice())
                    .collect();
                stats.push((spk.to_string(), avg_log_mel(&f, n_mels, spec.sample_rate)?));
            }
            export_spectra(&stats, &out)?;
            let mut sc = sidecar("spectra", None);
            sc.seed = Some(spec.seed);
            sc.params.insert("corpus".into(), json!(corpus.display().to_string()));
            sc.params.insert("split".into(), json!(split));
            sc.params.insert("n_mels".into(), json!(n_mels));
            write_sidecar(&out, &sc)?;
        }
        Command::ParamCount { config, blocks } => {
            let cfg = RunConfig::load(&config)?;
            let model = Model::build(&cfg.model, cfg.init, cfg.seed)?;
            if blocks {
                for (b, n) in model.block_param_counts() {
                    println!("block {b}: {n}");
                }
            }
            println!("{}", model.param_count());
        }
        Command::Inspect { checkpoint } => {
            let (ck, _) = load_checkpoint(&checkpoint)?;
            print_json(&inspect(&ck)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
