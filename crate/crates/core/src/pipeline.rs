//! Run configurations and the train / adapt pipelines behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::adapt::{adapt_run, AdaptConfig, AdaptMode, AdaptReport};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::{frame_corpus, read_corpus, synthesize_utterances, write_json, Corpus, CorpusSpec, Domain, Split, Utterance};
use crate::error::{Error, Result};
use crate::filterbank::InitScheme;
use crate::nnet::{Model, ModelSpec};
use crate::train::{train_model, EpochMetrics, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    /// Corpus directory written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Checkpoint adapted by `adapt`; defaults to `<output_dir>/checkpoint`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptConfig>,
    /// Inline corpus, generated in memory; used when `paths.corpus_dir` is unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSpec>,
    #[serde(default)]
    pub paths: Paths,
}

fn default_init() -> InitScheme {
    InitScheme::Mel
}

impl RunConfig {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            init: default_init(),
            seed: 0,
            train: TrainConfig::default(),
            adapt: None,
            corpus: None,
            paths: Paths::default(),
        }
    }

    /// Reads a config, resolving relative paths against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.corpus_dir,
            &mut cfg.paths.output_dir,
            &mut cfg.paths.base_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.paths
            .output_dir
            .as_deref()
            .ok_or_else(|| Error::invalid("config has no paths.output_dir"))
    }

    pub fn base_checkpoint(&self) -> Result<PathBuf> {
        match &self.paths.base_checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.output_dir()?.join(CHECKPOINT_DIR)),
        }
    }

    /// Utterances from `paths.corpus_dir`, or generated from the inline spec.
    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        if let Some(dir) = &self.paths.corpus_dir {
            return Ok(read_corpus(dir)?.1);
        }
        match &self.corpus {
            Some(spec) => synthesize_utterances(spec),
            None => Err(Error::invalid("config needs paths.corpus_dir or an inline corpus")),
        }
    }
}

pub fn write_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_dir: PathBuf,
}

/// Builds the model, trains it on the corpus' train split, and writes the
/// resolved config, checkpoint and per-epoch metrics under `output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg.output_dir()?.to_path_buf();
    create_dir(&out)?;
    write_json(out.join(CONFIG_FILE), cfg)?;
    let corpus = frame_corpus(&cfg.utterances()?)?;
    let mut model = Model::build(&cfg.model, cfg.init, cfg.seed)?;
    let mut train = cfg.train.clone();
    train.seed = cfg.seed;
    let metrics = train_model(&mut model, &corpus.train, &corpus.dev, &train)?;
    write_metrics(out.join(METRICS_FILE), &metrics)?;
    let mut meta = Map::new();
    meta.insert("stage".into(), json!("base"));
    meta.insert("epochs".into(), json!(train.epochs));
    meta.insert("init".into(), serde_json::to_value(cfg.init)?);
    let checkpoint_dir = out.join(CHECKPOINT_DIR);
    Checkpoint::from_model(&model, None, meta)?.save(&checkpoint_dir)?;
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoint_dir,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptRequest {
    pub mode: Option<AdaptMode>,
    pub speaker: Option<String>,
    /// Adaptation utterances used per speaker (first K by index).
    pub utts: Option<usize>,
    pub epochs: Option<usize>,
    /// Adapt every target speaker separately instead of pooling them.
    pub all_speakers: bool,
}

/// Frames of `speakers` (all target speakers when `None`) from one split,
/// keeping only utterances with index-rank below `limit` per speaker.
fn select_frames(
    utts: &[Utterance],
    split: Split,
    speaker: Option<&str>,
    limit: Option<usize>,
) -> Result<Corpus> {
    let mut per_speaker = std::collections::BTreeMap::<&str, usize>::new();
    let chosen: Vec<Utterance> = utts
        .iter()
        .filter(|u| u.split == split && speaker.map_or(true, |s| u.speaker_id == s))
        .filter(|u| {
            let n = per_speaker.entry(u.speaker_id.as_str()).or_default();
            *n += 1;
            limit.map_or(true, |k| *n <= k)
        })
        .cloned()
        .collect();
    frame_corpus(&chosen)
}

fn target_speakers(utts: &[Utterance], spec: Option<&CorpusSpec>) -> Vec<String> {
    let mut ids: Vec<String> = match spec {
        Some(s) => s
            .speakers
            .iter()
            .filter(|s| s.domain == Domain::Target)
            .map(|s| s.id.clone())
            .collect(),
        None => utts
            .iter()
            .filter(|u| matches!(u.split, Split::Adapt | Split::Test))
            .map(|u| u.speaker_id.clone())
            .collect(),
    };
    ids.dedup();
    ids
}

pub struct AdaptOutcome {
    pub label: String,
    pub model: Model,
    pub report: AdaptReport,
    pub dir: PathBuf,
}

/// Adapts the base checkpoint once per selected speaker (or once on the
/// pooled target speakers), each run starting from a fresh copy of the base
/// model. Outputs go to `<output_dir>/adapt/<mode>/<speaker|pooled>/`.
pub fn run_adapt(cfg: &RunConfig, req: &AdaptRequest) -> Result<Vec<AdaptOutcome>> {
    let mut acfg = cfg
        .adapt
        .clone()
        .or_else(|| req.mode.map(AdaptConfig::new))
        .ok_or_else(|| Error::invalid("no adaptation mode: set adapt.mode or pass --mode"))?;
    if let Some(m) = req.mode {
        acfg.mode = m;
    }
    if let Some(e) = req.epochs {
        acfg.epochs = e;
    }
    let base_path = cfg.base_checkpoint()?;
    let base_ck = Checkpoint::load(&base_path)?;
    let base = base_ck.to_model()?;
    let utts = cfg.utterances()?;
    let spec_speakers = match &cfg.paths.corpus_dir {
        Some(dir) => Some(read_corpus_spec(dir)?),
        None => cfg.corpus.clone(),
    };
    let runs: Vec<Option<String>> = match (&req.speaker, req.all_speakers) {
        (Some(s), _) => vec![Some(s.clone())],
        (None, true) => target_speakers(&utts, spec_speakers.as_ref())
            .into_iter()
            .map(Some)
            .collect(),
        (None, false) => vec![None],
    };
    let root = cfg.output_dir()?.join("adapt").join(acfg.mode.name());
    let mut outcomes = Vec::new();
    for spk in runs {
        let label = spk.clone().unwrap_or_else(|| "pooled".into());
        let adapt_data = select_frames(&utts, Split::Adapt, spk.as_deref(), req.utts)?.adapt;
        let test_data = select_frames(&utts, Split::Test, spk.as_deref(), None)?.test;
        if adapt_data.is_empty() {
            return Err(Error::invalid(format!("no adaptation utterances for {label}")));
        }
        log::info!(
            "adapting {label} with mode {} on {} frames",
            acfg.mode,
            adapt_data.len()
        );
        let (model, mut report) = adapt_run(&base, &adapt_data, &test_data, &acfg)?;
        let dir = root.join(&label);
        create_dir(&dir)?;
        let mut resolved = cfg.clone();
        resolved.adapt = Some(acfg.clone());
        write_json(dir.join(CONFIG_FILE), &resolved)?;
        write_metrics(dir.join(METRICS_FILE), &report.epochs)?;
        // The manifest metadata is carried over unchanged so that a run with
        // no updates reproduces the input checkpoint byte for byte.
        let ck_dir = dir.join(CHECKPOINT_DIR);
        Checkpoint::from_model(&model, None, base_ck.manifest.metadata.clone())?.save(&ck_dir)?;
        report.speaker = spk.clone();
        report.before_checkpoint = Some(base_path.display().to_string());
        report.after_checkpoint = Some(ck_dir.display().to_string());
        write_json(dir.join(REPORT_FILE), &report)?;
        outcomes.push(AdaptOutcome {
            label,
            model,
            report,
            dir,
        });
    }
    Ok(outcomes)
}

fn read_corpus_spec(dir: &Path) -> Result<CorpusSpec> {
    crate::data::read_json(dir.join(crate::data::SPEC_FILE))
}

/// Summary printed by `inspect`.
pub fn inspect(ck: &Checkpoint) -> Result<Value> {
    let model = ck.to_model()?;
    let groups: Vec<Value> = ck
        .manifest
        .groups
        .iter()
        .map(|g| json!({"name": g.name, "shape": g.shape, "len": g.len}))
        .collect();
    let filters: Vec<Value> = model
        .filterbank
        .filters
        .iter()
        .zip(&model.filterbank.gains)
        .map(|(f, g)| json!([f.f_low, f.f_high, g]))
        .collect();
    Ok(json!({
        "format_version": FORMAT_VERSION,
        "seed": ck.manifest.seed,
        "param_count": model.param_count(),
        "lhuc0": ck.manifest.lhuc0,
        "lhuc1": ck.manifest.lhuc1,
        "optimizer_state": ck.manifest.optimizer.is_some(),
        "metadata": ck.manifest.metadata,
        "groups": groups,
        "filters_hz_gain": filters,
    }))
}
