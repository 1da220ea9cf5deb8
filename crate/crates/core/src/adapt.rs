//! Adaptation modes: which parameter groups train, at which learning rates,
//! and how batchnorm behaves while they do.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FrameExample;
use crate::error::{Error, Result};
use crate::nnet::layers::{scale_channels, Tensor};
use crate::nnet::{GroupKind, LhucSite, Model};
use crate::optim::{ParamGroup, DEFAULT_LR};
use crate::train::{fit, BnTraining, EpochMetrics, FitOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdaptMode {
    Sinc,
    #[serde(rename = "LHUC0")]
    Lhuc0,
    #[serde(rename = "Sinc+LHUC0")]
    SincLhuc0,
    #[serde(rename = "LHUC1")]
    Lhuc1,
    #[serde(rename = "Sinc+LHUC1")]
    SincLhuc1,
    #[serde(rename = "ALL-Sinc")]
    AllMinusSinc,
    #[serde(rename = "ALL")]
    All,
}

impl AdaptMode {
    pub const ALL_MODES: [AdaptMode; 7] = [
        AdaptMode::Sinc,
        AdaptMode::Lhuc0,
        AdaptMode::SincLhuc0,
        AdaptMode::Lhuc1,
        AdaptMode::SincLhuc1,
        AdaptMode::AllMinusSinc,
        AdaptMode::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Sinc => "Sinc",
            AdaptMode::Lhuc0 => "LHUC0",
            AdaptMode::SincLhuc0 => "Sinc+LHUC0",
            AdaptMode::Lhuc1 => "LHUC1",
            AdaptMode::SincLhuc1 => "Sinc+LHUC1",
            AdaptMode::AllMinusSinc => "ALL-Sinc",
            AdaptMode::All => "ALL",
        }
    }

    /// LHUC sites the mode trains.
    pub fn lhuc_sites(self) -> &'static [LhucSite] {
        match self {
            AdaptMode::Lhuc0 | AdaptMode::SincLhuc0 => &[LhucSite::SincOutput],
            AdaptMode::Lhuc1 | AdaptMode::SincLhuc1 => &[LhucSite::Conv1Output],
            _ => &[],
        }
    }

    fn trains_cutoffs(self) -> bool {
        matches!(
            self,
            AdaptMode::Sinc | AdaptMode::SincLhuc0 | AdaptMode::SincLhuc1 | AdaptMode::All
        )
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "sinc" => AdaptMode::Sinc,
            "lhuc0" => AdaptMode::Lhuc0,
            "synclhuc0" | "sinclhuc0" => AdaptMode::SincLhuc0,
            "lhuc1" => AdaptMode::Lhuc1,
            "sinclhuc1" => AdaptMode::SincLhuc1,
            "allminussinc" | "allsinc" => AdaptMode::AllMinusSinc,
            "all" => AdaptMode::All,
            _ => return Err(Error::invalid(format!("unknown adaptation mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Running statistics fixed; scale and shift fixed.
    Frozen,
    /// Running statistics re-estimated from adaptation batches; scale and
    /// shift still fixed.
    UpdateStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Cut-offs and ordinary weights.
    pub base: f64,
    /// LHUC scalers when adapted on their own.
    pub lhuc: f64,
    /// LHUC rate multiplier relative to `base` when combined with LHUC1.
    pub lhuc1_multiplier: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            base: DEFAULT_LR,
            lhuc: 0.8,
            lhuc1_multiplier: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub rates: LearningRates,
    #[serde(default = "default_policy")]
    pub batchnorm: BnPolicy,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    256
}
fn default_policy() -> BnPolicy {
    BnPolicy::Frozen
}

impl AdaptConfig {
    pub fn new(mode: AdaptMode) -> Self {
        Self {
            mode,
            epochs: default_epochs(),
            batch_size: default_batch(),
            rates: LearningRates::default(),
            batchnorm: BnPolicy::Frozen,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LhucScalers {
    pub site: LhucSite,
    pub values: Vec<f64>,
}

impl LhucScalers {
    pub fn ones(site: LhucSite, channels: usize) -> Self {
        Self {
            site,
            values: vec![1.0; channels],
        }
    }
}

/// Scales channel `i` of `y` by `r[i]`.
pub fn apply_lhuc(y: &Tensor, r: &LhucScalers) -> Result<Tensor> {
    scale_channels(y, &r.values)
}

/// Attaches the LHUC scalers `mode` needs (initialized to 1.0).
pub fn prepare_model(model: &mut Model, mode: AdaptMode) -> Result<()> {
    for &site in mode.lhuc_sites() {
        model.attach_lhuc(site)?;
    }
    Ok(())
}

/// Trainable groups and learning rates for `mode`. Batchnorm scale and shift
/// never train when adapting (both policies hold them fixed).
pub fn select_trainable(model: &Model, mode: AdaptMode, rates: &LearningRates) -> Result<Vec<ParamGroup>> {
    for &site in mode.lhuc_sites() {
        if !model.has_lhuc(site) {
            return Err(Error::invalid(format!(
                "mode {mode} needs LHUC scalers at {site:?}; attach them first"
            )));
        }
    }
    let lhuc_rate = match mode {
        AdaptMode::Lhuc0 | AdaptMode::Lhuc1 => rates.lhuc,
        AdaptMode::SincLhuc1 => rates.base * rates.lhuc1_multiplier,
        _ => rates.base,
    };
    let mut out = Vec::new();
    for g in model.groups() {
        let rate = match g.kind {
            GroupKind::SincCutoffs => mode.trains_cutoffs().then_some(rates.base),
            GroupKind::Lhuc0 => (mode.lhuc_sites().contains(&LhucSite::SincOutput)).then_some(lhuc_rate),
            GroupKind::Lhuc1 => (mode.lhuc_sites().contains(&LhucSite::Conv1Output)).then_some(lhuc_rate),
            GroupKind::ConvWeight | GroupKind::ConvBias => {
                matches!(mode, AdaptMode::AllMinusSinc | AdaptMode::All).then_some(rates.base)
            }
            GroupKind::BnScale | GroupKind::BnShift | GroupKind::BnRunningMean | GroupKind::BnRunningVar => None,
        };
        if let Some(rate) = rate {
            out.push(ParamGroup::new(g.name, rate));
        }
    }
    Ok(out)
}

pub fn trainable_count(model: &Model, groups: &[ParamGroup]) -> Result<usize> {
    groups
        .iter()
        .map(|g| model.group(&g.name).map(|i| i.len()))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub mode: AdaptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub trainable_params: usize,
    pub learning_rates: BTreeMap<String, f64>,
    pub batchnorm: BnPolicy,
    pub epochs: Vec<EpochMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before_checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_checkpoint: Option<String>,
}

/// Adapts a copy of `base` on `data`, evaluating on `heldout` after every
/// epoch. Only the groups chosen by [`select_trainable`] change, plus the
/// batchnorm running statistics under [`BnPolicy::UpdateStats`].
pub fn adapt_run(
    base: &Model,
    data: &[FrameExample],
    heldout: &[FrameExample],
    cfg: &AdaptConfig,
) -> Result<(Model, AdaptReport)> {
    if data.is_empty() {
        return Err(Error::invalid("no adaptation data"));
    }
    let mut model = base.clone();
    prepare_model(&mut model, cfg.mode)?;
    let groups = select_trainable(&model, cfg.mode, &cfg.rates)?;
    let trainable_params = trainable_count(&model, &groups)?;
    let bn = match cfg.batchnorm {
        BnPolicy::Frozen => BnTraining::Frozen,
        BnPolicy::UpdateStats => BnTraining::Train,
    };
    let epochs = fit(
        &mut model,
        data,
        heldout,
        "test",
        &FitOptions {
            groups: &groups,
            bn,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
    )?;
    let report = AdaptReport {
        mode: cfg.mode,
        speaker: None,
        trainable_params,
        learning_rates: groups.iter().map(|g| (g.name.clone(), g.learning_rate)).collect(),
        batchnorm: cfg.batchnorm,
        epochs,
        before_checkpoint: None,
        after_checkpoint: None,
    };
    Ok((model, report))
}
