//! The synthetic speaker-mismatch experiment: formant-like classes spoken by
//! base speakers with warp factors near 1 and target speakers with one large
//! warp factor, a toy model trained on the base speakers, and cut-off
//! adaptation on the target speakers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_run, AdaptConfig, AdaptMode, AdaptReport, BnPolicy};
use crate::analysis::{fit_alpha, scaling_pairs, ScalingFunction};
use crate::data::{gen_corpus, ClassPrototype, Component, Corpus, CorpusSpec, Domain, SpeakerSpec};
use crate::error::Result;
use crate::filterbank::InitScheme;
use crate::nnet::{Model, ModelSpec};
use crate::train::{evaluate, train_model, EpochMetrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSetup {
    pub seed: u64,
    pub n_classes: usize,
    pub formants: usize,
    /// Harmonic spacing of the class spectra.
    pub f0_hz: f64,
    pub max_component_hz: f64,
    pub base_speakers: usize,
    pub base_alpha: (f64, f64),
    pub target_speakers: usize,
    pub target_alpha: f64,
    pub utterances_per_speaker: usize,
    pub held_out_per_speaker: usize,
    pub utterance_seconds: f64,
    pub snr_db: Option<f64>,
    pub n_filters: usize,
    pub filter_length: usize,
    pub width: usize,
    pub train: TrainConfig,
    pub adapt_epochs: usize,
    pub adapt_batch_size: usize,
    /// Reference-centre band used to fit the warp slope.
    pub fit_band_hz: (f64, f64),
}

impl Default for MismatchSetup {
    fn default() -> Self {
        Self {
            seed: 1,
            n_classes: 12,
            formants: 6,
            f0_hz: 50.0,
            max_component_hz: 6000.0,
            base_speakers: 8,
            base_alpha: (0.95, 1.05),
            target_speakers: 4,
            target_alpha: 1.25,
            utterances_per_speaker: 18,
            held_out_per_speaker: 6,
            utterance_seconds: 0.3,
            snr_db: Some(30.0),
            n_filters: 16,
            filter_length: 129,
            width: 32,
            train: TrainConfig {
                epochs: 6,
                batch_size: 16,
                learning_rate: crate::optim::DEFAULT_LR,
                seed: 1,
            },
            adapt_epochs: 15,
            adapt_batch_size: 16,
            fit_band_hz: (200.0, 4000.0),
        }
    }
}

/// Formant-like class spectra: harmonics of `f0_hz` under a sum of Gaussian
/// bumps, one per formant region.
pub fn class_prototypes(setup: &MismatchSetup) -> Vec<ClassPrototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0xC1A5_5E5);
    let top = setup.max_component_hz;
    let regions: Vec<(f64, f64)> = (0..setup.formants)
        .map(|k| {
            let lo = 250.0 + (top - 400.0) * k as f64 / setup.formants as f64;
            let hi = 250.0 + (top - 400.0) * (k + 1) as f64 / setup.formants as f64;
            (lo, hi)
        })
        .collect();
    (0..setup.n_classes)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = regions
                .iter()
                .map(|&(lo, hi)| {
                    let centre = rng.gen_range(lo..hi);
                    let width = rng.gen_range(0.06..0.12) * centre.max(600.0);
                    let height = rng.gen_range(0.5..1.0);
                    (centre, width, height)
                })
                .collect();
            let n = (top / setup.f0_hz).floor() as usize;
            let components = (2..=n)
                .map(|h| {
                    let f = h as f64 * setup.f0_hz;
                    let a = 0.02
                        + bumps
                            .iter()
                            .map(|&(c, w, a)| a * (-0.5 * ((f - c) / w).powi(2)).exp())
                            .sum::<f64>();
                    Component {
                        freq_hz: f,
                        amplitude: a,
                    }
                })
                .collect();
            ClassPrototype { components }
        })
        .collect()
}

pub fn corpus_spec(setup: &MismatchSetup) -> CorpusSpec {
    let (a0, a1) = setup.base_alpha;
    let mut speakers = Vec::new();
    for i in 0..setup.base_speakers {
        let t = if setup.base_speakers > 1 {
            i as f64 / (setup.base_speakers - 1) as f64
        } else {
            0.5
        };
        speakers.push(SpeakerSpec {
            id: format!("base{i:02}"),
            alpha: a0 + t * (a1 - a0),
            loudness: 1.0,
            domain: Domain::Base,
        });
    }
    for i in 0..setup.target_speakers {
        speakers.push(SpeakerSpec {
            id: format!("tgt{i:02}"),
            alpha: setup.target_alpha,
            loudness: 1.0,
            domain: Domain::Target,
        });
    }
    CorpusSpec {
        sample_rate: 16000.0,
        classes: class_prototypes(setup),
        speakers,
        utterances_per_speaker: setup.utterances_per_speaker,
        utterance_seconds: setup.utterance_seconds,
        snr_db: setup.snr_db,
        held_out_per_speaker: setup.held_out_per_speaker,
        seed: setup.seed,
    }
}

pub fn model_spec(setup: &MismatchSetup) -> ModelSpec {
    ModelSpec::toy(setup.n_filters, setup.filter_length, setup.width, setup.n_classes)
}

#[derive(Debug, Clone)]
pub struct MismatchOutcome {
    pub base: Model,
    pub adapted: Model,
    pub train_metrics: Vec<EpochMetrics>,
    pub report: AdaptReport,
    pub base_dev_accuracy: f64,
    pub target_accuracy_before: f64,
    pub target_accuracy_after: f64,
    pub scaling: ScalingFunction,
    pub fitted_alpha: f64,
}

impl MismatchOutcome {
    pub fn gap(&self) -> f64 {
        self.base_dev_accuracy - self.target_accuracy_before
    }

    /// Fraction of the accuracy gap closed by adaptation.
    pub fn recovery(&self) -> f64 {
        (self.target_accuracy_after - self.target_accuracy_before) / self.gap()
    }
}

pub fn train_base(setup: &MismatchSetup, corpus: &Corpus) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut model = Model::build(&model_spec(setup), InitScheme::Mel, setup.seed)?;
    let metrics = train_model(&mut model, &corpus.train, &corpus.dev, &setup.train)?;
    Ok((model, metrics))
}

pub fn run_mismatch(setup: &MismatchSetup) -> Result<MismatchOutcome> {
    let corpus = gen_corpus(&corpus_spec(setup))?;
    let (base, train_metrics) = train_base(setup, &corpus)?;
    let base_dev_accuracy = evaluate(&base, &corpus.dev)?.frame_accuracy;
    let target_accuracy_before = evaluate(&base, &corpus.test)?.frame_accuracy;
    let cfg = AdaptConfig {
        mode: AdaptMode::Sinc,
        epochs: setup.adapt_epochs,
        batch_size: setup.adapt_batch_size,
        rates: Default::default(),
        batchnorm: BnPolicy::Frozen,
        seed: setup.seed,
    };
    let (adapted, report) = adapt_run(&base, &corpus.adapt, &[], &cfg)?;
    let target_accuracy_after = evaluate(&adapted, &corpus.test)?.frame_accuracy;
    let scaling = scaling_pairs(&adapted.filterbank, &base.filterbank)?;
    let fitted_alpha = fit_alpha(&scaling, setup.fit_band_hz.0, setup.fit_band_hz.1)?;
    Ok(MismatchOutcome {
        base,
        adapted,
        train_metrics,
        report,
        base_dev_accuracy,
        target_accuracy_before,
        target_accuracy_after,
        scaling,
        fitted_alpha,
    })
}
