//! Waveform I/O, framing, and the synthetic warped-speaker corpus.
//!
//! Each class is a spectral prototype: a set of sinusoidal components with
//! fixed amplitudes. A speaker warps every component frequency with a
//! piecewise-linear VTLN-style function of slope `alpha`, which gives a
//! controllable stand-in for the spectral shift between adult and child
//! speech.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_SECONDS: f64 = 0.200;
pub const HOP_SECONDS: f64 = 0.010;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// Reads 16-bit PCM mono WAV, scaling samples by `1 / 32768`. A sample rate
/// different from `expected_rate` is logged and kept in the result.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<f64>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: expected 16-bit PCM, got {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let sample_rate = spec.sample_rate as f64;
    if let Some(expected) = expected_rate {
        if expected != sample_rate {
            log::warn!(
                "{}: sample rate {sample_rate} Hz differs from expected {expected} Hz",
                path.display()
            );
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(Waveform {
        samples,
        sample_rate,
    })
}

/// Writes 16-bit PCM mono WAV. Samples are scaled by 32768, rounded and
/// saturated to the `i16` range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}

/// Frame and hop lengths in samples for the given durations.
pub fn frame_geometry(sample_rate: f64, win_s: f64, hop_s: f64) -> (usize, usize) {
    (
        (win_s * sample_rate).round() as usize,
        (hop_s * sample_rate).round() as usize,
    )
}

/// Cuts `samples` into windows of `win_s` seconds every `hop_s` seconds;
/// a trailing partial window is dropped.
pub fn frame_signal(samples: &[f64], sample_rate: f64, win_s: f64, hop_s: f64) -> Result<Vec<Vec<f64>>> {
    let (win, hop) = frame_geometry(sample_rate, win_s, hop_s);
    if win == 0 || hop == 0 {
        return Err(Error::invalid("frame window and hop must be at least one sample"));
    }
    if samples.len() < win {
        return Err(Error::invalid(format!(
            "signal of {} samples shorter than one {win}-sample window",
            samples.len()
        )));
    }
    let count = (samples.len() - win) / hop + 1;
    Ok((0..count)
        .map(|k| samples[k * hop..k * hop + win].to_vec())
        .collect())
}

/// Piecewise-linear VTLN warp: slope `alpha` up to the knee
/// `0.85 * f_nyq / max(alpha, 1)`, then a straight line to `(f_nyq, f_nyq)`.
pub fn warp_alpha(f: f64, alpha: f64, f_nyq: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("warp factor must be positive, got {alpha}")));
    }
    if !(0.0..=f_nyq).contains(&f) {
        return Err(Error::invalid(format!("frequency {f} outside [0, {f_nyq}]")));
    }
    let knee = 0.85 * f_nyq / alpha.max(1.0);
    if f <= knee {
        Ok(alpha * f)
    } else {
        let y0 = alpha * knee;
        Ok(y0 + (f - knee) * (f_nyq - y0) / (f_nyq - knee))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Training-domain speakers; utterances go to `train` and `dev`.
    Base,
    /// Mismatched speakers; utterances go to `adapt` and `test`.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub alpha: f64,
    #[serde(default = "unit")]
    pub loudness: f64,
    pub domain: Domain,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sample_rate: f64,
    pub classes: Vec<ClassPrototype>,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    /// Signal-to-noise ratio of the additive white noise; `None` is noiseless.
    pub snr_db: Option<f64>,
    /// Utterances per speaker held out: `dev` for base speakers, `adapt`
    /// for target speakers (the first ones), the rest go to `train`/`test`.
    pub held_out_per_speaker: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.speakers.is_empty() || self.utterances_per_speaker == 0 {
            return Err(Error::invalid("corpus spec needs classes, speakers and utterances"));
        }
        let nyq = self.sample_rate / 2.0;
        let max_alpha = self.speakers.iter().map(|s| s.alpha).fold(0.0, f64::max);
        for s in &self.speakers {
            if !(s.alpha > 0.0) || !(s.loudness > 0.0) {
                return Err(Error::invalid(format!(
                    "speaker {} needs positive alpha and loudness",
                    s.id
                )));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.components.is_empty() {
                return Err(Error::invalid(format!("class {i} has no components")));
            }
            for comp in &c.components {
                if !(comp.freq_hz > 0.0) || comp.freq_hz * max_alpha >= nyq {
                    return Err(Error::invalid(format!(
                        "class {i}: component {} Hz aliases at alpha {max_alpha}",
                        comp.freq_hz
                    )));
                }
            }
        }
        if self.held_out_per_speaker > self.utterances_per_speaker {
            return Err(Error::invalid("more held-out utterances than utterances"));
        }
        let (win, _) = frame_geometry(self.sample_rate, FRAME_SECONDS, HOP_SECONDS);
        if ((self.utterance_seconds * self.sample_rate).round() as usize) < win {
            return Err(Error::invalid("utterances shorter than one frame"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Adapt,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub alpha: f64,
    pub class: usize,
    pub split: Split,
    /// Position within the speaker's utterance list.
    pub index: usize,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameExample {
    pub frame: Vec<f64>,
    pub label: usize,
    pub speaker_id: String,
    pub utterance_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<FrameExample>,
    pub dev: Vec<FrameExample>,
    pub adapt: Vec<FrameExample>,
    pub test: Vec<FrameExample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[FrameExample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Adapt => &self.adapt,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<FrameExample> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Adapt => &mut self.adapt,
            Split::Test => &mut self.test,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one utterance, independent of generation order.
fn utterance_rng(seed: u64, speaker: usize, utterance: usize) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ speaker as u64) ^ utterance as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Clean signal RMS before noise and loudness scaling.
const CLEAN_RMS: f64 = 0.1;

/// Synthesizes one utterance of `class` for `speaker`.
pub fn synthesize(spec: &CorpusSpec, speaker: &SpeakerSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let sr = spec.sample_rate;
    let nyq = sr / 2.0;
    let n = (spec.utterance_seconds * sr).round() as usize;
    let proto = spec
        .classes
        .get(class)
        .ok_or_else(|| Error::invalid(format!("no class {class}")))?;
    let mut x = vec![0.0; n];
    for comp in &proto.components {
        let f = warp_alpha(comp.freq_hz, speaker.alpha, nyq)?;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * f / sr;
        for (t, v) in x.iter_mut().enumerate() {
            *v += comp.amplitude * (w * t as f64 + phase).sin();
        }
    }
    let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let gain = if power > 0.0 { CLEAN_RMS / power.sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v *= gain);
    if let Some(snr) = spec.snr_db {
        let clean_power = CLEAN_RMS * CLEAN_RMS * if power > 0.0 { 1.0 } else { 0.0 };
        let sigma = (clean_power / 10f64.powf(snr / 10.0)).sqrt();
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            x.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    x.iter_mut()
        .for_each(|v| *v = (*v * speaker.loudness).clamp(-1.0, 1.0));
    Ok(x)
}

/// All utterances of a corpus, in speaker order. Each utterance draws from
/// its own stream seeded by `(seed, speaker, utterance)`.
pub fn synthesize_utterances(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let n_classes = spec.n_classes();
    let mut out = Vec::with_capacity(spec.speakers.len() * spec.utterances_per_speaker);
    for (si, spk) in spec.speakers.iter().enumerate() {
        for ui in 0..spec.utterances_per_speaker {
            let mut rng = utterance_rng(spec.seed, si, ui);
            // Rotating classes keep every speaker's utterances balanced.
            let class = (ui + si) % n_classes;
            let samples = synthesize(spec, spk, class, &mut rng)?;
            let held_out = ui < spec.held_out_per_speaker;
            let split = match (spk.domain, held_out) {
                (Domain::Base, false) => Split::Train,
                (Domain::Base, true) => Split::Dev,
                (Domain::Target, true) => Split::Adapt,
                (Domain::Target, false) => Split::Test,
            };
            out.push(Utterance {
                id: format!("{}-{ui:03}", spk.id),
                speaker_id: spk.id.clone(),
                alpha: spk.alpha,
                class,
                split,
                index: ui,
                waveform: Waveform {
                    samples,
                    sample_rate: spec.sample_rate,
                },
            });
        }
    }
    Ok(out)
}

pub fn utterance_frames(u: &Utterance) -> Result<Vec<FrameExample>> {
    let frames = frame_signal(&u.waveform.samples, u.waveform.sample_rate, FRAME_SECONDS, HOP_SECONDS)?;
    Ok(frames
        .into_iter()
        .map(|frame| FrameExample {
            frame,
            label: u.class,
            speaker_id: u.speaker_id.clone(),
            utterance_id: u.id.clone(),
        })
        .collect())
}

/// Frames every utterance into its split.
pub fn frame_corpus(utterances: &[Utterance]) -> Result<Corpus> {
    let mut c = Corpus::default();
    for u in utterances {
        c.split_mut(u.split).extend(utterance_frames(u)?);
    }
    Ok(c)
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    frame_corpus(&synthesize_utterances(spec)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub alpha: f64,
    pub class: usize,
    pub split: Split,
    pub index: usize,
    pub path: String,
}

pub const INDEX_FILE: &str = "index.json";
pub const SPEC_FILE: &str = "corpus_spec.json";

/// Writes one WAV per utterance under `dir/wav/`, plus `index.json` and the
/// corpus spec.
pub fn write_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec, utterances: &[Utterance]) -> Result<Vec<IndexEntry>> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut index = Vec::with_capacity(utterances.len());
    for u in utterances {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(dir.join(&rel), &u.waveform)?;
        index.push(IndexEntry {
            utterance_id: u.id.clone(),
            speaker_id: u.speaker_id.clone(),
            alpha: u.alpha,
            class: u.class,
            split: u.split,
            index: u.index,
            path: rel,
        });
    }
    write_json(dir.join(INDEX_FILE), &index)?;
    write_json(dir.join(SPEC_FILE), spec)?;
    Ok(index)
}

/// Loads a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<(CorpusSpec, Vec<Utterance>)> {
    let dir = dir.as_ref();
    let spec: CorpusSpec = read_json(dir.join(SPEC_FILE))?;
    let index: Vec<IndexEntry> = read_json(dir.join(INDEX_FILE))?;
    let mut out = Vec::with_capacity(index.len());
    for e in index {
        let waveform = read_wav(dir.join(&e.path), Some(spec.sample_rate))?;
        out.push(Utterance {
            id: e.utterance_id,
            speaker_id: e.speaker_id,
            alpha: e.alpha,
            class: e.class,
            split: e.split,
            index: e.index,
            waveform,
        });
    }
    Ok((spec, out))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl Into<PathBuf>, value: &T) -> Result<()> {
    let path = path.into();
    let s = serde_json::to_string_pretty(value)?;
    fs::write(&path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl Into<PathBuf>) -> Result<T> {
    let path = path.into();
    let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&s)?)
}
