//! Scaling functions, filter and response exports, and average log-mel
//! spectra.

use std::fs;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{frequency_response, hz_to_mel, mel_to_hz, SincFilter, SincFilterbank};

/// Adapted against reference centre frequencies, sorted by reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFunction {
    pub pairs: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

pub fn scaling_pairs(adapted: &SincFilterbank, reference: &SincFilterbank) -> Result<ScalingFunction> {
    if adapted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "adapted filterbank has {} filters, reference has {}",
            adapted.len(),
            reference.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = reference
        .filters
        .iter()
        .zip(&adapted.filters)
        .map(|(r, a)| (r.centre(), a.centre()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ScalingFunction { pairs, speaker: None })
}

/// Least-squares slope through the origin of adapted against reference
/// centres, using pairs whose reference centre lies in `[f_lo, f_hi]`.
pub fn fit_alpha(s: &ScalingFunction, f_lo: f64, f_hi: f64) -> Result<f64> {
    let (mut sxy, mut sxx, mut n) = (0.0, 0.0, 0usize);
    for &(x, y) in s.pairs.iter().filter(|(x, _)| *x >= f_lo && *x <= f_hi) {
        sxy += x * y;
        sxx += x * x;
        n += 1;
    }
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 filters with centres in [{f_lo}, {f_hi}] Hz, found {n}"
        )));
    }
    if sxx == 0.0 {
        return Err(Error::invalid("all reference centres in band are zero"));
    }
    Ok(sxy / sxx)
}

pub const LOG_FLOOR: f64 = 1e-10;
pub const DEFAULT_MELS: usize = 40;

/// Triangular band `(lower, centre, upper)` edges in Hz, equally spaced in
/// mel over `[0, sr/2]`.
pub fn mel_bands(n_mels: usize, sample_rate: f64) -> Result<Vec<(f64, f64, f64)>> {
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be positive"));
    }
    let top = hz_to_mel(sample_rate / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    Ok(pts.windows(3).map(|w| (w[0], w[1], w[2])).collect())
}

fn triangle(f: f64, (lo, c, hi): (f64, f64, f64)) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f <= c {
        (f - lo) / (c - lo)
    } else {
        (hi - f) / (hi - c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelStats {
    pub centres_hz: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Log mel energies of one frame: magnitude DFT (zero-padded to a power of
/// two), triangular bands, natural log floored at [`LOG_FLOOR`].
pub fn log_mel(frame: &[f64], n_mels: usize, sample_rate: f64) -> Result<Vec<f64>> {
    if frame.is_empty() {
        return Err(Error::invalid("empty frame"));
    }
    let n_fft = frame.len().next_power_of_two();
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let mag: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
    let bands = mel_bands(n_mels, sample_rate)?;
    let bin_hz = sample_rate / n_fft as f64;
    Ok(bands
        .iter()
        .map(|&b| {
            let e: f64 = mag
                .iter()
                .enumerate()
                .map(|(k, m)| triangle(k as f64 * bin_hz, b) * m)
                .sum();
            e.max(LOG_FLOOR).ln()
        })
        .collect())
}

/// Per-band mean and standard deviation of log mel energies across frames.
pub fn avg_log_mel(frames: &[&[f64]], n_mels: usize, sample_rate: f64) -> Result<LogMelStats> {
    if frames.is_empty() {
        return Err(Error::invalid("avg_log_mel needs at least one frame"));
    }
    let mut sum = vec![0.0; n_mels];
    let mut sq = vec![0.0; n_mels];
    for f in frames {
        let l = log_mel(f, n_mels, sample_rate)?;
        for (i, v) in l.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = frames.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
        .collect();
    Ok(LogMelStats {
        centres_hz: mel_bands(n_mels, sample_rate)?.iter().map(|b| b.1).collect(),
        mean,
        std,
    })
}

/// Decimal rendering with `sig` significant digits and trailing zeros
/// trimmed.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let mag = v.abs().log10().floor() as i64;
    let decimals = sig as i64 - 1 - mag;
    if decimals <= 0 {
        let q = 10f64.powi(-decimals as i32);
        return format!("{:.0}", (v / q).round() * q);
    }
    let s = format!("{:.*}", decimals as usize, v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

const SIG: usize = 9;

fn num(v: f64) -> String {
    format_sig(v, SIG)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const FILTERS_HEADER: &str = "index,f_low_hz,f_high_hz,centre_hz,gain";
pub const SCALING_HEADER: &str = "index,ref_centre_hz,adapted_centre_hz,speaker";
pub const RESPONSE_HEADER: &str = "freq_hz,filter_index,magnitude_db";
pub const SPECTRA_HEADER: &str = "band,centre_hz,mean_log_mel,std_log_mel,label";

pub fn export_filters(fb: &SincFilterbank, path: impl AsRef<Path>) -> Result<()> {
    write_csv(
        path.as_ref(),
        FILTERS_HEADER,
        fb.filters.iter().zip(&fb.gains).enumerate().map(|(i, (f, g))| {
            vec![i.to_string(), num(f.f_low), num(f.f_high), num(f.centre()), num(*g)]
        }),
    )
}

/// Reads a filters CSV back into a filterbank.
pub fn import_filters(path: impl AsRef<Path>, filter_length: usize, sample_rate: f64) -> Result<SincFilterbank> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",") != FILTERS_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let mut filters = Vec::new();
    let mut gains = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("{}: bad row {}", path.display(), n + 2)))
        };
        filters.push(SincFilter::new(parse(1)?, parse(2)?));
        gains.push(parse(4)?);
    }
    let mut fb = SincFilterbank::new(filters, filter_length, sample_rate)?;
    fb.gains = gains;
    Ok(fb)
}

/// One row per filter per function; `index` is the rank by reference centre.
pub fn export_scaling(functions: &[ScalingFunction], path: impl AsRef<Path>) -> Result<()> {
    write_csv(
        path.as_ref(),
        SCALING_HEADER,
        functions.iter().flat_map(|s| {
            let spk = s.speaker.clone().unwrap_or_default();
            s.pairs
                .iter()
                .enumerate()
                .map(move |(i, (r, a))| vec![i.to_string(), num(*r), num(*a), spk.clone()])
        }),
    )
}

/// Magnitude responses in dB (floored at -200 dB) of the gain-scaled
/// kernels, `n_fft/2 + 1` rows per filter.
pub fn export_response(fb: &SincFilterbank, n_fft: usize, path: impl AsRef<Path>) -> Result<()> {
    let kernels = fb.kernels()?;
    let l = fb.filter_length;
    let mut rows = Vec::with_capacity(fb.len() * (n_fft / 2 + 1));
    for (i, k) in kernels.chunks(l).enumerate() {
        let mag = frequency_response(k, n_fft)?;
        for (b, m) in mag.iter().enumerate() {
            let hz = b as f64 * fb.sample_rate / n_fft as f64;
            let db = 20.0 * m.max(LOG_FLOOR).log10();
            rows.push(vec![num(hz), i.to_string(), num(db)]);
        }
    }
    write_csv(path.as_ref(), RESPONSE_HEADER, rows.into_iter())
}

pub fn export_spectra(stats: &[(String, LogMelStats)], path: impl AsRef<Path>) -> Result<()> {
    write_csv(
        path.as_ref(),
        SPECTRA_HEADER,
        stats.iter().flat_map(|(label, s)| {
            (0..s.mean.len()).map(move |b| {
                vec![b.to_string(), num(s.centres_hz[b]), num(s.mean[b]), num(s.std[b]), label.clone()]
            })
        }),
    )
}

/// Generation parameters written next to every export.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sidecar {
    pub export: String,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub mode: Option<String>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

pub fn sidecar_path(csv: impl AsRef<Path>) -> PathBuf {
    let mut p = csv.as_ref().as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_sidecar(csv: impl AsRef<Path>, sidecar: &Sidecar) -> Result<PathBuf> {
    let path = sidecar_path(csv);
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{init_filterbank, InitScheme};

    const SR: f64 = 16000.0;

    fn fb(edges: &[(f64, f64)]) -> SincFilterbank {
        SincFilterbank::new(edges.iter().map(|&(l, h)| SincFilter::new(l, h)).collect(), 65, SR).unwrap()
    }

    #[test]
    fn identity_scaling_is_diagonal() {
        let f = init_filterbank(InitScheme::Mel, 20, 65, SR).unwrap();
        let s = scaling_pairs(&f, &f).unwrap();
        assert!(s.pairs.iter().all(|(a, b)| a == b));
        assert!(s.pairs.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(fit_alpha(&s, 0.0, SR).unwrap(), 1.0);
    }

    #[test]
    fn scaled_filters_fit_exactly() {
        let reference = fb(&[(100.0, 300.0), (500.0, 700.0), (1000.0, 1400.0), (2000.0, 2600.0)]);
        let scaled = fb(&[(110.0, 330.0), (550.0, 770.0), (1100.0, 1540.0), (2200.0, 2860.0)]);
        let s = scaling_pairs(&scaled, &reference).unwrap();
        for (r, a) in &s.pairs {
            assert!((a - 1.1 * r).abs() < 1e-9);
        }
        assert!((fit_alpha(&s, 0.0, 8000.0).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn pairs_sorted_by_reference() {
        let reference = fb(&[(1000.0, 1400.0), (100.0, 300.0)]);
        let s = scaling_pairs(&reference, &reference).unwrap();
        assert_eq!(s.pairs[0].0, 200.0);
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(scaling_pairs(&fb(&[(100.0, 300.0)]), &fb(&[(100.0, 300.0), (400.0, 500.0)])).is_err());
    }

    #[test]
    fn fit_alpha_band_and_errors() {
        let s = ScalingFunction {
            pairs: vec![(100.0, 120.0), (200.0, 240.0), (5000.0, 1.0)],
            speaker: None,
        };
        assert!((fit_alpha(&s, 0.0, 1000.0).unwrap() - 1.2).abs() < 1e-12);
        assert!(fit_alpha(&s, 150.0, 1000.0).is_err());
    }

    #[test]
    fn noisy_fit_alpha_close_to_slope() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 10.0).unwrap();
        let pairs: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let x = 100.0 + 90.0 * i as f64;
                (x, 1.2 * x + noise.sample(&mut rng))
            })
            .collect();
        let a = fit_alpha(&ScalingFunction { pairs, speaker: None }, 0.0, 8000.0).unwrap();
        assert!((a - 1.2).abs() < 0.02, "{a}");
    }

    #[test]
    fn log_mel_identical_and_silent_frames() {
        let tone: Vec<f64> = (0..800).map(|t| (0.3 * t as f64).sin()).collect();
        let s = avg_log_mel(&[&tone, &tone, &tone], 40, SR).unwrap();
        assert!(s.std.iter().all(|&v| v < 1e-6), "{:?}", s.std);
        let silence = vec![0.0; 800];
        let z = avg_log_mel(&[&silence], 40, SR).unwrap();
        assert!(z.mean.iter().all(|&v| v == LOG_FLOOR.ln()));
        assert!(avg_log_mel(&[], 40, SR).is_err());
    }

    #[test]
    fn tone_lands_in_its_band() {
        let tone: Vec<f64> = (0..3200)
            .map(|t| (std::f64::consts::TAU * 1000.0 * t as f64 / SR).sin())
            .collect();
        let l = log_mel(&tone, 40, SR).unwrap();
        let best = (0..40).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
        // Independent edges: 42 points equally spaced in mel over 0..8 kHz.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let step = mel(8000.0) / 41.0;
        let expect = (0..40)
            .max_by(|&a, &b| {
                let w = |m: usize| triangle(1000.0, (inv(step * m as f64), inv(step * (m + 1) as f64), inv(step * (m + 2) as f64)));
                w(a).total_cmp(&w(b))
            })
            .unwrap();
        assert_eq!(best, expect);
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(30.0, 9), "30");
        assert_eq!(format_sig(1.0, 9), "1");
        assert_eq!(format_sig(0.0, 9), "0");
        assert_eq!(format_sig(1234.56789012, 9), "1234.56789");
        assert_eq!(format_sig(-0.000123456789123, 9), "-0.000123456789");
        assert_eq!(format_sig(123456789012.0, 9), "123456789000");
    }

    #[test]
    fn flat_export_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("filters.csv");
        let f = init_filterbank(InitScheme::Flat, 40, 129, SR).unwrap();
        export_filters(&f, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 41);
        assert_eq!(lines[0], FILTERS_HEADER);
        assert_eq!(lines[5], "4,30,80,55,1");
    }

    #[test]
    fn filters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("filters.csv");
        let mut f = init_filterbank(InitScheme::Mel, 24, 129, SR).unwrap();
        f.gains[3] = 0.731_234_567_89;
        export_filters(&f, &p).unwrap();
        let g = import_filters(&p, 129, SR).unwrap();
        for (a, b) in f.filters.iter().zip(&g.filters) {
            assert!((a.f_low - b.f_low).abs() <= 1e-8 * a.f_low.abs().max(1.0));
            assert!((a.f_high - b.f_high).abs() <= 1e-8 * a.f_high.abs().max(1.0));
        }
        assert!((g.gains[3] - 0.731_234_568).abs() < 1e-12);
    }

    #[test]
    fn response_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("response.csv");
        let f = init_filterbank(InitScheme::Mel, 5, 65, SR).unwrap();
        export_response(&f, 256, &p).unwrap();
        let n = fs::read_to_string(&p).unwrap().lines().count();
        assert_eq!(n, 1 + 129 * 5);
    }

    #[test]
    fn sidecar_sits_next_to_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("scaling.csv");
        let p = write_sidecar(
            &csv,
            &Sidecar {
                export: "scaling".into(),
                seed: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p, dir.path().join("scaling.csv.json"));
        let back: Sidecar = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back.seed, Some(3));
    }
}
