//! Learnable band-pass front-end.
//!
//! Each filter is an ideal rectangular band-pass, written as the difference of
//! two low-pass sinc kernels and tapered by a Hamming window. The only free
//! parameters per filter are its two cut-off frequencies, stored in Hz. Kernels
//! are evaluated on normalized frequencies `f / sample_rate`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest admissible lower cut-off, in Hz.
pub const MIN_FREQ_HZ: f64 = 30.0;
/// Minimum bandwidth `f_high - f_low`, in Hz.
pub const MIN_BAND_HZ: f64 = 50.0;

/// Unnormalized sinc, `sin(x) / x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Hertz to mel, `2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Upper end of the initialization range: `sr/2 - (f_min + b)`.
pub fn max_init_freq(sample_rate: f64) -> f64 {
    sample_rate / 2.0 - (MIN_FREQ_HZ + MIN_BAND_HZ)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SincFilter {
    #[serde(rename = "f_low_hz")]
    pub f_low: f64,
    #[serde(rename = "f_high_hz")]
    pub f_high: f64,
}

impl SincFilter {
    pub fn new(f_low: f64, f_high: f64) -> Self {
        Self { f_low, f_high }
    }

    pub fn centre(&self) -> f64 {
        0.5 * (self.f_low + self.f_high)
    }

    pub fn bandwidth(&self) -> f64 {
        self.f_high - self.f_low
    }

    /// Checks the cut-off invariants at the given sample rate.
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        let ok = self.f_low.is_finite()
            && self.f_high.is_finite()
            && self.f_low >= MIN_FREQ_HZ
            && self.f_high >= self.f_low + MIN_BAND_HZ
            && self.f_high <= nyquist;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "filter ({} Hz, {} Hz) violates constraints at sr={sample_rate}",
                self.f_low, self.f_high
            )))
        }
    }

    /// Projects the cut-offs onto the admissible set.
    pub fn constrained(&self, sample_rate: f64) -> Self {
        let nyquist = sample_rate / 2.0;
        let f_low = self.f_low.clamp(MIN_FREQ_HZ, nyquist - MIN_BAND_HZ);
        let f_high = self.f_high.clamp(f_low + MIN_BAND_HZ, nyquist);
        Self { f_low, f_high }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Mel,
    Uniform { seed: u64 },
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SincFilterbank {
    pub sample_rate: f64,
    pub filter_length: usize,
    pub filters: Vec<SincFilter>,
    pub gains: Vec<f64>,
}

impl SincFilterbank {
    pub fn new(filters: Vec<SincFilter>, filter_length: usize, sample_rate: f64) -> Result<Self> {
        let gains = vec![1.0; filters.len()];
        let fb = Self {
            sample_rate,
            filter_length,
            filters,
            gains,
        };
        fb.validate()?;
        Ok(fb)
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_length(self.filter_length)?;
        if self.gains.len() != self.filters.len() {
            return Err(Error::Shape(format!(
                "{} gains for {} filters",
                self.gains.len(),
                self.filters.len()
            )));
        }
        for f in &self.filters {
            f.validate(self.sample_rate)?;
        }
        Ok(())
    }

    /// Gain-scaled windowed kernels, row-major `len() x filter_length`.
    pub fn kernels(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len() * self.filter_length);
        for (f, &gain) in self.filters.iter().zip(&self.gains) {
            let k = windowed_kernel(f, self.filter_length, self.sample_rate)?;
            out.extend(k.into_iter().map(|v| gain * v));
        }
        Ok(out)
    }

    pub fn centres(&self) -> Vec<f64> {
        self.filters.iter().map(SincFilter::centre).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fb: Self = serde_json::from_str(s)?;
        fb.validate()?;
        Ok(fb)
    }
}

fn check_length(len: usize) -> Result<()> {
    if len % 2 == 0 {
        return Err(Error::invalid(format!("filter length must be odd, got {len}")));
    }
    Ok(())
}

/// Symmetric tap index `n` for position `k` of an odd-length kernel.
fn tap(k: usize, len: usize) -> f64 {
    k as f64 - ((len - 1) / 2) as f64
}

/// Ideal band-pass kernel `2 f_h sinc(2 pi f_h n) - 2 f_l sinc(2 pi f_l n)` on
/// normalized frequencies.
pub fn ideal_kernel(f: &SincFilter, len: usize, sample_rate: f64) -> Result<Vec<f64>> {
    check_length(len)?;
    f.validate(sample_rate)?;
    Ok(ideal_kernel_unchecked(f, len, sample_rate))
}

fn ideal_kernel_unchecked(f: &SincFilter, len: usize, sample_rate: f64) -> Vec<f64> {
    let lo = f.f_low / sample_rate;
    let hi = f.f_high / sample_rate;
    (0..len)
        .map(|k| {
            let n = tap(k, len);
            2.0 * hi * sinc(2.0 * PI * hi * n) - 2.0 * lo * sinc(2.0 * PI * lo * n)
        })
        .collect()
}

/// Hamming window `0.54 - 0.46 cos(2 pi n / L)` for `n = 0..L`.
pub fn hamming_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::invalid(format!("window length must be >= 2, got {len}")));
    }
    let l = len as f64;
    Ok((0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / l).cos())
        .collect())
}

/// Window aligned to an odd-length kernel: the rising half of
/// [`hamming_window`] up to the centre tap, mirrored onto the falling half.
/// This keeps the taper exactly symmetric while using the same formula.
pub fn kernel_window(len: usize) -> Result<Vec<f64>> {
    check_length(len)?;
    let w = hamming_window(len)?;
    let c = (len - 1) / 2;
    Ok((0..len).map(|k| w[c - k.abs_diff(c)]).collect())
}

pub fn windowed_kernel(f: &SincFilter, len: usize, sample_rate: f64) -> Result<Vec<f64>> {
    let g = ideal_kernel(f, len, sample_rate)?;
    let w = kernel_window(len)?;
    Ok(g.iter().zip(&w).map(|(g, w)| g * w).collect())
}

/// Partial derivatives of the windowed kernel with respect to `f_low` and
/// `f_high`, both in Hz.
///
/// `d/df [2 f sinc(2 pi f n)] = 2 cos(2 pi f n)` on normalized frequency, so
/// each tap picks up a factor `1 / sample_rate`.
pub fn kernel_partials(
    f: &SincFilter,
    len: usize,
    sample_rate: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_length(len)?;
    f.validate(sample_rate)?;
    let w = kernel_window(len)?;
    let lo = f.f_low / sample_rate;
    let hi = f.f_high / sample_rate;
    let mut d_low = Vec::with_capacity(len);
    let mut d_high = Vec::with_capacity(len);
    for (k, w) in w.iter().enumerate() {
        let n = tap(k, len);
        d_low.push(-2.0 * (2.0 * PI * lo * n).cos() * w / sample_rate);
        d_high.push(2.0 * (2.0 * PI * hi * n).cos() * w / sample_rate);
    }
    Ok((d_low, d_high))
}

pub fn init_filterbank(
    scheme: InitScheme,
    n_filters: usize,
    filter_length: usize,
    sample_rate: f64,
) -> Result<SincFilterbank> {
    if n_filters == 0 {
        return Err(Error::invalid("filterbank needs at least one filter"));
    }
    check_length(filter_length)?;
    if !(sample_rate > 2.0 * (MIN_FREQ_HZ + MIN_BAND_HZ)) {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} too small for the cut-off constraints"
        )));
    }
    let f_max = max_init_freq(sample_rate);

    let filters = match scheme {
        InitScheme::Flat => vec![SincFilter::new(MIN_FREQ_HZ, MIN_FREQ_HZ + MIN_BAND_HZ); n_filters],
        InitScheme::Mel => {
            let (m_lo, m_hi) = (hz_to_mel(MIN_FREQ_HZ), hz_to_mel(f_max));
            let step = (m_hi - m_lo) / n_filters as f64;
            let mut edges: Vec<f64> = (0..=n_filters)
                .map(|i| mel_to_hz(m_lo + step * i as f64))
                .collect();
            // Pin the ends so round-off in the mel round trip cannot leak out.
            edges[0] = MIN_FREQ_HZ;
            edges[n_filters] = f_max;
            contiguous(&edges)
        }
        InitScheme::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lows: Vec<f64> = (0..n_filters)
                .map(|_| rng.gen_range(MIN_FREQ_HZ..f_max))
                .collect();
            lows.sort_by(f64::total_cmp);
            lows.push(f_max);
            contiguous(&lows)
        }
    };

    let fb = SincFilterbank {
        sample_rate,
        filter_length,
        filters,
        gains: vec![1.0; n_filters],
    };
    Ok(constrain_filterbank(&fb))
}

/// Adjacent edge pairs as filters: filter `i` spans `edges[i]..edges[i + 1]`.
fn contiguous(edges: &[f64]) -> Vec<SincFilter> {
    edges
        .windows(2)
        .map(|e| SincFilter::new(e[0], e[1]))
        .collect()
}

pub fn constrain_filterbank(fb: &SincFilterbank) -> SincFilterbank {
    let mut out = fb.clone();
    constrain_in_place(&mut out);
    out
}

pub fn constrain_in_place(fb: &mut SincFilterbank) {
    let sr = fb.sample_rate;
    for f in &mut fb.filters {
        *f = f.constrained(sr);
    }
}

/// Magnitude spectrum of a zero-padded kernel, `n_fft / 2 + 1` bins.
pub fn frequency_response(kernel: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if n_fft < kernel.len() {
        return Err(Error::invalid(format!(
            "n_fft {n_fft} shorter than kernel length {}",
            kernel.len()
        )));
    }
    if !n_fft.is_power_of_two() {
        return Err(Error::invalid(format!("n_fft {n_fft} is not a power of two")));
    }
    let mut buf: Vec<Complex<f64>> = kernel
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    Ok(buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: f64 = 16000.0;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sinc_values() {
        assert_eq!(sinc(0.0), 1.0);
        assert!(sinc(PI).abs() < 1e-15);
        assert!(approx(sinc(PI / 2.0), 2.0 / PI, 1e-15));
        assert!(approx(2.0 / PI, 0.636619772, 1e-9));
    }

    #[test]
    fn degenerate_kernel_is_zero() {
        // f_low == f_high is outside the constraints, so go through the raw path.
        let g = ideal_kernel_unchecked(&SincFilter::new(500.0, 500.0), 129, SR);
        assert!(g.iter().all(|&v| v == 0.0));
        let w = kernel_window(129).unwrap();
        assert!(g.iter().zip(&w).all(|(g, w)| g * w == 0.0));
    }

    #[test]
    fn full_band_centre_tap() {
        let f = SincFilter::new(0.0, SR / 2.0);
        for len in [3, 65, 129] {
            let g = ideal_kernel_unchecked(&f, len, SR);
            assert!(approx(g[(len - 1) / 2], 1.0, 1e-15));
        }
    }

    #[test]
    fn kernel_matches_direct_evaluation() {
        // Independent form: for n != 0, 2 f sinc(2 pi f n) = sin(2 pi f n) / (pi n).
        let f = SincFilter::new(300.0, 2300.0);
        let g = ideal_kernel(&f, 129, SR).unwrap();
        assert!(approx(g[64], 0.25, 1e-15));
        let (lo, hi) = (300.0 / SR, 2300.0 / SR);
        for (k, &v) in g.iter().enumerate() {
            let n = k as f64 - 64.0;
            let expect = if n == 0.0 {
                2.0 * (hi - lo)
            } else {
                ((2.0 * PI * hi * n).sin() - (2.0 * PI * lo * n).sin()) / (PI * n)
            };
            assert!(approx(v, expect, 1e-15), "tap {k}: {v} vs {expect}");
        }
    }

    #[test]
    fn kernel_rejects_bad_input() {
        let f = SincFilter::new(300.0, 2300.0);
        assert!(ideal_kernel(&f, 128, SR).is_err());
        assert!(ideal_kernel(&SincFilter::new(10.0, 2300.0), 129, SR).is_err());
        assert!(ideal_kernel(&SincFilter::new(300.0, 320.0), 129, SR).is_err());
    }

    #[test]
    fn hamming_values() {
        assert!(hamming_window(1).is_err());
        for len in [2, 64, 129] {
            assert!(approx(hamming_window(len).unwrap()[0], 0.08, 1e-15));
        }
        let w = hamming_window(64).unwrap();
        assert!(approx(w[32], 1.0, 1e-15));
        let w = hamming_window(129).unwrap();
        let expect = 0.54 - 0.46 * (128.0 * PI / 129.0).cos();
        assert!(approx(w[64], expect, 1e-15));
    }

    #[test]
    fn kernel_window_is_symmetric_with_centre_maximum() {
        let w = kernel_window(129).unwrap();
        let h = hamming_window(129).unwrap();
        assert_eq!(w[0], h[0]);
        assert_eq!(w[128], h[0]);
        assert_eq!(w[64], h[64]);
        for j in 0..=64 {
            assert_eq!(w[64 + j], w[64 - j]);
        }
        assert!(w.iter().all(|&v| v <= w[64]));
    }

    #[test]
    fn windowed_kernel_is_product_and_attenuates_edges() {
        let f = SincFilter::new(300.0, 2300.0);
        let g = ideal_kernel(&f, 129, SR).unwrap();
        let gw = windowed_kernel(&f, 129, SR).unwrap();
        let w = hamming_window(129).unwrap();
        for k in 0..=64 {
            // Left half uses the window formula directly.
            assert!(approx(gw[k], w[k] * g[k], 1e-18));
            assert_eq!(gw[128 - k], gw[k]);
        }
        assert!(gw[0].abs() <= 0.08 * g[0].abs() + 1e-15);
    }

    #[test]
    fn partials_centre_tap() {
        let f = SincFilter::new(300.0, 2300.0);
        let (d_lo, d_hi) = kernel_partials(&f, 129, SR).unwrap();
        // Window value at the centre tap multiplies the closed form 2/sr.
        let wc = kernel_window(129).unwrap()[64];
        assert!(approx(d_hi[64], 2.0 / SR * wc, 1e-18));
        assert!(approx(d_lo[64], -2.0 / SR * wc, 1e-18));
    }

    #[test]
    fn partials_match_finite_differences() {
        let f = SincFilter::new(731.0, 1544.0);
        let (d_lo, d_hi) = kernel_partials(&f, 129, SR).unwrap();
        let h = 1e-3;
        let fd = |df_lo: f64, df_hi: f64| {
            let p = windowed_kernel(&SincFilter::new(f.f_low + df_lo, f.f_high + df_hi), 129, SR)
                .unwrap();
            let m = windowed_kernel(&SincFilter::new(f.f_low - df_lo, f.f_high - df_hi), 129, SR)
                .unwrap();
            p.iter().zip(&m).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>()
        };
        for (a, b) in d_lo.iter().zip(fd(h, 0.0)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-9));
        }
        for (a, b) in d_hi.iter().zip(fd(0.0, h)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-9));
        }
    }

    #[test]
    fn flat_init() {
        let fb = init_filterbank(InitScheme::Flat, 40, 129, SR).unwrap();
        assert_eq!(fb.len(), 40);
        assert!(fb.filters.iter().all(|f| *f == SincFilter::new(30.0, 80.0)));
        assert!(fb.gains.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn mel_init_range() {
        let fb = init_filterbank(InitScheme::Mel, 40, 129, SR).unwrap();
        assert_eq!(fb.filters[0].f_low, 30.0);
        assert_eq!(fb.filters[39].f_high, 7920.0);
    }

    #[test]
    fn mel_init_matches_independent_interpolation() {
        // Oracle: mel points with an independently written scale conversion.
        let mel = |f: f64| 2595.0 * (f / 700.0 + 1.0).ln() / std::f64::consts::LN_10;
        let inv = |m: f64| (std::f64::consts::LN_10 * m / 2595.0).exp_m1() * 700.0;
        let (a, b) = (mel(30.0), mel(7920.0));
        let points: Vec<f64> = (0..=40).map(|i| inv(a + (b - a) * i as f64 / 40.0)).collect();
        let fb = init_filterbank(InitScheme::Mel, 40, 129, SR).unwrap();
        for (i, f) in fb.filters.iter().enumerate() {
            assert!(approx(f.f_low, points[i], 1e-6), "low {i}");
            assert!(approx(f.f_high, points[i + 1].max(points[i] + 50.0), 1e-6), "high {i}");
        }
    }

    #[test]
    fn uniform_init_is_seeded_and_ordered() {
        let a = init_filterbank(InitScheme::Uniform { seed: 7 }, 40, 129, SR).unwrap();
        let b = init_filterbank(InitScheme::Uniform { seed: 7 }, 40, 129, SR).unwrap();
        let c = init_filterbank(InitScheme::Uniform { seed: 8 }, 40, 129, SR).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for w in a.filters.windows(2) {
            assert!(w[0].f_low <= w[1].f_low);
            assert!(w[0].f_high <= w[1].f_high);
        }
        assert_eq!(a.filters[39].f_high, 7920.0);
        a.validate().unwrap();
    }

    #[test]
    fn init_errors() {
        assert!(init_filterbank(InitScheme::Mel, 0, 129, SR).is_err());
        assert!(init_filterbank(InitScheme::Mel, 4, 129, 100.0).is_err());
        assert!(init_filterbank(InitScheme::Mel, 4, 128, SR).is_err());
    }

    #[test]
    fn constrain_examples() {
        let mut fb = init_filterbank(InitScheme::Mel, 4, 129, SR).unwrap();
        assert_eq!(constrain_filterbank(&fb), fb);
        fb.filters[0] = SincFilter::new(10.0, 20.0);
        fb.filters[1] = SincFilter::new(4000.0, 3990.0);
        let c = constrain_filterbank(&fb);
        assert_eq!(c.filters[0], SincFilter::new(30.0, 80.0));
        assert_eq!(c.filters[1], SincFilter::new(4000.0, 4050.0));
    }

    #[test]
    fn response_trivial_cases() {
        assert!(frequency_response(&[0.0; 8], 16).unwrap().iter().all(|&v| v == 0.0));
        let mut imp = vec![0.0; 8];
        imp[0] = 1.0;
        let r = frequency_response(&imp, 16).unwrap();
        assert_eq!(r.len(), 9);
        assert!(r.iter().all(|&v| approx(v, 1.0, 1e-15)));
        assert!(frequency_response(&imp, 4).is_err());
        assert!(frequency_response(&imp, 12).is_err());
    }

    #[test]
    fn response_is_band_pass() {
        // Oracle: direct DFT sum, independent of the FFT path.
        let k = windowed_kernel(&SincFilter::new(300.0, 2300.0), 129, SR).unwrap();
        let n_fft = 1024;
        let direct: Vec<f64> = (0..=n_fft / 2)
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in k.iter().enumerate() {
                    let ph = -2.0 * PI * (b * n) as f64 / n_fft as f64;
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
                re.hypot(im)
            })
            .collect();
        let r = frequency_response(&k, n_fft).unwrap();
        for (a, b) in r.iter().zip(&direct) {
            assert!(approx(*a, *b, 1e-12));
        }
        let (mut inside, mut outside) = (vec![], vec![]);
        for (b, &m) in direct.iter().enumerate() {
            let hz = b as f64 * SR / n_fft as f64;
            if hz > 300.0 && hz < 2300.0 {
                inside.push(m);
            } else {
                outside.push(m);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let db = 20.0 * (mean(&inside) / mean(&outside)).log10();
        assert!(db >= 20.0, "in/out ratio {db} dB");
    }

    #[test]
    fn json_round_trip() {
        let fb = init_filterbank(InitScheme::Mel, 5, 65, SR).unwrap();
        let s = fb.to_json().unwrap();
        assert!(s.contains("f_low_hz"));
        assert_eq!(SincFilterbank::from_json(&s).unwrap(), fb);
    }
}
