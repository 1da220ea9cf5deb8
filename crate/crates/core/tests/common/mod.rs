//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sincadapt::filterbank::{windowed_kernel, SincFilter};
use sincadapt::nnet::layers::{ConvShape, Tensor};
use sincadapt::nnet::{BnMode, LhucSite, Model, ModelSpec};
use sincadapt::filterbank::InitScheme;

/// Direct nested-loop valid dilated cross-correlation. Accumulates the bias
/// first, then input channels, then taps, for each output sample.
pub fn conv_oracle(x: &Tensor, w: &[f64], bias: &[f64], s: &ConvShape) -> Tensor {
    let span = (s.kernel_size - 1) * s.dilation + 1;
    let t_out = x.time + 1 - span;
    let mut y = Tensor::zeros(x.batch, s.out_channels, t_out);
    for b in 0..x.batch {
        for o in 0..s.out_channels {
            for t in 0..t_out {
                let mut acc = bias[o];
                for i in 0..s.in_channels {
                    for k in 0..s.kernel_size {
                        acc += w[(o * s.in_channels + i) * s.kernel_size + k] * x.row(b, i)[t + k * s.dilation];
                    }
                }
                y.row_mut(b, o)[t] = acc;
            }
        }
    }
    y
}

/// Non-overlapping max pooling by brute force; trailing samples dropped.
pub fn maxpool_oracle(x: &Tensor, pool: usize) -> Tensor {
    let t_out = x.time / pool;
    let mut y = Tensor::zeros(x.batch, x.channels, t_out);
    for b in 0..x.batch {
        for c in 0..x.channels {
            for t in 0..t_out {
                let mut m = f64::NEG_INFINITY;
                for j in 0..pool {
                    m = m.max(x.row(b, c)[t * pool + j]);
                }
                y.row_mut(b, c)[t] = m;
            }
        }
    }
    y
}

pub fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, t: usize) -> Tensor {
    Tensor::from_vec(b, c, t, (0..b * c * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Max over taps of |analytic - FD| divided by max |FD|, for both partials
/// of the windowed kernel. Central differences with step `h` Hz.
pub fn kernel_partial_error(f: &SincFilter, len: usize, sr: f64, h: f64) -> f64 {
    let (dl, dh) = sincadapt::filterbank::kernel_partials(f, len, sr).unwrap();
    let fd = |lo: f64, hi: f64, lo2: f64, hi2: f64| -> Vec<f64> {
        let a = windowed_kernel(&SincFilter::new(lo, hi), len, sr).unwrap();
        let b = windowed_kernel(&SincFilter::new(lo2, hi2), len, sr).unwrap();
        a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    };
    let fl = fd(f.f_low + h, f.f_high, f.f_low - h, f.f_high);
    let fh = fd(f.f_low, f.f_high + h, f.f_low, f.f_high - h);
    rel_err(&dl, &fl).max(rel_err(&dh, &fh))
}

/// Normwise relative error `max|a - b| / max|b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Toy model used for gradient checks, with both LHUC sites attached and
/// non-trivial values everywhere so that no group sits at a symmetric point.
pub fn gradcheck_model(seed: u64) -> Model {
    let mut m = Model::build(&ModelSpec::toy(8, 65, 16, 4), InitScheme::Mel, seed).unwrap();
    m.attach_lhuc(LhucSite::SincOutput).unwrap();
    m.attach_lhuc(LhucSite::Conv1Output).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for g in m.groups() {
        let v = m.group_values(&g.name).unwrap();
        let new: Vec<f64> = match g.name.as_str() {
            // Lift the lowest edge off its 30 Hz bound so both FD sides are feasible.
            "sinc.cutoffs" => v.iter().map(|f| f + 20.0 + rng.gen_range(0.0..10.0)).collect(),
            n if n.ends_with(".scale") => v.iter().map(|_| rng.gen_range(0.5..1.5)).collect(),
            n if n.ends_with(".bias") || n.ends_with(".shift") => v.iter().map(|_| rng.gen_range(-0.2..0.2)).collect(),
            n if n.ends_with("running_var") => v.iter().map(|_| rng.gen_range(0.5..2.0)).collect(),
            n if n.ends_with("running_mean") => v.iter().map(|_| rng.gen_range(-0.3..0.3)).collect(),
            _ => v,
        };
        m.set_group_values(&g.name, &new).unwrap();
    }
    m
}

pub fn random_frames(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f1 = rng.gen_range(200.0..3000.0);
            let f2 = rng.gen_range(200.0..6000.0);
            (0..len)
                .map(|t| {
                    let t = t as f64 / 16000.0;
                    (std::f64::consts::TAU * f1 * t).sin() + 0.5 * (std::f64::consts::TAU * f2 * t).sin()
                        + 0.3 * rng.gen_range(-1.0..1.0)
                })
                .collect()
        })
        .collect()
}

/// Per-group normwise relative error of analytic gradients against central
/// finite differences of the batch loss, every trainable group, in the
/// optimizer's units.
pub fn model_gradient_errors(model: &Model, frames: &[Vec<f64>], labels: &[usize], bn: BnMode) -> Vec<(String, f64)> {
    let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
    let (_, grads, _) = model.loss_and_grad(&refs, labels, bn, |_| true).unwrap();
    let loss_at = |m: &Model| -> f64 {
        let (logits, _) = m.forward(&refs, bn).unwrap();
        sincadapt::nnet::batch_xent(&logits, labels).unwrap().0
    };
    let mut out = Vec::new();
    for g in model.groups().into_iter().filter(|g| g.kind.is_trainable()) {
        let analytic = &grads[&g.name];
        let base = model.group_values(&g.name).unwrap();
        let scale = model.optimization_scale(&g.name);
        // Cut-offs move every sample of a channel at once, so maxpool winners
        // flip at much smaller steps than for single weights.
        let h = if scale == 1.0 { 1e-6 } else { 1e-8 };
        let mut fd = Vec::with_capacity(base.len());
        let mut m = model.clone();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h / scale;
            m.set_group_values(&g.name, &v).unwrap();
            let up = loss_at(&m);
            v[i] = base[i] - h / scale;
            m.set_group_values(&g.name, &v).unwrap();
            let down = loss_at(&m);
            fd.push((up - down) / (2.0 * h));
        }
        out.push((g.name.clone(), rel_err(analytic, &fd)));
    }
    out
}
