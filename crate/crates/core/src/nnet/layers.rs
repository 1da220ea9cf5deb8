//! Forward and backward kernels for the fixed layer set.
//!
//! Activations are `(batch, channels, time)` tensors stored row-major. All
//! reductions run in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub channels: usize,
    pub time: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, channels: usize, time: usize) -> Self {
        Self {
            batch,
            channels,
            time,
            data: vec![0.0; batch * channels * time],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, time: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * time {
            return Err(Error::Shape(format!(
                "{} values for shape ({batch}, {channels}, {time})",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            time,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.time)
    }

    /// Samples of one `(batch, channel)` row.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.time;
        &self.data[start..start + self.time]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.time;
        &mut self.data[start..start + self.time]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Four-lane dot product; fixed association order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size
    }

    pub fn span(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }

    pub fn out_len(&self, in_len: usize) -> Option<usize> {
        (in_len >= self.span()).then(|| in_len - (self.span() - 1))
    }
}

fn check_conv(x: &Tensor, w: &[f64], bias: &[f64], s: &ConvShape) -> Result<usize> {
    if s.dilation == 0 || s.kernel_size == 0 {
        return Err(Error::Shape("kernel size and dilation must be >= 1".into()));
    }
    if x.channels != s.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            s.in_channels, x.channels
        )));
    }
    if w.len() != s.weight_len() || bias.len() != s.out_channels {
        return Err(Error::Shape(format!(
            "conv weights {} / bias {} do not match {:?}",
            w.len(),
            bias.len(),
            s
        )));
    }
    s.out_len(x.time).ok_or_else(|| {
        Error::Shape(format!(
            "input length {} shorter than receptive field {}",
            x.time,
            s.span()
        ))
    })
}

/// Valid dilated cross-correlation with stride 1. Weights are
/// `(out, in, kernel)` row-major.
pub fn conv1d(x: &Tensor, w: &[f64], bias: &[f64], s: &ConvShape) -> Result<Tensor> {
    let t_out = check_conv(x, w, bias, s)?;
    let mut y = Tensor::zeros(x.batch, s.out_channels, t_out);
    for b in 0..x.batch {
        for o in 0..s.out_channels {
            let row = y.row_mut(b, o);
            row.fill(bias[o]);
            for i in 0..s.in_channels {
                let xi = x.row(b, i);
                for k in 0..s.kernel_size {
                    let wk = w[(o * s.in_channels + i) * s.kernel_size + k];
                    let off = k * s.dilation;
                    axpy(wk, &xi[off..off + t_out], row);
                }
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of [`conv1d`]. The input gradient is skipped when `need_input`
/// is false (first layer).
pub fn conv1d_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    s: &ConvShape,
    need_input: bool,
) -> Result<ConvGrads> {
    let bias = vec![0.0; s.out_channels];
    let t_out = check_conv(x, w, &bias, s)?;
    if dy.shape() != (x.batch, s.out_channels, t_out) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output",
            dy.shape()
        )));
    }
    let mut dw = vec![0.0; s.weight_len()];
    let mut db = vec![0.0; s.out_channels];
    let mut dx = need_input.then(|| Tensor::zeros(x.batch, x.channels, x.time));
    for b in 0..x.batch {
        for o in 0..s.out_channels {
            let g = dy.row(b, o);
            db[o] += g.iter().sum::<f64>();
            for i in 0..s.in_channels {
                let xi = x.row(b, i);
                for k in 0..s.kernel_size {
                    let idx = (o * s.in_channels + i) * s.kernel_size + k;
                    let off = k * s.dilation;
                    dw[idx] += dot(g, &xi[off..off + t_out]);
                    if let Some(dx) = dx.as_mut() {
                        axpy(w[idx], g, &mut dx.row_mut(b, i)[off..off + t_out]);
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Non-overlapping max pooling; a trailing partial window is dropped.
/// Returns the pooled tensor and the flat input index of each maximum
/// (first maximum on ties).
pub fn maxpool1d(x: &Tensor, pool: usize) -> Result<(Tensor, Vec<usize>)> {
    if pool == 0 {
        return Err(Error::invalid("pool size must be >= 1"));
    }
    let t_out = x.time / pool;
    if t_out == 0 {
        return Err(Error::Shape(format!(
            "input length {} shorter than pool {pool}",
            x.time
        )));
    }
    let mut y = Tensor::zeros(x.batch, x.channels, t_out);
    let mut arg = Vec::with_capacity(y.data.len());
    for b in 0..x.batch {
        for c in 0..x.channels {
            let base = (b * x.channels + c) * x.time;
            let row = x.row(b, c);
            let out = y.row_mut(b, c);
            for (t, o) in out.iter_mut().enumerate() {
                let win = &row[t * pool..(t + 1) * pool];
                let mut best = 0;
                for j in 1..pool {
                    if win[j] > win[best] {
                        best = j;
                    }
                }
                *o = win[best];
                arg.push(base + t * pool + best);
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool1d_backward(input_shape: (usize, usize, usize), arg: &[usize], dy: &Tensor) -> Tensor {
    let (b, c, t) = input_shape;
    let mut dx = Tensor::zeros(b, c, t);
    for (&i, &g) in arg.iter().zip(&dy.data) {
        dx.data[i] += g;
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.max(0.0);
    }
    y
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics; scale and shift still receive gradients.
    Eval,
    /// Running statistics; no gradients and no statistic updates.
    Frozen,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        self == BnMode::Train
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub mode: BnMode,
}

/// Per-channel mean and biased variance over batch and time.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let m = (x.batch * x.time) as f64;
    let mut mean = vec![0.0; x.channels];
    let mut var = vec![0.0; x.channels];
    for c in 0..x.channels {
        let mut s = 0.0;
        for b in 0..x.batch {
            s += x.row(b, c).iter().sum::<f64>();
        }
        mean[c] = s / m;
        let mut q = 0.0;
        for b in 0..x.batch {
            q += x.row(b, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
        var[c] = q / m;
    }
    (mean, var)
}

pub fn batchnorm(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let c = x.channels;
    if [scale.len(), shift.len(), running_mean.len(), running_var.len()]
        .iter()
        .any(|&n| n != c)
    {
        return Err(Error::Shape(format!(
            "batchnorm parameters do not match {c} channels"
        )));
    }
    let (batch_mean, batch_var) = if mode.uses_batch_stats() {
        channel_stats(x)
    } else {
        (vec![], vec![])
    };
    let (mean, var) = if mode.uses_batch_stats() {
        (&batch_mean[..], &batch_var[..])
    } else {
        (running_mean, running_var)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = x.clone();
    let mut y = x.clone();
    for b in 0..x.batch {
        for ch in 0..c {
            let n = normalized.row_mut(b, ch);
            for v in n.iter_mut() {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
            let n = normalized.row(b, ch).to_vec();
            for (o, v) in y.row_mut(b, ch).iter_mut().zip(n) {
                *o = scale[ch] * v + shift[ch];
            }
        }
    }
    Ok((
        y,
        BnCache {
            normalized,
            inv_std,
            batch_mean,
            batch_var,
            mode,
        },
    ))
}

pub struct BnGrads {
    pub input: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn batchnorm_backward(cache: &BnCache, scale: &[f64], dy: &Tensor) -> BnGrads {
    let xh = &cache.normalized;
    let c = xh.channels;
    let m = (xh.batch * xh.time) as f64;
    let mut d_scale = vec![0.0; c];
    let mut d_shift = vec![0.0; c];
    for ch in 0..c {
        for b in 0..xh.batch {
            d_shift[ch] += dy.row(b, ch).iter().sum::<f64>();
            d_scale[ch] += dot(dy.row(b, ch), xh.row(b, ch));
        }
    }
    let mut dx = dy.clone();
    for b in 0..xh.batch {
        for ch in 0..c {
            let k = scale[ch] * cache.inv_std[ch];
            let xr = xh.row(b, ch).to_vec();
            let row = dx.row_mut(b, ch);
            if cache.mode.uses_batch_stats() {
                let mean_dy = d_shift[ch] / m;
                let mean_dy_xh = d_scale[ch] / m;
                for (d, xv) in row.iter_mut().zip(xr) {
                    *d = k * (*d - mean_dy - xv * mean_dy_xh);
                }
            } else {
                for d in row.iter_mut() {
                    *d *= k;
                }
            }
        }
    }
    BnGrads {
        input: dx,
        scale: d_scale,
        shift: d_shift,
    }
}

/// Multiplies channel `i` of every batch item by `r[i]`.
pub fn scale_channels(y: &Tensor, r: &[f64]) -> Result<Tensor> {
    if r.len() != y.channels {
        return Err(Error::Shape(format!(
            "{} scalers for {} channels",
            r.len(),
            y.channels
        )));
    }
    let mut out = y.clone();
    for b in 0..y.batch {
        for (c, &s) in r.iter().enumerate() {
            for v in out.row_mut(b, c) {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// Returns `(d input, d scalers)` for [`scale_channels`].
pub fn scale_channels_backward(x: &Tensor, r: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>) {
    let mut dr = vec![0.0; r.len()];
    let mut dx = dy.clone();
    for b in 0..x.batch {
        for (c, &s) in r.iter().enumerate() {
            dr[c] += dot(dy.row(b, c), x.row(b, c));
            for v in dx.row_mut(b, c) {
                *v *= s;
            }
        }
    }
    (dx, dr)
}

/// Cross-entropy of a logit vector against `label`, via log-sum-exp.
/// Returns the loss and `softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
