use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm, batchnorm_backward, conv1d, conv1d_backward, maxpool1d, maxpool1d_backward, relu,
    relu_backward, scale_channels, scale_channels_backward, BnCache, BnMode, ConvShape, Tensor,
    BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::filterbank::{init_filterbank, kernel_partials, windowed_kernel, InitScheme, SincFilterbank};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    SincConv {
        channels: usize,
        kernel_size: usize,
    },
    Conv {
        channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        dilation: usize,
    },
    MaxPool {
        pool_size: usize,
    },
    BatchNorm,
    Relu,
    /// Averages logits over the remaining time axis, then softmax.
    Softmax,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub input_samples: usize,
    pub n_classes: usize,
    pub sample_rate: f64,
    /// Standardize each frame to zero mean and unit variance before the sinc layer.
    #[serde(default = "yes")]
    pub normalize_input: bool,
}

impl ModelSpec {
    /// Full-scale topology: 40 sinc filters of length 129, five dilated
    /// 800-wide conv blocks, a 1x1 conv and a 3976-way output.
    pub fn table1() -> Self {
        use LayerSpec::*;
        let block = |dilation| {
            [
                Conv {
                    channels: 800,
                    kernel_size: 2,
                    dilation,
                },
                Relu,
                BatchNorm,
            ]
        };
        let mut layers = vec![
            SincConv {
                channels: 40,
                kernel_size: 129,
            },
            MaxPool { pool_size: 3 },
        ];
        for (dilation, pool) in [(1, 3), (3, 3), (6, 3), (9, 2)] {
            layers.extend(block(dilation));
            layers.push(MaxPool { pool_size: pool });
        }
        layers.extend(block(6));
        layers.extend([
            Conv {
                channels: 800,
                kernel_size: 1,
                dilation: 1,
            },
            Relu,
            Conv {
                channels: 3976,
                kernel_size: 1,
                dilation: 1,
            },
            Softmax,
        ]);
        Self {
            layers,
            input_samples: 3200,
            n_classes: 3976,
            sample_rate: 16000.0,
            normalize_input: true,
        }
    }

    /// Small variant: sinc layer, two dilated conv blocks and a 1x1 output conv.
    pub fn toy(n_filters: usize, filter_length: usize, width: usize, n_classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            layers: vec![
                SincConv {
                    channels: n_filters,
                    kernel_size: filter_length,
                },
                MaxPool { pool_size: 3 },
                Conv {
                    channels: width,
                    kernel_size: 2,
                    dilation: 1,
                },
                Relu,
                BatchNorm,
                MaxPool { pool_size: 3 },
                Conv {
                    channels: width,
                    kernel_size: 2,
                    dilation: 3,
                },
                Relu,
                BatchNorm,
                MaxPool { pool_size: 3 },
                Conv {
                    channels: n_classes,
                    kernel_size: 1,
                    dilation: 1,
                },
                Softmax,
            ],
            input_samples: 3200,
            n_classes,
            sample_rate: 16000.0,
            normalize_input: true,
        }
    }

    /// Sinc filter count and length.
    pub fn sinc_layer(&self) -> Result<(usize, usize)> {
        match self.layers.first() {
            Some(LayerSpec::SincConv {
                channels,
                kernel_size,
            }) => Ok((*channels, *kernel_size)),
            _ => Err(Error::Spec("first layer must be sinc_conv".into())),
        }
    }

    /// Validates the topology and returns `(channels, time)` after each layer.
    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        self.sinc_layer()?;
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Spec("last layer must be softmax".into()));
        }
        let mut ch = 1;
        let mut t = self.input_samples;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::SincConv {
                    channels,
                    kernel_size,
                } => {
                    if i != 0 {
                        return Err(Error::Spec("sinc_conv only allowed as first layer".into()));
                    }
                    if channels == 0 || kernel_size % 2 == 0 {
                        return Err(Error::Spec("sinc_conv needs filters and an odd length".into()));
                    }
                    if t < kernel_size {
                        return Err(Error::Spec("input shorter than sinc kernel".into()));
                    }
                    ch = channels;
                    t = t - kernel_size + 1;
                }
                LayerSpec::Conv {
                    channels,
                    kernel_size,
                    dilation,
                } => {
                    if channels == 0 || kernel_size == 0 || dilation == 0 {
                        return Err(Error::Spec(format!("layer {i}: degenerate conv")));
                    }
                    let span = (kernel_size - 1) * dilation + 1;
                    if t < span {
                        return Err(Error::Spec(format!(
                            "layer {i}: time length {t} shorter than receptive field {span}"
                        )));
                    }
                    ch = channels;
                    t -= span - 1;
                }
                LayerSpec::MaxPool { pool_size } => {
                    if pool_size == 0 || t < pool_size {
                        return Err(Error::Spec(format!("layer {i}: bad pool size {pool_size}")));
                    }
                    t /= pool_size;
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => {}
                LayerSpec::Softmax => {
                    if i != self.layers.len() - 1 {
                        return Err(Error::Spec("softmax must be the last layer".into()));
                    }
                    if ch != self.n_classes {
                        return Err(Error::Spec(format!(
                            "output has {ch} channels for {} classes",
                            self.n_classes
                        )));
                    }
                }
            }
            out.push((ch, t));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    SincCutoffs,
    Lhuc0,
    Lhuc1,
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl GroupKind {
    /// Whether gradients exist for this group. Running statistics are
    /// counted as parameters but never trained.
    pub fn is_trainable(self) -> bool {
        !matches!(self, GroupKind::BnRunningMean | GroupKind::BnRunningVar)
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(
            self,
            GroupKind::BnScale | GroupKind::BnShift | GroupKind::BnRunningMean | GroupKind::BnRunningVar
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub kind: GroupKind,
    pub shape: Vec<usize>,
    /// Layer block the group belongs to (1 = sinc layer).
    pub block: usize,
}

impl GroupInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LhucSite {
    SincOutput,
    Conv1Output,
}

#[derive(Debug, Clone, PartialEq)]
enum LayerParams {
    None,
    Conv {
        shape: ConvShape,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        scale: Vec<f64>,
        shift: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub filterbank: SincFilterbank,
    pub seed: u64,
    params: Vec<LayerParams>,
    blocks: Vec<usize>,
    lhuc0: bool,
    lhuc1: Option<Vec<f64>>,
    lhuc1_after: usize,
    conv1_width: usize,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Pool(Vec<usize>),
    Bn(BnCache),
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    lhuc1_input: Option<Tensor>,
    bn_mode: BnMode,
}

/// Standardizes a frame to zero mean and unit variance. Constant frames
/// are only centred.
pub fn normalize_frame(frame: &[f64]) -> Vec<f64> {
    let n = frame.len() as f64;
    let mean = frame.iter().sum::<f64>() / n;
    let var = frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let inv = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    frame.iter().map(|v| (v - mean) * inv).collect()
}

impl Model {
    /// Allocates all parameters. Conv weights are drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` with a ChaCha8 stream seeded by
    /// `seed`; biases start at zero; batchnorm starts as the identity.
    pub fn build(spec: &ModelSpec, init: InitScheme, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let (n_filters, filter_length) = spec.sinc_layer()?;
        let filterbank = init_filterbank(init, n_filters, filter_length, spec.sample_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut blocks = Vec::with_capacity(spec.layers.len());
        let mut block = 1;
        let mut in_ch = 1;
        let mut first_conv = None;
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    channels,
                    kernel_size,
                    dilation,
                } => {
                    block += 1;
                    let shape = ConvShape {
                        in_channels: in_ch,
                        out_channels: channels,
                        kernel_size,
                        dilation,
                    };
                    let bound = (6.0 / (in_ch * kernel_size) as f64).sqrt();
                    let weight = (0..shape.weight_len())
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    params.push(LayerParams::Conv {
                        shape,
                        weight,
                        bias: vec![0.0; channels],
                    });
                    first_conv.get_or_insert(i);
                }
                LayerSpec::BatchNorm => params.push(LayerParams::BatchNorm {
                    scale: vec![1.0; in_ch],
                    shift: vec![0.0; in_ch],
                    mean: vec![0.0; in_ch],
                    var: vec![1.0; in_ch],
                }),
                _ => params.push(LayerParams::None),
            }
            blocks.push(block);
            in_ch = shapes[i].0;
        }
        // LHUC1 sits after the first conv and the element-wise layers that follow it.
        let (lhuc1_after, conv1_width) = match first_conv {
            Some(c) => {
                let mut j = c;
                while matches!(spec.layers.get(j + 1), Some(LayerSpec::Relu | LayerSpec::BatchNorm)) {
                    j += 1;
                }
                (j, shapes[c].0)
            }
            None => (0, 0),
        };
        Ok(Self {
            spec: spec.clone(),
            filterbank,
            seed,
            params,
            blocks,
            lhuc0: false,
            lhuc1: None,
            lhuc1_after,
            conv1_width,
        })
    }

    pub fn attach_lhuc(&mut self, site: LhucSite) -> Result<()> {
        match site {
            LhucSite::SincOutput => self.lhuc0 = true,
            LhucSite::Conv1Output => {
                if self.conv1_width == 0 {
                    return Err(Error::Spec("model has no conv layer for LHUC1".into()));
                }
                if self.lhuc1.is_none() {
                    self.lhuc1 = Some(vec![1.0; self.conv1_width]);
                }
            }
        }
        Ok(())
    }

    pub fn has_lhuc(&self, site: LhucSite) -> bool {
        match site {
            LhucSite::SincOutput => self.lhuc0,
            LhucSite::Conv1Output => self.lhuc1.is_some(),
        }
    }

    /// Parameter groups in stable manifest order.
    pub fn groups(&self) -> Vec<GroupInfo> {
        let n = self.filterbank.len();
        let mut out = vec![GroupInfo {
            name: "sinc.cutoffs".into(),
            kind: GroupKind::SincCutoffs,
            shape: vec![n, 2],
            block: 1,
        }];
        if self.lhuc0 {
            out.push(GroupInfo {
                name: "lhuc0.scale".into(),
                kind: GroupKind::Lhuc0,
                shape: vec![n],
                block: 1,
            });
        }
        for (i, p) in self.params.iter().enumerate() {
            let b = self.blocks[i];
            match p {
                LayerParams::Conv { shape, .. } => {
                    out.push(GroupInfo {
                        name: format!("conv{b}.weight"),
                        kind: GroupKind::ConvWeight,
                        shape: vec![shape.out_channels, shape.in_channels, shape.kernel_size],
                        block: b,
                    });
                    out.push(GroupInfo {
                        name: format!("conv{b}.bias"),
                        kind: GroupKind::ConvBias,
                        shape: vec![shape.out_channels],
                        block: b,
                    });
                }
                LayerParams::BatchNorm { scale, .. } => {
                    let c = scale.len();
                    for (suffix, kind) in [
                        ("scale", GroupKind::BnScale),
                        ("shift", GroupKind::BnShift),
                        ("running_mean", GroupKind::BnRunningMean),
                        ("running_var", GroupKind::BnRunningVar),
                    ] {
                        out.push(GroupInfo {
                            name: format!("bn{b}.{suffix}"),
                            kind,
                            shape: vec![c],
                            block: b,
                        });
                    }
                }
                LayerParams::None => {}
            }
            if i == self.lhuc1_after {
                if let Some(r) = &self.lhuc1 {
                    out.push(GroupInfo {
                        name: "lhuc1.scale".into(),
                        kind: GroupKind::Lhuc1,
                        shape: vec![r.len()],
                        block: b,
                    });
                }
            }
        }
        out
    }

    pub fn group(&self, name: &str) -> Result<GroupInfo> {
        self.groups()
            .into_iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.into()))
    }

    /// Total parameter count, including all four batchnorm vectors and any
    /// attached LHUC scalers.
    pub fn param_count(&self) -> usize {
        self.groups().iter().map(GroupInfo::len).sum()
    }

    /// Parameter count per block (row 1 is the sinc layer).
    pub fn block_param_counts(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for g in self.groups() {
            match out.last_mut() {
                Some((b, n)) if *b == g.block => *n += g.len(),
                _ => out.push((g.block, g.len())),
            }
        }
        out
    }

    /// Layer index and parameter slot for a conv/batchnorm group name.
    fn locate<'a>(&self, name: &'a str) -> Result<(usize, &'a str)> {
        let unknown = || Error::UnknownGroup(name.into());
        let (head, field) = name.split_once('.').ok_or_else(unknown)?;
        let (prefix, block) = if let Some(b) = head.strip_prefix("conv") {
            ("conv", b)
        } else if let Some(b) = head.strip_prefix("bn") {
            ("bn", b)
        } else {
            return Err(unknown());
        };
        let block: usize = block.parse().map_err(|_| unknown())?;
        let idx = self
            .params
            .iter()
            .enumerate()
            .find(|(i, p)| {
                self.blocks[*i] == block
                    && match p {
                        LayerParams::Conv { .. } => prefix == "conv",
                        LayerParams::BatchNorm { .. } => prefix == "bn",
                        LayerParams::None => false,
                    }
            })
            .map(|(i, _)| i)
            .ok_or_else(unknown)?;
        Ok((idx, field))
    }

    /// Raw stored values of a group. Cut-offs are `[f_low, f_high]` pairs in Hz.
    pub fn group_values(&self, name: &str) -> Result<Vec<f64>> {
        match name {
            "sinc.cutoffs" => Ok(self
                .filterbank
                .filters
                .iter()
                .flat_map(|f| [f.f_low, f.f_high])
                .collect()),
            "lhuc0.scale" if self.lhuc0 => Ok(self.filterbank.gains.clone()),
            "lhuc1.scale" if self.lhuc1.is_some() => Ok(self.lhuc1.clone().unwrap_or_default()),
            _ => {
                let (idx, field) = self.locate(name)?;
                let v = match (&self.params[idx], field) {
                    (LayerParams::Conv { weight, .. }, "weight") => weight,
                    (LayerParams::Conv { bias, .. }, "bias") => bias,
                    (LayerParams::BatchNorm { scale, .. }, "scale") => scale,
                    (LayerParams::BatchNorm { shift, .. }, "shift") => shift,
                    (LayerParams::BatchNorm { mean, .. }, "running_mean") => mean,
                    (LayerParams::BatchNorm { var, .. }, "running_var") => var,
                    _ => return Err(Error::UnknownGroup(name.into())),
                };
                Ok(v.clone())
            }
        }
    }

    /// Overwrites a group with raw values. Cut-offs are projected onto the
    /// admissible set afterwards.
    pub fn set_group_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let info = self.group(name)?;
        if values.len() != info.len() {
            return Err(Error::Shape(format!(
                "group {name} expects {} values, got {}",
                info.len(),
                values.len()
            )));
        }
        let sr = self.filterbank.sample_rate;
        match name {
            "sinc.cutoffs" => {
                for (f, pair) in self.filterbank.filters.iter_mut().zip(values.chunks(2)) {
                    f.f_low = pair[0];
                    f.f_high = pair[1];
                    *f = f.constrained(sr);
                }
            }
            "lhuc0.scale" => self.filterbank.gains.copy_from_slice(values),
            "lhuc1.scale" => {
                if let Some(r) = self.lhuc1.as_mut() {
                    r.copy_from_slice(values);
                }
            }
            _ => {
                let (idx, field) = self.locate(name)?;
                let slot = match (&mut self.params[idx], field) {
                    (LayerParams::Conv { weight, .. }, "weight") => weight,
                    (LayerParams::Conv { bias, .. }, "bias") => bias,
                    (LayerParams::BatchNorm { scale, .. }, "scale") => scale,
                    (LayerParams::BatchNorm { shift, .. }, "shift") => shift,
                    (LayerParams::BatchNorm { mean, .. }, "running_mean") => mean,
                    (LayerParams::BatchNorm { var, .. }, "running_var") => var,
                    _ => return Err(Error::UnknownGroup(name.into())),
                };
                slot.copy_from_slice(values);
            }
        }
        Ok(())
    }

    /// Multiplier from raw storage units to optimization units. Cut-offs
    /// are optimized as normalized frequencies `f / sample_rate`; every other
    /// group is optimized as stored.
    pub fn optimization_scale(&self, name: &str) -> f64 {
        if name == "sinc.cutoffs" {
            1.0 / self.filterbank.sample_rate
        } else {
            1.0
        }
    }

    /// Runs the network on a batch of frames. Pure: batchnorm running
    /// statistics are only changed by [`Model::update_running_stats`].
    /// Returns time-averaged logits per frame.
    pub fn forward(&self, frames: &[&[f64]], bn_mode: BnMode) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        if frames.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let samples = self.spec.input_samples;
        let mut data = Vec::with_capacity(frames.len() * samples);
        for f in frames {
            if f.len() != samples {
                return Err(Error::Shape(format!(
                    "frame has {} samples, model expects {samples}",
                    f.len()
                )));
            }
            if self.spec.normalize_input {
                data.extend(normalize_frame(f));
            } else {
                data.extend_from_slice(f);
            }
        }
        let mut x = Tensor::from_vec(frames.len(), 1, samples, data)?;
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut aux = Vec::with_capacity(self.spec.layers.len());
        let mut lhuc1_input = None;

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (y, a) = match (layer, &self.params[i]) {
                (LayerSpec::SincConv { .. }, _) => {
                    let fb = &self.filterbank;
                    let shape = ConvShape {
                        in_channels: 1,
                        out_channels: fb.len(),
                        kernel_size: fb.filter_length,
                        dilation: 1,
                    };
                    let k = fb.kernels()?;
                    (conv1d(&x, &k, &vec![0.0; fb.len()], &shape)?, Aux::None)
                }
                (LayerSpec::Conv { .. }, LayerParams::Conv { shape, weight, bias }) => {
                    (conv1d(&x, weight, bias, shape)?, Aux::None)
                }
                (LayerSpec::MaxPool { pool_size }, _) => {
                    let (y, arg) = maxpool1d(&x, *pool_size)?;
                    (y, Aux::Pool(arg))
                }
                (LayerSpec::Relu, _) => (relu(&x), Aux::None),
                (
                    LayerSpec::BatchNorm,
                    LayerParams::BatchNorm {
                        scale,
                        shift,
                        mean,
                        var,
                    },
                ) => {
                    let (y, c) = batchnorm(&x, scale, shift, mean, var, bn_mode)?;
                    (y, Aux::Bn(c))
                }
                (LayerSpec::Softmax, _) => {
                    let t = x.time as f64;
                    let mut y = Tensor::zeros(x.batch, x.channels, 1);
                    for b in 0..x.batch {
                        for c in 0..x.channels {
                            y.row_mut(b, c)[0] = x.row(b, c).iter().sum::<f64>() / t;
                        }
                    }
                    (y, Aux::None)
                }
                _ => return Err(Error::Spec(format!("layer {i} has no parameters"))),
            };
            let mut y = y;
            if i == self.lhuc1_after {
                if let Some(r) = &self.lhuc1 {
                    let scaled = scale_channels(&y, r)?;
                    lhuc1_input = Some(std::mem::replace(&mut y, scaled));
                }
            }
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(a);
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                context: "forward logits".into(),
            });
        }
        let logits = (0..x.batch).map(|b| x.data[b * x.channels..(b + 1) * x.channels].to_vec()).collect();
        Ok((
            logits,
            ForwardCache {
                inputs,
                aux,
                lhuc1_input,
                bn_mode,
            },
        ))
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if !cache.bn_mode.uses_batch_stats() {
            return;
        }
        for (p, a) in self.params.iter_mut().zip(&cache.aux) {
            if let (LayerParams::BatchNorm { mean, var, .. }, Aux::Bn(c)) = (p, a) {
                for ch in 0..mean.len() {
                    mean[ch] = BN_MOMENTUM * mean[ch] + (1.0 - BN_MOMENTUM) * c.batch_mean[ch];
                    var[ch] = BN_MOMENTUM * var[ch] + (1.0 - BN_MOMENTUM) * c.batch_var[ch];
                }
            }
        }
    }

    /// Back-propagates `d loss / d logits` and returns gradients for the
    /// groups accepted by `select`. Cut-off gradients are with respect to
    /// normalized frequency (see [`Model::optimization_scale`]). Batchnorm
    /// scale/shift get no gradient after a frozen-mode forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[Vec<f64>],
        select: impl Fn(&str) -> bool,
    ) -> Result<Gradients> {
        let n_layers = self.spec.layers.len();
        if cache.inputs.len() != n_layers {
            return Err(Error::MissingCache);
        }
        let batch = cache.inputs[0].batch;
        if d_logits.len() != batch || d_logits.iter().any(|d| d.len() != self.spec.n_classes) {
            return Err(Error::Shape("logit gradient does not match batch".into()));
        }
        let bn_grads = cache.bn_mode != BnMode::Frozen;
        let wants = |info: &GroupInfo| {
            info.kind.is_trainable() && (bn_grads || !info.kind.is_batchnorm()) && select(&info.name)
        };
        let groups = self.groups();
        // Earliest layer that owns a selected group; back-propagation stops there.
        let mut earliest = None;
        for g in groups.iter().filter(|g| wants(g)) {
            let layer = match g.kind {
                GroupKind::SincCutoffs | GroupKind::Lhuc0 => 0,
                GroupKind::Lhuc1 => self.lhuc1_after,
                _ => self.locate(&g.name)?.0,
            };
            earliest = Some(earliest.map_or(layer, |e: usize| e.min(layer)));
        }
        let mut grads = Gradients::new();
        let Some(stop) = earliest else {
            return Ok(grads);
        };
        let want_name = |name: &str| groups.iter().any(|g| g.name == name && wants(g));

        let k = self.spec.n_classes;
        let mut d = Tensor::from_vec(batch, k, 1, d_logits.concat())?;
        for i in (stop..n_layers).rev() {
            let b = self.blocks[i];
            if i == self.lhuc1_after {
                if let (Some(r), Some(x)) = (&self.lhuc1, &cache.lhuc1_input) {
                    let (dx, dr) = scale_channels_backward(x, r, &d);
                    if want_name("lhuc1.scale") {
                        grads.insert("lhuc1.scale".into(), dr);
                    }
                    d = dx;
                }
            }
            let x = &cache.inputs[i];
            d = match (&self.spec.layers[i], &self.params[i], &cache.aux[i]) {
                (LayerSpec::Softmax, _, _) => {
                    let t = x.time as f64;
                    let mut dx = Tensor::zeros(x.batch, x.channels, x.time);
                    for bi in 0..x.batch {
                        for c in 0..x.channels {
                            let g = d.row(bi, c)[0] / t;
                            dx.row_mut(bi, c).fill(g);
                        }
                    }
                    dx
                }
                (LayerSpec::Conv { .. }, LayerParams::Conv { shape, weight, .. }, _) => {
                    let g = conv1d_backward(x, weight, &d, shape, i > stop)?;
                    for (field, v) in [("weight", g.weight), ("bias", g.bias)] {
                        let name = format!("conv{b}.{field}");
                        if want_name(&name) {
                            grads.insert(name, v);
                        }
                    }
                    match g.input {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerSpec::MaxPool { .. }, _, Aux::Pool(arg)) => maxpool1d_backward(x.shape(), arg, &d),
                (LayerSpec::Relu, _, _) => relu_backward(x, &d),
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { scale, .. }, Aux::Bn(c)) => {
                    let g = batchnorm_backward(c, scale, &d);
                    for (field, v) in [("scale", g.scale), ("shift", g.shift)] {
                        let name = format!("bn{b}.{field}");
                        if want_name(&name) {
                            grads.insert(name, v);
                        }
                    }
                    g.input
                }
                (LayerSpec::SincConv { .. }, _, _) => {
                    self.sinc_backward(x, &d, &want_name, &mut grads)?;
                    break;
                }
                _ => return Err(Error::MissingCache),
            };
        }
        for (name, v) in &grads {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
        }
        Ok(grads)
    }

    fn sinc_backward(
        &self,
        x: &Tensor,
        d: &Tensor,
        want: &dyn Fn(&str) -> bool,
        grads: &mut Gradients,
    ) -> Result<()> {
        let fb = &self.filterbank;
        let len = fb.filter_length;
        let shape = ConvShape {
            in_channels: 1,
            out_channels: fb.len(),
            kernel_size: len,
            dilation: 1,
        };
        let k = fb.kernels()?;
        let dk = conv1d_backward(x, &k, d, &shape, false)?.weight;
        let sr = fb.sample_rate;
        let want_cut = want("sinc.cutoffs");
        let want_gain = want("lhuc0.scale");
        let mut d_cut = Vec::with_capacity(2 * fb.len());
        let mut d_gain = Vec::with_capacity(fb.len());
        for (j, f) in fb.filters.iter().enumerate() {
            let dkj = &dk[j * len..(j + 1) * len];
            if want_cut {
                let (p_lo, p_hi) = kernel_partials(f, len, sr)?;
                let g = fb.gains[j] * sr;
                d_cut.push(g * super::layers::dot(dkj, &p_lo));
                d_cut.push(g * super::layers::dot(dkj, &p_hi));
            }
            if want_gain {
                let gw = windowed_kernel(f, len, sr)?;
                d_gain.push(super::layers::dot(dkj, &gw));
            }
        }
        if want_cut {
            grads.insert("sinc.cutoffs".into(), d_cut);
        }
        if want_gain {
            grads.insert("lhuc0.scale".into(), d_gain);
        }
        Ok(())
    }

    /// Mean cross-entropy over a labelled batch, and its gradient.
    pub fn loss_and_grad(
        &self,
        frames: &[&[f64]],
        labels: &[usize],
        bn_mode: BnMode,
        select: impl Fn(&str) -> bool,
    ) -> Result<(f64, Gradients, ForwardCache)> {
        let (logits, cache) = self.forward(frames, bn_mode)?;
        let (loss, d) = batch_xent(&logits, labels)?;
        let grads = self.backward(&cache, &d, select)?;
        Ok((loss, grads, cache))
    }
}

/// Mean softmax cross-entropy over a batch, with per-example logit gradients
/// already divided by the batch size.
pub fn batch_xent(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let (l, mut g) = super::layers::softmax_xent(z, y)?;
        total += l;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}
