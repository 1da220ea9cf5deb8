//! Adam over named parameter groups, each with its own learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Gradients, Model};

/// Learning rate used for base training and most adaptation modes.
pub const DEFAULT_LR: f64 = 0.0015;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub learning_rate: f64,
    #[serde(default)]
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, learning_rate: f64) -> Self {
        Self {
            name: name.into(),
            learning_rate,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frozen && !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "group {} has non-positive learning rate {}",
                self.name, self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based step index.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// Applies one step to every non-frozen group that has a gradient.
    /// Groups without a gradient entry are left untouched. Cut-offs are
    /// updated in normalized-frequency units and re-projected onto their
    /// constraints by the model.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            g.validate()?;
            if let Some(v) = grads.get(&g.name) {
                if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {} at index {bad}", g.name),
                    });
                }
            }
        }
        self.state.step += 1;
        let step = self.state.step;
        for g in groups.iter().filter(|g| !g.frozen) {
            let Some(grad) = grads.get(&g.name) else {
                continue;
            };
            let raw = model.group_values(&g.name)?;
            if raw.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} values, group has {}",
                    g.name,
                    grad.len(),
                    raw.len()
                )));
            }
            let scale = model.optimization_scale(&g.name);
            let mut p: Vec<f64> = if scale == 1.0 {
                raw
            } else {
                raw.iter().map(|v| v * scale).collect()
            };
            let moments = self.state.moments.entry(g.name.clone()).or_default();
            adam_update(&mut p, grad, moments, step, g.learning_rate, &self.config);
            if scale != 1.0 {
                p.iter_mut().for_each(|v| *v /= scale);
            }
            model.set_group_values(&g.name, &p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::InitScheme;
    use crate::nnet::ModelSpec;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-3];
        let mut m = Moments::default();
        adam_update(&mut p, &g, &mut m, 1, 0.01, &AdamConfig::default());
        // Bias-corrected moments equal g and g^2, so the step is lr * g / (|g| + eps).
        let start = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let expect = start[i] - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-12, "{i}: {} vs {expect}", p[i]);
            assert_eq!((start[i] - p[i]).signum(), g[i].signum());
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut model = Model::build(&ModelSpec::toy(4, 65, 8, 3), InitScheme::Mel, 0).unwrap();
        let before = model.clone();
        let mut grads = Gradients::new();
        grads.insert("conv2.weight".into(), vec![0.0; model.group("conv2.weight").unwrap().len()]);
        let mut adam = Adam::default();
        adam.step(&mut model, &grads, &[ParamGroup::new("conv2.weight", 0.1)]).unwrap();
        assert_eq!(adam.state.step, 1);
        assert_eq!(model, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2 from x = 0. At lr = 0.05 the first-moment overshoot
        // never crosses the minimum within 100 steps.
        let f = |x: f64| (x - 3.0).powi(2);
        let mut x = [0.0];
        let f0 = f(x[0]);
        let mut m = Moments::default();
        let mut prev = f0;
        for step in 1..=100 {
            let g = [2.0 * (x[0] - 3.0)];
            adam_update(&mut x, &g, &mut m, step, 0.05, &AdamConfig::default());
            let cur = f(x[0]);
            assert!(cur < prev, "step {step}: {cur} >= {prev}");
            prev = cur;
        }
        assert!(prev < 1e-3 * f0, "{prev} vs {f0}");
    }

    #[test]
    fn frozen_groups_untouched() {
        let mut model = Model::build(&ModelSpec::toy(4, 65, 8, 3), InitScheme::Mel, 0).unwrap();
        let before = model.group_values("conv2.weight").unwrap();
        let mut grads = Gradients::new();
        grads.insert("conv2.weight".into(), vec![1.0; before.len()]);
        let mut group = ParamGroup::new("conv2.weight", 0.1);
        group.frozen = true;
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut model, &grads, std::slice::from_ref(&group)).unwrap();
        }
        assert_eq!(model.group_values("conv2.weight").unwrap(), before);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut model = Model::build(&ModelSpec::toy(4, 65, 8, 3), InitScheme::Mel, 0).unwrap();
        let mut grads = Gradients::new();
        grads.insert("conv2.bias".into(), vec![f64::NAN; 8]);
        let err = Adam::default()
            .step(&mut model, &grads, &[ParamGroup::new("conv2.bias", 0.1)])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn cutoff_steps_are_in_normalized_units_and_constrained() {
        let mut model = Model::build(&ModelSpec::toy(4, 65, 8, 3), InitScheme::Mel, 0).unwrap();
        let before = model.group_values("sinc.cutoffs").unwrap();
        let mut grads = Gradients::new();
        grads.insert("sinc.cutoffs".into(), vec![-1.0; 8]);
        let mut adam = Adam::default();
        adam.step(&mut model, &grads, &[ParamGroup::new("sinc.cutoffs", DEFAULT_LR)]).unwrap();
        let after = model.group_values("sinc.cutoffs").unwrap();
        // One step of size lr in f/sr is lr * sr = 24 Hz.
        for (a, b) in after.iter().zip(&before).skip(1).take(6) {
            assert!((a - b - 24.0).abs() < 1e-6, "{a} {b}");
        }
        // The top edge is pinned at Nyquist.
        assert!(after[7] <= 8000.0);
        model.filterbank.validate().unwrap();
    }

    #[test]
    fn bad_learning_rate_rejected() {
        let mut model = Model::build(&ModelSpec::toy(4, 65, 8, 3), InitScheme::Mel, 0).unwrap();
        let r = Adam::default().step(&mut model, &Gradients::new(), &[ParamGroup::new("conv2.bias", 0.0)]);
        assert!(r.is_err());
    }
}
