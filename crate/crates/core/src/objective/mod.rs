//! Training objectives.
//!
//! A step's loss is the base adversarial objective (AT, TRADES or MART)
//! averaged over the augmented branches plus `lambda` times a consistency
//! regularizer. Both the method and the regularizer are looked up by name.

pub mod attack_loss;
pub mod method;
pub mod prob;
pub mod regularizer;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::nn::{Grads, Mode, Tape};
use crate::scalar::Real;
use attack_loss::AttackLossKind;
use method::methods;
use prob::{kl_rows, mse_rows, ProbBatch};
use regularizer::regularizers;

pub use prob::{
    cross_entropy, cw_margin_loss, js_divergence, kl_divergence, softmax, softmax_temperature, ProbVector,
    PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// `at`, `trades` or `mart`.
    pub method: String,
    /// Name in the regularizer registry.
    pub regularizer: String,
    pub lambda: f64,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Apply `tau` to the MSE/KL/AugMix ablation regularizers as well.
    pub temper_ablation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: "at".into(),
            regularizer: "js_consistency".into(),
            lambda: 1.0,
            tau: 0.5,
            beta: 6.0,
            gamma: 6.0,
            temper_ablation: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        methods::<f32>()
            .get(&self.method)
            .map_err(|e| Error::config("loss.method", e.to_string()))?;
        regularizers::<f32>()
            .get(&self.regularizer)
            .map_err(|e| Error::config("loss.regularizer", e.to_string()))?;
        if !(self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be >= 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be > 0"));
        }
        Ok(())
    }

    /// Attack objective matching the configured method.
    pub fn attack_loss(&self) -> Result<AttackLossKind> {
        Ok(methods::<f32>().get(&self.method)?.attack_loss())
    }

    /// Augmented branches per training step.
    pub fn branches(&self) -> Result<usize> {
        Ok(regularizers::<f32>().get(&self.regularizer)?.branches())
    }
}

/// One augmented view: `T_i(x)` and its attacked counterpart.
#[derive(Debug, Clone)]
pub struct Branch<T: Real = f32> {
    pub clean: ImageBatch<T>,
    pub adversarial: ImageBatch<T>,
    /// Objective used to craft `adversarial`.
    pub attack_loss: AttackLossKind,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub params: bool,
    pub inputs: bool,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub total: T,
    /// Weighted terms summing to `total`.
    pub terms: Vec<(String, T)>,
    /// Sum of the base-method terms.
    pub adv_loss: T,
    /// `lambda` times the regularizer value.
    pub reg_loss: T,
    pub param_grads: Option<Grads<T>>,
    pub adv_input_grads: Vec<Option<Array4<T>>>,
    pub clean_input_grads: Vec<Option<Array4<T>>>,
    /// Tapes of every forward pass, in evaluation order.
    pub tapes: Vec<Tape<T>>,
}

impl<T: Real> LossOutput<T> {
    pub fn breakdown(&self) -> String {
        self.terms
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Full objective over augmented branches, with optional gradients.
pub fn total_loss<T: Real>(
    model: &Classifier<T>,
    branches: &[Branch<T>],
    labels: &[usize],
    config: &LossConfig,
    mode: Mode,
    want: GradRequest,
) -> Result<LossOutput<T>> {
    let method = methods::<T>().get(&config.method)?;
    let reg = regularizers::<T>().get(&config.regularizer)?;
    if branches.is_empty() || branches.len() < reg.branches() {
        return Err(Error::invalid(format!(
            "regularizer `{}` needs {} branches, got {}",
            config.regularizer,
            reg.branches(),
            branches.len()
        )));
    }
    for b in branches {
        if b.attack_loss != method.attack_loss() {
            return Err(Error::AttackLossMismatch {
                attack: b.attack_loss.to_string(),
                method: config.method.clone(),
                expected: method.attack_loss().to_string(),
            });
        }
    }
    let loss_range = reg.loss_branches(branches.len());
    let need_clean: Vec<bool> = (0..branches.len())
        .map(|i| reg.uses_clean() || (method.uses_clean() && loss_range.contains(&i)))
        .collect();

    let mut adv_logits = Vec::with_capacity(branches.len());
    let mut adv_tapes = Vec::with_capacity(branches.len());
    let mut clean_logits: Vec<Option<Array2<T>>> = Vec::with_capacity(branches.len());
    let mut clean_tapes: Vec<Option<Tape<T>>> = Vec::with_capacity(branches.len());
    for (b, &nc) in branches.iter().zip(&need_clean) {
        let (z, t) = model.forward_tape(b.adversarial.data(), mode)?;
        adv_logits.push(z);
        adv_tapes.push(t);
        if nc {
            let (z, t) = model.forward_tape(b.clean.data(), mode)?;
            clean_logits.push(Some(z));
            clean_tapes.push(Some(t));
        } else {
            clean_logits.push(None);
            clean_tapes.push(None);
        }
    }

    let mut d_adv: Vec<Array2<T>> = adv_logits.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut d_clean: Vec<Option<Array2<T>>> = clean_logits
        .iter()
        .map(|z| z.as_ref().map(|z| Array2::zeros(z.raw_dim())))
        .collect();

    let share = T::one() / T::of(loss_range.len() as f64);
    let mut terms: Vec<(String, T)> = Vec::new();
    for i in loss_range.clone() {
        let out = method.evaluate(&adv_logits[i], clean_logits[i].as_ref(), labels, config)?;
        for (name, v) in &out.terms {
            match terms.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 += *v * share,
                None => terms.push((name.to_string(), *v * share)),
            }
        }
        d_adv[i].scaled_add(share, &out.d_adv);
        if let (Some(dst), Some(src)) = (d_clean[i].as_mut(), out.d_clean.as_ref()) {
            dst.scaled_add(share, src);
        }
    }
    let adv_loss: T = terms.iter().map(|(_, v)| *v).sum();

    let lambda = T::of(config.lambda);
    let adv_refs: Vec<&Array2<T>> = adv_logits.iter().collect();
    let clean_refs: Vec<Option<&Array2<T>>> = clean_logits.iter().map(|z| z.as_ref()).collect();
    let reg_out = reg.evaluate(&adv_refs, &clean_refs, config)?;
    let reg_loss = lambda * reg_out.value;
    if config.regularizer != "none" {
        terms.push(("consistency".to_string(), reg_loss));
    }
    for (dst, src) in d_adv.iter_mut().zip(&reg_out.d_adv) {
        if let Some(src) = src {
            dst.scaled_add(lambda, src);
        }
    }
    for (dst, src) in d_clean.iter_mut().zip(&reg_out.d_clean) {
        if let (Some(dst), Some(src)) = (dst.as_mut(), src) {
            dst.scaled_add(lambda, src);
        }
    }

    let mut param_grads = want.params.then(|| model.net.params.zeros_like());
    let mut adv_input_grads = Vec::with_capacity(branches.len());
    let mut clean_input_grads = Vec::with_capacity(branches.len());
    if want.params || want.inputs {
        for i in 0..branches.len() {
            let dx = model.backward(&adv_tapes[i], &d_adv[i], param_grads.as_mut());
            adv_input_grads.push(want.inputs.then_some(dx));
            let dxc = match (&clean_tapes[i], &d_clean[i]) {
                (Some(t), Some(d)) => Some(model.backward(t, d, param_grads.as_mut())),
                _ => None,
            };
            clean_input_grads.push(if want.inputs { dxc } else { None });
        }
    }

    let mut tapes = Vec::new();
    for (a, c) in adv_tapes.into_iter().zip(clean_tapes) {
        tapes.push(a);
        if let Some(c) = c {
            tapes.push(c);
        }
    }
    Ok(LossOutput {
        total: adv_loss + reg_loss,
        terms,
        adv_loss,
        reg_loss,
        param_grads,
        adv_input_grads,
        clean_input_grads,
        tapes,
    })
}

fn eval_regularizer<T: Real>(
    model: &Classifier<T>,
    name: &str,
    adv: &[&ImageBatch<T>],
    clean: &[&ImageBatch<T>],
    config: &LossConfig,
    mode: Mode,
) -> Result<T> {
    let reg = regularizers::<T>().get(name)?;
    let adv_z = adv
        .iter()
        .map(|b| model.forward(b, mode))
        .collect::<Result<Vec<_>>>()?;
    let clean_z = clean
        .iter()
        .map(|b| model.forward(b, mode))
        .collect::<Result<Vec<_>>>()?;
    let adv_refs: Vec<&Array2<T>> = adv_z.iter().collect();
    let clean_refs: Vec<Option<&Array2<T>>> = clean_z.iter().map(Some).collect();
    Ok(reg.evaluate(&adv_refs, &clean_refs, config)?.value)
}

/// Mean JS divergence between temperature-scaled predictions of two attacked
/// augmented batches.
pub fn consistency_loss<T: Real>(
    model: &Classifier<T>,
    t1x_adv: &ImageBatch<T>,
    t2x_adv: &ImageBatch<T>,
    tau: f64,
    mode: Mode,
) -> Result<T> {
    let config = LossConfig {
        tau,
        ..LossConfig::default()
    };
    eval_regularizer(model, "js_consistency", &[t1x_adv, t2x_adv], &[], &config, mode)
}

/// JS consistency on clean augmented batches without temperature.
pub fn conventional_cr<T: Real>(model: &Classifier<T>, t1x: &ImageBatch<T>, t2x: &ImageBatch<T>, mode: Mode) -> Result<T> {
    eval_regularizer(
        model,
        "conventional_cr",
        &[t1x, t2x],
        &[t1x, t2x],
        &LossConfig::default(),
        mode,
    )
}

/// Batch-mean squared distance between two probability batches.
pub fn mse_cr<T: Real>(adv1: &ProbBatch<T>, adv2: &ProbBatch<T>) -> Result<T> {
    let (per, ..) = mse_rows(adv1.probs(), adv2.probs())?;
    Ok(per.iter().copied().sum::<T>() / T::of(per.len() as f64))
}

/// Batch-mean `KL(adv1 || adv2)`.
pub fn kl_cr<T: Real>(adv1: &ProbBatch<T>, adv2: &ProbBatch<T>) -> Result<T> {
    let (per, ..) = kl_rows(adv1.probs(), adv2.probs())?;
    Ok(per.iter().copied().sum::<T>() / T::of(per.len() as f64))
}

/// 3-way JS over a base-augmented and two richer-augmented attacked batches.
pub fn augmix_cr<T: Real>(
    model: &Classifier<T>,
    base_adv: &ImageBatch<T>,
    aug1_adv: &ImageBatch<T>,
    aug2_adv: &ImageBatch<T>,
    mode: Mode,
) -> Result<T> {
    eval_regularizer(
        model,
        "augmix_cr",
        &[base_adv, aug1_adv, aug2_adv],
        &[],
        &LossConfig::default(),
        mode,
    )
}
