//! Consistency regularizers across augmented branches.
//!
//! | name             | inputs                         | divergence            |
//! |------------------|--------------------------------|-----------------------|
//! | `none`           | -                              | 0                     |
//! | `js_consistency` | attacked branches, temperature | JS                    |
//! | `conventional_cr`| clean augmented branches       | JS                    |
//! | `mse_cr`         | attacked branches              | squared l2 of probs   |
//! | `kl_cr`          | attacked branches              | KL(branch 1 ‖ branch 2) |
//! | `augmix_cr`      | base + two attacked branches   | 3-way JS              |

use std::ops::Range;
use std::sync::Arc;

use ndarray::Array2;

use super::prob::{js_rows, kl_rows, mse_rows, softmax_temperature, ProbBatch};
use super::LossConfig;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct RegOutput<T: Real> {
    /// Unweighted batch-mean value.
    pub value: T,
    pub d_adv: Vec<Option<Array2<T>>>,
    pub d_clean: Vec<Option<Array2<T>>>,
}

pub trait Regularizer<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of augmented branches a training step must produce.
    fn branches(&self) -> usize {
        2
    }

    fn uses_clean(&self) -> bool {
        false
    }

    /// Branches whose base adversarial loss enters the objective.
    fn loss_branches(&self, n: usize) -> Range<usize> {
        0..n
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], config: &LossConfig) -> Result<RegOutput<T>>;
}

fn none_grads<T: Real>(n: usize) -> Vec<Option<Array2<T>>> {
    (0..n).map(|_| None).collect()
}

fn need<T: Real>(adv: &[&Array2<T>], n: usize, name: &str) -> Result<()> {
    if adv.len() < n {
        return Err(Error::invalid(format!("{name} needs {n} branches, got {}", adv.len())));
    }
    Ok(())
}

fn probs<T: Real>(logits: &Array2<T>, tau: f64) -> Result<ProbBatch<T>> {
    softmax_temperature(logits.view(), T::of(tau))
}

fn ablation_tau(config: &LossConfig) -> f64 {
    if config.temper_ablation {
        config.tau
    } else {
        1.0
    }
}

pub struct NoRegularizer;

impl<T: Real> Regularizer<T> for NoRegularizer {
    fn name(&self) -> &'static str {
        "none"
    }

    fn branches(&self) -> usize {
        1
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], _: &LossConfig) -> Result<RegOutput<T>> {
        Ok(RegOutput {
            value: T::zero(),
            d_adv: none_grads(adv.len()),
            d_clean: none_grads(clean.len()),
        })
    }
}

/// JS over temperature-scaled predictions of the attacked branches; the
/// gradient reaches both branches.
pub struct JsConsistency;

impl<T: Real> Regularizer<T> for JsConsistency {
    fn name(&self) -> &'static str {
        "js_consistency"
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], config: &LossConfig) -> Result<RegOutput<T>> {
        need(adv, 2, "js_consistency")?;
        let p1 = probs(adv[0], config.tau)?;
        let p2 = probs(adv[1], config.tau)?;
        let (per, g) = js_rows(&[p1.probs(), p2.probs()])?;
        let mut d_adv = none_grads(adv.len());
        d_adv[0] = Some(p1.backward(&g[0]));
        d_adv[1] = Some(p2.backward(&g[1]));
        Ok(RegOutput {
            value: mean(&per),
            d_adv,
            d_clean: none_grads(clean.len()),
        })
    }
}

/// JS over the clean augmented predictions, no temperature.
pub struct ConventionalCr;

impl<T: Real> Regularizer<T> for ConventionalCr {
    fn name(&self) -> &'static str {
        "conventional_cr"
    }

    fn uses_clean(&self) -> bool {
        true
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], _: &LossConfig) -> Result<RegOutput<T>> {
        let (c1, c2) = match clean {
            [Some(a), Some(b), ..] => (*a, *b),
            _ => return Err(Error::invalid("conventional_cr needs two clean branches")),
        };
        let p1 = probs(c1, 1.0)?;
        let p2 = probs(c2, 1.0)?;
        let (per, g) = js_rows(&[p1.probs(), p2.probs()])?;
        let mut d_clean = none_grads(clean.len());
        d_clean[0] = Some(p1.backward(&g[0]));
        d_clean[1] = Some(p2.backward(&g[1]));
        Ok(RegOutput {
            value: mean(&per),
            d_adv: none_grads(adv.len()),
            d_clean,
        })
    }
}

/// Squared Euclidean distance between attacked-branch probabilities.
pub struct MseCr;

impl<T: Real> Regularizer<T> for MseCr {
    fn name(&self) -> &'static str {
        "mse_cr"
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], config: &LossConfig) -> Result<RegOutput<T>> {
        need(adv, 2, "mse_cr")?;
        let tau = ablation_tau(config);
        let p1 = probs(adv[0], tau)?;
        let p2 = probs(adv[1], tau)?;
        let (per, d1, d2) = mse_rows(p1.probs(), p2.probs())?;
        let mut d_adv = none_grads(adv.len());
        d_adv[0] = Some(p1.backward(&d1));
        d_adv[1] = Some(p2.backward(&d2));
        Ok(RegOutput {
            value: mean(&per),
            d_adv,
            d_clean: none_grads(clean.len()),
        })
    }
}

/// One-directional `KL(branch 1 || branch 2)` between attacked branches.
pub struct KlCr;

impl<T: Real> Regularizer<T> for KlCr {
    fn name(&self) -> &'static str {
        "kl_cr"
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], config: &LossConfig) -> Result<RegOutput<T>> {
        need(adv, 2, "kl_cr")?;
        let tau = ablation_tau(config);
        let p1 = probs(adv[0], tau)?;
        let p2 = probs(adv[1], tau)?;
        let (per, d1, d2) = kl_rows(p1.probs(), p2.probs())?;
        let mut d_adv = none_grads(adv.len());
        d_adv[0] = Some(p1.backward(&d1));
        d_adv[1] = Some(p2.backward(&d2));
        Ok(RegOutput {
            value: mean(&per),
            d_adv,
            d_clean: none_grads(clean.len()),
        })
    }
}

/// 3-way JS across a base-augmented attacked branch (index 0) and two
/// attacked branches of the richer policy. Only the base branch carries the
/// classification loss.
pub struct AugMixCr;

impl<T: Real> Regularizer<T> for AugMixCr {
    fn name(&self) -> &'static str {
        "augmix_cr"
    }

    fn branches(&self) -> usize {
        3
    }

    fn loss_branches(&self, _: usize) -> Range<usize> {
        0..1
    }

    fn evaluate(&self, adv: &[&Array2<T>], clean: &[Option<&Array2<T>>], config: &LossConfig) -> Result<RegOutput<T>> {
        need(adv, 3, "augmix_cr")?;
        let tau = ablation_tau(config);
        let ps = [probs(adv[0], tau)?, probs(adv[1], tau)?, probs(adv[2], tau)?];
        let (per, g) = js_rows(&[ps[0].probs(), ps[1].probs(), ps[2].probs()])?;
        let mut d_adv = none_grads(adv.len());
        for i in 0..3 {
            d_adv[i] = Some(ps[i].backward(&g[i]));
        }
        Ok(RegOutput {
            value: mean(&per),
            d_adv,
            d_clean: none_grads(clean.len()),
        })
    }
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of(v.len() as f64)
}

pub fn regularizers<T: Real>() -> Registry<dyn Regularizer<T>> {
    Registry::new("regularizer")
        .with("none", Arc::new(NoRegularizer) as Arc<dyn Regularizer<T>>)
        .with("js_consistency", Arc::new(JsConsistency) as Arc<dyn Regularizer<T>>)
        .with("conventional_cr", Arc::new(ConventionalCr) as Arc<dyn Regularizer<T>>)
        .with("mse_cr", Arc::new(MseCr) as Arc<dyn Regularizer<T>>)
        .with("kl_cr", Arc::new(KlCr) as Arc<dyn Regularizer<T>>)
        .with("augmix_cr", Arc::new(AugMixCr) as Arc<dyn Regularizer<T>>)
}
