//! Base adversarial-training objectives evaluated on one augmented branch.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::attack_loss::AttackLossKind;
use super::prob::{ce_from_logits, kl_rows, runner_up, softmax, PROB_FLOOR};
use super::LossConfig;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::scalar::Real;

/// Batch-mean loss terms of one branch and their logit gradients.
#[derive(Debug, Clone)]
pub struct MethodOutput<T: Real> {
    /// Named, already-weighted terms; their sum is the branch loss.
    pub terms: Vec<(&'static str, T)>,
    pub d_adv: Array2<T>,
    pub d_clean: Option<Array2<T>>,
}

impl<T: Real> MethodOutput<T> {
    pub fn value(&self) -> T {
        self.terms.iter().map(|(_, v)| *v).sum()
    }
}

pub trait AdversarialMethod<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Objective the inner maximization must use.
    fn attack_loss(&self) -> AttackLossKind;

    /// Whether the clean (augmented, unattacked) logits enter the loss.
    fn uses_clean(&self) -> bool;

    fn evaluate(
        &self,
        adv_logits: &Array2<T>,
        clean_logits: Option<&Array2<T>>,
        labels: &[usize],
        config: &LossConfig,
    ) -> Result<MethodOutput<T>>;
}

fn require_clean<'a, T: Real>(clean: Option<&'a Array2<T>>, method: &str) -> Result<&'a Array2<T>> {
    clean.ok_or_else(|| Error::invalid(format!("{method} needs clean logits")))
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of(v.len() as f64)
}

/// Standard adversarial training: cross-entropy on the attacked input.
pub struct StandardAt;

impl<T: Real> AdversarialMethod<T> for StandardAt {
    fn name(&self) -> &'static str {
        "at"
    }

    fn attack_loss(&self) -> AttackLossKind {
        AttackLossKind::CrossEntropy
    }

    fn uses_clean(&self) -> bool {
        false
    }

    fn evaluate(&self, adv: &Array2<T>, _: Option<&Array2<T>>, labels: &[usize], _: &LossConfig) -> Result<MethodOutput<T>> {
        let (per, d_adv) = ce_from_logits(adv, labels)?;
        Ok(MethodOutput {
            terms: vec![("adv_ce", mean(&per))],
            d_adv,
            d_clean: None,
        })
    }
}

/// `CE(f(x), y) + beta * KL(f(x) || f(x + delta))`.
pub struct Trades;

impl<T: Real> AdversarialMethod<T> for Trades {
    fn name(&self) -> &'static str {
        "trades"
    }

    fn attack_loss(&self) -> AttackLossKind {
        AttackLossKind::KlToReference
    }

    fn uses_clean(&self) -> bool {
        true
    }

    fn evaluate(
        &self,
        adv: &Array2<T>,
        clean: Option<&Array2<T>>,
        labels: &[usize],
        config: &LossConfig,
    ) -> Result<MethodOutput<T>> {
        let clean = require_clean(clean, "TRADES")?;
        let beta = T::of(config.beta);
        let (ce, d_ce) = ce_from_logits(clean, labels)?;
        let p = softmax(clean.view());
        let q = softmax(adv.view());
        let (kl, dp, dq) = kl_rows(p.probs(), q.probs())?;
        let d_clean = d_ce + &p.backward(&dp).mapv(|v| v * beta);
        let d_adv = q.backward(&dq).mapv(|v| v * beta);
        Ok(MethodOutput {
            terms: vec![("natural_ce", mean(&ce)), ("robust_kl", beta * mean(&kl))],
            d_adv,
            d_clean: Some(d_clean),
        })
    }
}

/// `BCE(f(x + delta), y) + gamma * (1 - f_y(x)) * KL(f(x) || f(x + delta))`
/// with `BCE = CE - ln(1 - max_{k != y} f_k)`.
pub struct Mart;

impl<T: Real> AdversarialMethod<T> for Mart {
    fn name(&self) -> &'static str {
        "mart"
    }

    fn attack_loss(&self) -> AttackLossKind {
        AttackLossKind::CrossEntropy
    }

    fn uses_clean(&self) -> bool {
        true
    }

    fn evaluate(
        &self,
        adv: &Array2<T>,
        clean: Option<&Array2<T>>,
        labels: &[usize],
        config: &LossConfig,
    ) -> Result<MethodOutput<T>> {
        let clean = require_clean(clean, "MART")?;
        let gamma = T::of(config.gamma);
        let nb = T::of(labels.len() as f64);
        let eps = T::of(PROB_FLOOR);

        let q = softmax(adv.view());
        let (ce, d_ce) = ce_from_logits(adv, labels)?;
        let mut margin = Vec::with_capacity(labels.len());
        let mut dq_margin = Array2::<T>::zeros(adv.raw_dim());
        for (i, &y) in labels.iter().enumerate() {
            let row = q.probs().row(i);
            let k = runner_up(row.as_slice().expect("owned rows are contiguous"), y);
            let rest = T::one() - row[k];
            if rest > eps {
                margin.push(-rest.ln());
                dq_margin[[i, k]] = T::one() / rest / nb;
            } else {
                margin.push(-eps.ln());
            }
        }
        let bce: Vec<T> = ce.iter().zip(&margin).map(|(&a, &b)| a + b).collect();

        let p = softmax(clean.view());
        let (kl, dp_kl, dq_kl) = kl_rows(p.probs(), q.probs())?;
        let weights: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| T::one() - p.probs()[[i, y]])
            .collect();
        let weighted: Vec<T> = kl.iter().zip(&weights).map(|(&k, &w)| k * w).collect();

        // d/dp of gamma * w_i * KL_i: w_i * dKL/dp - KL_i * e_y (w = 1 - p_y).
        let mut dp = dp_kl;
        for (i, mut row) in dp.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * weights[i]);
            row[labels[i]] -= kl[i] / nb;
        }
        let mut dq = dq_kl;
        for (i, mut row) in dq.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * weights[i]);
        }
        let d_adv = d_ce + &q.backward(&dq_margin) + &q.backward(&dq).mapv(|v| v * gamma);
        let d_clean = p.backward(&dp).mapv(|v| v * gamma);
        Ok(MethodOutput {
            terms: vec![("adv_bce", mean(&bce)), ("robust_kl", gamma * mean(&weighted))],
            d_adv,
            d_clean: Some(d_clean),
        })
    }
}

pub fn methods<T: Real>() -> Registry<dyn AdversarialMethod<T>> {
    Registry::new("training method")
        .with("at", Arc::new(StandardAt) as Arc<dyn AdversarialMethod<T>>)
        .with("trades", Arc::new(Trades) as Arc<dyn AdversarialMethod<T>>)
        .with("mart", Arc::new(Mart) as Arc<dyn AdversarialMethod<T>>)
}
