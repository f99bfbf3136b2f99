//! Per-sample objectives maximized by the attacks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::prob::{ce_from_logits, check_labels, cw_margin_rows, kl_rows, softmax};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackLossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "kl")]
    KlToReference,
    #[serde(rename = "cw")]
    CwMargin,
}

impl AttackLossKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackLossKind::CrossEntropy => "ce",
            AttackLossKind::KlToReference => "kl",
            AttackLossKind::CwMargin => "cw",
        }
    }
}

impl fmt::Display for AttackLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(Self::CrossEntropy),
            "kl" | "kl_to_reference" => Ok(Self::KlToReference),
            "cw" | "cw_margin" => Ok(Self::CwMargin),
            other => Err(Error::UnknownName {
                kind: "attack loss",
                name: other.to_string(),
                known: "ce, kl, cw".into(),
            }),
        }
    }
}

/// Loss the attack ascends: per-sample values and the gradient of their
/// batch mean with respect to the logits.
pub trait AttackObjective<T: Real>: Send + Sync {
    fn kind(&self) -> AttackLossKind;

    fn evaluate(
        &self,
        logits: &Array2<T>,
        labels: &[usize],
        reference: Option<&Array2<T>>,
    ) -> Result<(Vec<T>, Array2<T>)>;
}

pub struct CrossEntropyObjective;
pub struct KlToReferenceObjective;
pub struct CwMarginObjective;

impl<T: Real> AttackObjective<T> for CrossEntropyObjective {
    fn kind(&self) -> AttackLossKind {
        AttackLossKind::CrossEntropy
    }

    fn evaluate(&self, logits: &Array2<T>, labels: &[usize], _: Option<&Array2<T>>) -> Result<(Vec<T>, Array2<T>)> {
        ce_from_logits(logits, labels)
    }
}

impl<T: Real> AttackObjective<T> for KlToReferenceObjective {
    fn kind(&self) -> AttackLossKind {
        AttackLossKind::KlToReference
    }

    /// `KL(reference || softmax(logits))`; `reference` holds probabilities.
    fn evaluate(
        &self,
        logits: &Array2<T>,
        labels: &[usize],
        reference: Option<&Array2<T>>,
    ) -> Result<(Vec<T>, Array2<T>)> {
        let reference =
            reference.ok_or_else(|| Error::invalid("KL attack requires the clean reference distribution"))?;
        check_labels(logits.view(), labels)?;
        let q = softmax(logits.view());
        let (per, _, dq) = kl_rows(reference, q.probs())?;
        Ok((per, q.backward(&dq)))
    }
}

impl<T: Real> AttackObjective<T> for CwMarginObjective {
    fn kind(&self) -> AttackLossKind {
        AttackLossKind::CwMargin
    }

    fn evaluate(&self, logits: &Array2<T>, labels: &[usize], _: Option<&Array2<T>>) -> Result<(Vec<T>, Array2<T>)> {
        cw_margin_rows(logits, labels)
    }
}

pub fn attack_objectives<T: Real>() -> Registry<dyn AttackObjective<T>> {
    Registry::new("attack loss")
        .with("ce", Arc::new(CrossEntropyObjective) as Arc<dyn AttackObjective<T>>)
        .with("kl", Arc::new(KlToReferenceObjective) as Arc<dyn AttackObjective<T>>)
        .with("cw", Arc::new(CwMarginObjective) as Arc<dyn AttackObjective<T>>)
}

pub fn attack_objective<T: Real>(kind: AttackLossKind) -> Arc<dyn AttackObjective<T>> {
    attack_objectives::<T>()
        .get(kind.name())
        .expect("every kind is registered")
}
