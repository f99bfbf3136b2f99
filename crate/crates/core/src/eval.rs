//! Robustness measurements. All accuracies and errors are percentages.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackSpec};
use crate::batch::LabeledBatch;
use crate::checkpoint::write_atomic;
use crate::data::CorruptionSet;
use crate::error::{Error, Result};
use crate::lp::Norm;
use crate::model::Classifier;
use crate::objective::attack_loss::AttackLossKind;
use crate::objective::prob::{argmax, runner_up};
use crate::rng::RngState;

pub const DEFAULT_EVAL_BATCH: usize = 256;

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    percent(pred.iter().zip(labels).filter(|(p, y)| p == y).count(), labels.len())
}

pub fn clean_predictions(model: &Classifier, data: &LabeledBatch) -> Result<Vec<usize>> {
    model.predict(&data.images)
}

pub fn clean_accuracy(model: &Classifier, data: &LabeledBatch) -> Result<f64> {
    Ok(accuracy_of(&clean_predictions(model, data)?, &data.labels))
}

/// Predictions on adversarial examples crafted against `source`, evaluated
/// on `target`. A zero radius skips the attack and returns clean predictions.
fn transferred_predictions(
    source: &Classifier,
    target: &Classifier,
    data: &LabeledBatch,
    spec: &AttackSpec,
    rng: &RngState,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if spec.threat.epsilon == 0.0 {
        return clean_predictions(target, data);
    }
    if spec.loss_kind == AttackLossKind::KlToReference {
        return Err(Error::invalid("evaluation attacks use the CE or CW objective"));
    }
    let mut out = Vec::with_capacity(data.len());
    for (i, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let r = pgd(source, &chunk, spec, None, &rng.derive("eval_batch", i as u64))?;
        out.extend(target.predict(&r.adversarial)?);
    }
    Ok(out)
}

pub fn robust_predictions(
    model: &Classifier,
    data: &LabeledBatch,
    spec: &AttackSpec,
    rng: &RngState,
    batch_size: usize,
) -> Result<Vec<usize>> {
    transferred_predictions(model, model, data, spec, rng, batch_size)
}

/// White-box accuracy under `spec`; a radius of exactly 0 gives clean accuracy.
pub fn robust_accuracy(
    model: &Classifier,
    data: &LabeledBatch,
    spec: &AttackSpec,
    rng: &RngState,
    batch_size: usize,
) -> Result<f64> {
    Ok(accuracy_of(&robust_predictions(model, data, spec, rng, batch_size)?, &data.labels))
}

/// Accuracy of `target` on adversarial examples crafted against `source`.
pub fn black_box_transfer(
    source: &Classifier,
    target: &Classifier,
    data: &LabeledBatch,
    spec: &AttackSpec,
    rng: &RngState,
    batch_size: usize,
) -> Result<f64> {
    if source.spec.input_shape != target.spec.input_shape || source.num_classes() != target.num_classes() {
        return Err(Error::invalid("source and target models must share input shape and classes"));
    }
    Ok(accuracy_of(
        &transferred_predictions(source, target, data, spec, rng, batch_size)?,
        &data.labels,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub norm: Norm,
    pub epsilon: f64,
    /// Radius in 1/255 units, as labelled in reports.
    pub epsilon_255: f64,
    pub accuracy: f64,
}

impl SweepCell {
    pub fn name(&self) -> String {
        format!("pgd100_{}_eps{}", self.norm, self.epsilon_255)
    }
}

/// Unseen-adversary grid: `(norm, radius in 1/255 units)`.
pub const UNSEEN_GRID: [(Norm, f64); 6] = [
    (Norm::LInf, 4.0),
    (Norm::LInf, 16.0),
    (Norm::L2, 150.0),
    (Norm::L2, 300.0),
    (Norm::L1, 2000.0),
    (Norm::L1, 4000.0),
];

pub const SWEEP_STEPS: usize = 100;

pub fn sweep(
    model: &Classifier,
    data: &LabeledBatch,
    grid: &[(Norm, f64)],
    steps: usize,
    rng: &RngState,
    batch_size: usize,
) -> Result<Vec<SweepCell>> {
    grid.iter()
        .enumerate()
        .map(|(i, &(norm, e255))| {
            let epsilon = e255 / 255.0;
            let spec = AttackSpec::eval(norm, epsilon, steps, AttackLossKind::CrossEntropy)?;
            Ok(SweepCell {
                norm,
                epsilon,
                epsilon_255: e255,
                accuracy: robust_accuracy(model, data, &spec, &rng.derive("sweep", i as u64), batch_size)?,
            })
        })
        .collect()
}

/// PGD-100 accuracy on the six unseen-adversary cells.
pub fn unseen_sweep(model: &Classifier, data: &LabeledBatch, rng: &RngState, batch_size: usize) -> Result<Vec<SweepCell>> {
    sweep(model, data, &UNSEEN_GRID, SWEEP_STEPS, rng, batch_size)
}

/// Error (%) per severity for one corruption type.
pub fn severity_errors(preds: &[Vec<usize>], labels: &[Vec<usize>]) -> Vec<f64> {
    preds.iter().zip(labels).map(|(p, y)| 100.0 - accuracy_of(p, y)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    /// Unweighted mean of the per-corruption errors.
    pub mce: f64,
    /// `(corruption, mean error over its severities)` in input order.
    pub per_corruption: Vec<(String, f64)>,
    pub severity_errors: Vec<(String, Vec<f64>)>,
    pub missing: Vec<String>,
}

/// Aggregates per-severity errors into per-corruption means and their mean.
pub fn mce_from_errors(errors: &[(String, Vec<f64>)], missing: Vec<String>) -> Result<CorruptionResult> {
    if errors.is_empty() {
        return Err(Error::invalid("no corruption data available"));
    }
    let per_corruption: Vec<(String, f64)> = errors
        .iter()
        .map(|(n, e)| (n.clone(), e.iter().sum::<f64>() / e.len().max(1) as f64))
        .collect();
    let mce = per_corruption.iter().map(|(_, e)| e).sum::<f64>() / per_corruption.len() as f64;
    Ok(CorruptionResult {
        mce,
        per_corruption,
        severity_errors: errors.to_vec(),
        missing,
    })
}

pub fn mce(model: &Classifier, sets: &[CorruptionSet], missing: Vec<String>) -> Result<CorruptionResult> {
    for m in &missing {
        log::warn!("corruption `{m}` missing; mCE computed over present types");
    }
    let errors = sets
        .iter()
        .map(|s| {
            let preds = s
                .severities
                .iter()
                .map(|b| clean_predictions(model, b))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<Vec<usize>> = s.severities.iter().map(|b| b.labels.clone()).collect();
            Ok((s.name.clone(), severity_errors(&preds, &labels)))
        })
        .collect::<Result<Vec<_>>>()?;
    mce_from_errors(&errors, missing)
}

/// Among samples misclassified after the attack, the share predicted as the
/// clean input's most confusing class (largest non-true logit). `None` when
/// nothing is misclassified.
pub fn confusing_class_rate_from(clean_logits: &ndarray::Array2<f32>, adv_pred: &[usize], labels: &[usize]) -> Option<f64> {
    let mut wrong = 0;
    let mut hits = 0;
    for (i, (&p, &y)) in adv_pred.iter().zip(labels).enumerate() {
        if p != y {
            wrong += 1;
            if p == runner_up(clean_logits.row(i).as_slice().expect("contiguous"), y) {
                hits += 1;
            }
        }
    }
    (wrong > 0).then(|| percent(hits, wrong))
}

pub fn confusing_class_rate(
    model: &Classifier,
    data: &LabeledBatch,
    spec: &AttackSpec,
    rng: &RngState,
    batch_size: usize,
) -> Result<Option<f64>> {
    let clean = model.logits_chunked(&data.images, batch_size)?;
    let adv = robust_predictions(model, data, spec, rng, batch_size)?;
    Ok(confusing_class_rate_from(&clean, &adv, &data.labels))
}

/// Quantities from one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub clean_acc: Option<f64>,
    /// Attack name to robust accuracy.
    pub robust_acc: BTreeMap<String, f64>,
    pub sweep: Vec<SweepCell>,
    pub corruption: Option<CorruptionResult>,
    pub transfer_acc: Option<f64>,
    pub confusing_class_rate: Option<f64>,
}

impl EvalReport {
    /// `(metric, value)` rows in a stable order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        if let Some(v) = self.clean_acc {
            rows.push(("clean_acc".to_string(), v));
        }
        rows.extend(self.robust_acc.iter().map(|(k, v)| (format!("{k}_acc"), *v)));
        rows.extend(self.sweep.iter().map(|c| (format!("{}_acc", c.name()), c.accuracy)));
        if let Some(c) = &self.corruption {
            rows.push(("mce".to_string(), c.mce));
            rows.extend(c.per_corruption.iter().map(|(n, e)| (format!("{n}_error"), *e)));
        }
        if let Some(v) = self.transfer_acc {
            rows.push(("transfer_acc".to_string(), v));
        }
        if let Some(v) = self.confusing_class_rate {
            rows.push(("confusing_class_rate".to_string(), v));
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"])?;
        w.write_record(["config_hash", &self.config_hash])?;
        for (k, v) in self.rows() {
            w.write_record([k, v.to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?).expect("utf-8"))
    }

    /// Per-corruption errors laid out one bar per row.
    pub fn corruption_csv(&self) -> Result<Option<String>> {
        let Some(c) = &self.corruption else { return Ok(None) };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["corruption", "error"])?;
        for (n, e) in &c.per_corruption {
            w.write_record([n.clone(), e.to_string()])?;
        }
        Ok(Some(String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?).expect("utf-8")))
    }

    /// Writes `<stem>.csv`, `<stem>.json` and, with corruption results,
    /// `<stem>_corruption.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?.as_bytes())?;
        if let Some(c) = self.corruption_csv()? {
            write_atomic(&dir.join(format!("{stem}_corruption.csv")), c.as_bytes())?;
        }
        Ok(())
    }
}

pub fn predictions_from_logits(z: &ndarray::Array2<f32>) -> Vec<usize> {
    z.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect()
}
