//! Consistency-regularized adversarial training.
//!
//! One step samples a transform per branch and image, attacks every branch
//! independently, evaluates the full objective and applies SGD with momentum
//! and weight decay. All randomness derives from `(seed, epoch, step)`, so an
//! interrupted run resumed from its last checkpoint replays the same updates.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{attack_branches, AttackSpec};
use crate::augment::{sample_batch, AugmentPolicy};
use crate::batch::LabeledBatch;
use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::{stratified_fraction, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{clean_accuracy, robust_accuracy, DEFAULT_EVAL_BATCH};
use crate::metrics::{MetricsRow, MetricsTable, TermRow, TermsTable};
use crate::model::{Classifier, ModelSpec};
use crate::nn::{Mode, TensorStore};
use crate::objective::{regularizer::regularizers, total_loss, Branch, GradRequest, LossConfig};
use crate::rng::RngState;

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TERMS_FILE: &str = "terms.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Inner maximization used for training.
    pub attack: AttackSpec,
    /// Attack used for per-epoch best-checkpoint selection.
    pub selection_attack: AttackSpec,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    /// Retained portion of the training set (class-stratified).
    pub fraction: f64,
    pub seed: u64,
    /// Path-free dataset identity (`cifar10`, `synthetic:...`).
    pub dataset: String,
    /// Test images used by the per-epoch evaluation; `None` uses all.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let attack = AttackSpec::preset("pgd10_train").expect("preset exists");
        Self {
            model: ModelSpec::new("preact_resnet18", 10, (3, 32, 32)).with_cifar_normalization(),
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            attack,
            selection_attack: attack,
            loss: LossConfig::default(),
            augment: AugmentPolicy::autoaugment(),
            fraction: 1.0,
            seed: 0,
            dataset: "cifar10".into(),
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be > 0, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        pos("train.lr", self.lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must be in (0, 1]"));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config("train.milestones", "must be strictly increasing fractions in (0, 1]"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("data.fraction", "must be in (0, 1]"));
        }
        self.attack.validate().map_err(|e| Error::config("attack", e.to_string()))?;
        self.selection_attack
            .validate()
            .map_err(|e| Error::config("train.selection_attack", e.to_string()))?;
        let expected = self.loss.attack_loss()?;
        if self.attack.loss_kind != expected {
            return Err(Error::config(
                "attack.loss",
                format!(
                    "method `{}` requires the `{expected}` attack objective, got `{}`",
                    self.loss.method, self.attack.loss_kind
                ),
            ));
        }
        Ok(())
    }

    /// Short content hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Epoch indices (0-based) from which each decay applies.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * self.epochs as f64).ceil() as usize)
            .collect()
    }

    /// Learning rate used during the epoch with 0-based index `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
        self.lr / (1.0 / self.lr_decay).powi(drops as i32)
    }

    /// Number of augmented branches per step.
    pub fn branches(&self) -> Result<usize> {
        self.loss.branches()
    }
}

/// Half the epochs with milestones kept at the same fractions.
pub fn halve_epoch_budget(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.epochs / 2,
        ..config.clone()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter:
/// `b = m b + (g + wd w)`, `w -= lr b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub buffers: Option<TensorStore<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            buffers: None,
        }
    }

    pub fn step(&mut self, params: &mut TensorStore<f32>, grads: &TensorStore<f32>, lr: f64) {
        let lr = lr as f32;
        let (m, wd) = (self.momentum, self.weight_decay);
        let first = self.buffers.is_none();
        let bufs = self.buffers.get_or_insert_with(|| params.zeros_like());
        for ((w, g), b) in params.values.iter_mut().zip(&grads.values).zip(bufs.values.iter_mut()) {
            ndarray::Zip::from(w).and(g).and(b).for_each(|w, &g, b| {
                let d = g + wd * *w;
                *b = if first { d } else { m * *b + d };
                *w -= lr * *b;
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Classifier,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    /// `(epoch, pgd10_acc)` of the best epoch so far.
    pub best: Option<(usize, f64)>,
    pub history: Vec<MetricsRow>,
    pub terms: Vec<TermRow>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            model: Classifier::new(config.model.clone(), RngState::new(config.seed).derive("model", 0))?,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            epoch: 0,
            global_step: 0,
            best: None,
            history: Vec::new(),
            terms: Vec::new(),
        })
    }
}

/// Loss terms of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub adv_loss: f64,
    pub cons_loss: f64,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

/// Policy for each branch; the AugMix-style regularizer draws its first
/// branch from the base policy.
fn branch_policies(config: &TrainConfig, n: usize) -> Vec<AugmentPolicy> {
    (0..n)
        .map(|i| {
            if config.loss.regularizer == "augmix_cr" && i == 0 {
                AugmentPolicy::base()
            } else {
                config.augment.clone()
            }
        })
        .collect()
}

/// One optimization step on `batch` with learning rate `lr`.
pub fn train_step(
    state: &mut TrainState,
    batch: &LabeledBatch,
    config: &TrainConfig,
    lr: f64,
    rng: &RngState,
) -> Result<StepMetrics> {
    let n_branches = regularizers::<f32>().get(&config.loss.regularizer)?.branches();
    let transforms: Vec<_> = branch_policies(config, n_branches)
        .iter()
        .enumerate()
        .map(|(i, p)| sample_batch(p, &rng.derive("augment", i as u64), batch.len()))
        .collect();
    let spec = config.attack.with_loss(config.loss.attack_loss()?);
    let attacked = attack_branches(&state.model, batch, &transforms, &spec, &rng.derive("attack", 0), Mode::Train)?;
    let branches: Vec<Branch> = attacked
        .into_iter()
        .map(|b| Branch {
            clean: b.clean,
            adversarial: b.result.adversarial,
            attack_loss: spec.loss_kind,
        })
        .collect();
    let out = total_loss(
        &state.model,
        &branches,
        &batch.labels,
        &config.loss,
        Mode::Train,
        GradRequest {
            params: true,
            inputs: false,
        },
    )?;
    if !out.total.is_finite() || out.terms.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.global_step,
            config_hash: config.hash(),
            breakdown: out.breakdown(),
        });
    }
    for tape in &out.tapes {
        state.model.net.commit_running_stats(tape);
    }
    let grads = out.param_grads.as_ref().expect("parameter gradients requested");
    state.optimizer.step(&mut state.model.net.params, grads, lr);
    state.global_step += 1;
    Ok(StepMetrics {
        adv_loss: out.adv_loss as f64,
        cons_loss: out.reg_loss as f64,
        total: out.total as f64,
        terms: out.terms.iter().map(|(k, v)| (k.clone(), *v as f64)).collect(),
    })
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Epoch means of each loss term.
    pub terms: Vec<TermRow>,
}

fn checkpoint_of(state: &TrainState, config: &TrainConfig, metrics: Option<MetricsRow>) -> Result<Checkpoint> {
    Ok(Checkpoint {
        model: state.model.clone(),
        momentum: state.optimizer.buffers.clone(),
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            model: config.model.clone(),
            epoch: state.epoch,
            global_step: state.global_step,
            best_pgd10: state.best.map(|b| b.1),
            best_epoch: state.best.map(|b| b.0),
            metrics,
            rng: RngState::new(config.seed),
            config: Some(serde_json::to_value(config)?),
        },
    })
}

fn restore(config: &TrainConfig, dir: &Path) -> Result<Option<(TrainState, Checkpoint)>> {
    let last_path = dir.join(LAST_CHECKPOINT);
    if !last_path.exists() {
        return Ok(None);
    }
    let last = Checkpoint::load(&last_path)?;
    if last.meta.config_hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written by config {}, current config is {}; use a fresh output directory",
            last_path.display(),
            last.meta.config_hash,
            config.hash()
        )));
    }
    let best = Checkpoint::load(&dir.join(BEST_CHECKPOINT))?;
    let mut history = MetricsTable::load(&dir.join(METRICS_FILE))?.rows;
    history.retain(|r| r.epoch <= last.meta.epoch);
    if history.len() != last.meta.epoch {
        return Err(Error::Checkpoint(format!(
            "metrics hold {} rows but the checkpoint closes epoch {}",
            history.len(),
            last.meta.epoch
        )));
    }
    let mut terms = TermsTable::load(&dir.join(TERMS_FILE))?.rows;
    terms.retain(|r| r.epoch <= last.meta.epoch);
    let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
    optimizer.buffers = last.momentum.clone();
    let state = TrainState {
        model: last.model.clone(),
        optimizer,
        epoch: last.meta.epoch,
        global_step: last.meta.global_step,
        best: last.meta.best_pgd10.zip(last.meta.best_epoch).map(|(a, e)| (e, a)),
        history,
        terms,
    };
    Ok(Some((state, best)))
}

/// Where and how a run persists its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (the run can be resumed).
    pub stop_after: Option<usize>,
}

/// Trains for `config.epochs`, evaluating clean and PGD-10 accuracy on the
/// test split after every epoch and keeping the best-PGD-10 checkpoint.
/// With an output directory holding a previous run of the same config, the
/// run resumes after its last completed epoch.
pub fn run_training(config: &TrainConfig, data: &DatasetSplit, options: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if data.num_classes != config.model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset has {} classes, model expects {}", data.num_classes, config.model.num_classes),
        ));
    }
    let root = RngState::new(config.seed);
    let data = stratified_fraction(data, config.fraction, root.derive("fraction", 0))?;
    let test = match config.eval_limit {
        Some(k) if k < data.test.len() => data.test.slice(0, k.max(1)),
        _ => data.test.clone(),
    };
    let hash = config.hash();

    let resumed = match &options.out_dir {
        Some(dir) => restore(config, dir)?,
        None => None,
    };
    let (mut state, mut best) = match resumed {
        Some((s, b)) => {
            log::info!("resuming after epoch {}", s.epoch);
            (s, b)
        }
        None => {
            let s = TrainState::new(config)?;
            let b = checkpoint_of(&s, config, None)?;
            (s, b)
        }
    };
    let mut table = MetricsTable::new(&hash);
    table.rows = state.history.clone();
    let mut terms_table = TermsTable::new(&hash);
    terms_table.rows = state.terms.clone();

    let end = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    while state.epoch < end {
        let e = state.epoch;
        let lr = config.lr_at(e);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut root.derive("order", e as u64).generator());
        let (mut adv_sum, mut cons_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut term_sums: Vec<(String, f64)> = Vec::new();
        for idx in order.chunks(config.batch_size) {
            let batch = data.train.select(idx);
            let step_rng = root.derive("step", state.global_step);
            let m = train_step(&mut state, &batch, config, lr, &step_rng)?;
            log::debug!("step {} {}", state.global_step, m.terms.iter().map(|(k, v)| format!("{k}={v:.5}")).collect::<Vec<_>>().join(" "));
            for (k, v) in &m.terms {
                match term_sums.iter_mut().find(|(n, _)| n == k) {
                    Some(slot) => slot.1 += v * idx.len() as f64,
                    None => term_sums.push((k.clone(), v * idx.len() as f64)),
                }
            }
            adv_sum += m.adv_loss * idx.len() as f64;
            cons_sum += m.cons_loss * idx.len() as f64;
            seen += idx.len();
        }
        let clean_acc = clean_accuracy(&state.model, &test)?;
        let pgd10_acc = robust_accuracy(
            &state.model,
            &test,
            &config.selection_attack,
            &root.derive("select", e as u64),
            DEFAULT_EVAL_BATCH,
        )?;
        let row = MetricsRow {
            epoch: e + 1,
            lr,
            train_adv_loss: adv_sum / seen.max(1) as f64,
            train_cons_loss: cons_sum / seen.max(1) as f64,
            clean_acc,
            pgd10_acc,
        };
        state.epoch += 1;
        state.history.push(row);
        let new_terms: Vec<TermRow> = term_sums
            .into_iter()
            .map(|(term, v)| TermRow {
                epoch: e + 1,
                term,
                value: v / seen.max(1) as f64,
            })
            .collect();
        state.terms.extend(new_terms.iter().cloned());
        let improved = state.best.is_none_or(|(_, b)| pgd10_acc > b);
        if improved {
            state.best = Some((e + 1, pgd10_acc));
        }
        log::info!(
            "epoch {}/{} lr={lr} adv={:.4} cons={:.4} clean={clean_acc:.2}% pgd10={pgd10_acc:.2}%",
            e + 1,
            config.epochs,
            row.train_adv_loss,
            row.train_cons_loss
        );
        let last = checkpoint_of(&state, config, Some(row))?;
        if improved {
            best = last.clone();
        }
        if let Some(dir) = &options.out_dir {
            table.rows.push(row);
            terms_table.rows.extend(new_terms);
            terms_table.save(&dir.join(TERMS_FILE))?;
            table.save(&dir.join(METRICS_FILE))?;
            if improved {
                best.save(&dir.join(BEST_CHECKPOINT))?;
            }
            last.save(&dir.join(LAST_CHECKPOINT))?;
        }
    }
    if let Some(dir) = &options.out_dir {
        if state.epoch == 0 {
            terms_table.save(&dir.join(TERMS_FILE))?;
            table.save(&dir.join(METRICS_FILE))?;
        }
    }
    let last = checkpoint_of(&state, config, state.history.last().copied())?;
    if state.epoch == 0 {
        best = last.clone();
    }
    Ok(TrainOutcome {
        last,
        best,
        metrics: state.history,
        terms: state.terms,
    })
}
