//! Inner maximization: projected gradient ascent inside an lp ball.
//!
//! Each norm contributes a [`NormGeometry`] (steepest-ascent direction and
//! uniform random start); projection and clipping are shared. Every attack
//! tracks the best iterate per sample, counting the starting point.

use std::sync::Arc;

use ndarray::{Array2, Array4, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::BatchTransform;
use crate::batch::{ImageBatch, LabeledBatch};
use crate::error::{Error, Result};
use crate::lp::{project_slice, Norm, ThreatModel};
use crate::model::Classifier;
use crate::nn::Mode;
use crate::objective::attack_loss::{attack_objective, AttackLossKind};
use crate::objective::prob::{argmax, softmax};
use crate::registry::Registry;
use crate::rng::RngState;
use crate::scalar::Real;

/// Fraction of coordinates moved by one l1 step.
pub const L1_STEP_FRACTION: f64 = 0.01;

pub const PRESETS: [&str; 5] = ["pgd10_train", "pgd10_train_l2", "pgd20_eval", "pgd100_eval", "cw100_eval"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub threat: ThreatModel,
    pub loss_kind: AttackLossKind,
    pub restarts: usize,
}

impl AttackSpec {
    pub fn new(threat: ThreatModel, loss_kind: AttackLossKind, restarts: usize) -> Result<Self> {
        let spec = Self {
            threat,
            loss_kind,
            restarts,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.threat.validate()?;
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be >= 1"));
        }
        Ok(())
    }

    /// Evaluation attack with step size `2 * epsilon / steps` and a random start.
    pub fn eval(norm: Norm, epsilon: f64, steps: usize, loss_kind: AttackLossKind) -> Result<Self> {
        Self::new(ThreatModel::with_eval_step(norm, epsilon, steps)?, loss_kind, 1)
    }

    /// | preset           | norm | eps     | alpha     | steps | start  | loss |
    /// |------------------|------|---------|-----------|-------|--------|------|
    /// | `pgd10_train`    | linf | 8/255   | 2/255     | 10    | zero   | CE   |
    /// | `pgd10_train_l2` | l2   | 128/255 | 15/255    | 10    | zero   | CE   |
    /// | `pgd20_eval`     | linf | 8/255   | 2 eps/20  | 20    | random | CE   |
    /// | `pgd100_eval`    | linf | 8/255   | 2 eps/100 | 100   | random | CE   |
    /// | `cw100_eval`     | linf | 8/255   | 2 eps/100 | 100   | random | CW   |
    pub fn preset(name: &str) -> Result<Self> {
        let eps = 8.0 / 255.0;
        match name {
            "pgd10_train" => Self::new(
                ThreatModel::new(Norm::LInf, eps, 10, 2.0 / 255.0, false)?,
                AttackLossKind::CrossEntropy,
                1,
            ),
            "pgd10_train_l2" => Self::new(
                ThreatModel::new(Norm::L2, 128.0 / 255.0, 10, 15.0 / 255.0, false)?,
                AttackLossKind::CrossEntropy,
                1,
            ),
            "pgd20_eval" => Self::eval(Norm::LInf, eps, 20, AttackLossKind::CrossEntropy),
            "pgd100_eval" => Self::eval(Norm::LInf, eps, 100, AttackLossKind::CrossEntropy),
            "cw100_eval" => Self::eval(Norm::LInf, eps, 100, AttackLossKind::CwMargin),
            other => Err(Error::UnknownName {
                kind: "attack preset",
                name: other.to_string(),
                known: PRESETS.join(", "),
            }),
        }
    }

    pub fn with_loss(mut self, loss_kind: AttackLossKind) -> Self {
        self.loss_kind = loss_kind;
        self
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult<T: Real = f32> {
    pub adversarial: ImageBatch<T>,
    pub delta: Array4<T>,
    /// Attack loss at the unperturbed input.
    pub loss_before: Vec<T>,
    /// Attack loss at the returned iterate.
    pub loss_after: Vec<T>,
    /// Misclassified at the returned iterate.
    pub success: Vec<bool>,
}

/// What an attack needs from a model.
pub trait AttackModel<T: Real> {
    fn logits(&self, x: &Array4<T>, mode: Mode) -> Result<Array2<T>>;

    /// Per-sample loss, logits, and the gradient of the batch-mean loss with
    /// respect to `x`.
    fn loss_and_grad(
        &self,
        x: &Array4<T>,
        labels: &[usize],
        loss: AttackLossKind,
        reference: Option<&Array2<T>>,
        mode: Mode,
    ) -> Result<(Vec<T>, Array2<T>, Array4<T>)>;
}

impl<T: Real> AttackModel<T> for Classifier<T> {
    fn logits(&self, x: &Array4<T>, mode: Mode) -> Result<Array2<T>> {
        self.forward_tape(x, mode).map(|(z, _)| z)
    }

    fn loss_and_grad(
        &self,
        x: &Array4<T>,
        labels: &[usize],
        loss: AttackLossKind,
        reference: Option<&Array2<T>>,
        mode: Mode,
    ) -> Result<(Vec<T>, Array2<T>, Array4<T>)> {
        let (z, tape) = self.forward_tape(x, mode)?;
        let (per, dz) = attack_objective::<T>(loss).evaluate(&z, labels, reference)?;
        let dx = self.backward(&tape, &dz, None);
        Ok((per, z, dx))
    }
}

/// Norm-specific pieces of PGD.
pub trait NormGeometry<T: Real>: Send + Sync {
    fn norm(&self) -> Norm;

    /// Unit steepest-ascent direction for gradient `g`; all zeros when `g` is.
    fn direction(&self, g: &[T], out: &mut [T]);

    /// A point drawn uniformly from the ball of radius `epsilon`.
    fn random_start(&self, rng: &mut ChaCha8Rng, epsilon: f64, out: &mut [T]);
}

pub struct LInfGeometry;
pub struct L2Geometry;
pub struct L1Geometry;

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> NormGeometry<T> for LInfGeometry {
    fn norm(&self) -> Norm {
        Norm::LInf
    }

    fn direction(&self, g: &[T], out: &mut [T]) {
        for (o, &v) in out.iter_mut().zip(g) {
            *o = sign(v);
        }
    }

    fn random_start(&self, rng: &mut ChaCha8Rng, epsilon: f64, out: &mut [T]) {
        for o in out.iter_mut() {
            *o = T::of(rng.gen_range(-epsilon..=epsilon));
        }
    }
}

impl<T: Real> NormGeometry<T> for L2Geometry {
    fn norm(&self) -> Norm {
        Norm::L2
    }

    fn direction(&self, g: &[T], out: &mut [T]) {
        let n = Norm::L2.of(g);
        for (o, &v) in out.iter_mut().zip(g) {
            *o = if n > T::zero() { v / n } else { T::zero() };
        }
    }

    fn random_start(&self, rng: &mut ChaCha8Rng, epsilon: f64, out: &mut [T]) {
        let dir: Vec<f64> = (0..out.len()).map(|_| StandardNormal.sample(rng)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r = epsilon * rng.gen::<f64>().powf(1.0 / out.len() as f64);
        for (o, v) in out.iter_mut().zip(dir) {
            *o = T::of(v / n * r);
        }
    }
}

impl<T: Real> NormGeometry<T> for L1Geometry {
    fn norm(&self) -> Norm {
        Norm::L1
    }

    /// Signed mass `1/q` on each of the `q = ceil(1% of d)` largest `|g|`.
    fn direction(&self, g: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        let q = ((g.len() as f64 * L1_STEP_FRACTION).ceil() as usize).clamp(1, g.len());
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.select_nth_unstable_by(q - 1, |&a, &b| {
            g[b].abs().partial_cmp(&g[a].abs()).unwrap_or(std::cmp::Ordering::Equal)
        });
        let share = T::one() / T::of(q as f64);
        for &i in &idx[..q] {
            out[i] = sign(g[i]) * share;
        }
    }

    /// Uniform in the cross-polytope: the first `d` coordinates of a
    /// flat Dirichlet draw in dimension `d + 1`, with random signs.
    fn random_start(&self, rng: &mut ChaCha8Rng, epsilon: f64, out: &mut [T]) {
        let e: Vec<f64> = (0..=out.len()).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = e.iter().sum();
        for (o, v) in out.iter_mut().zip(e) {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            *o = T::of(s * epsilon * v / total);
        }
    }
}

pub fn geometries<T: Real>() -> Registry<dyn NormGeometry<T>> {
    Registry::new("norm geometry")
        .with("linf", Arc::new(LInfGeometry) as Arc<dyn NormGeometry<T>>)
        .with("l2", Arc::new(L2Geometry) as Arc<dyn NormGeometry<T>>)
        .with("l1", Arc::new(L1Geometry) as Arc<dyn NormGeometry<T>>)
}

/// Keeps `x + delta` inside `[0, 1]` by clamping `delta` to `[-x, 1 - x]`,
/// which never increases `|delta|` (unlike recomputing `clip(x + delta) - x`
/// in floating point).
fn clip_delta<T: Real>(x: &Array4<T>, delta: &mut Array4<T>) {
    Zip::from(delta).and(x).for_each(|d, &xv| {
        *d = d.max(-xv).min(T::one() - xv);
    });
}

/// PGD against a model in evaluation mode.
pub fn pgd<T: Real, M: AttackModel<T>>(
    model: &M,
    batch: &LabeledBatch<T>,
    spec: &AttackSpec,
    reference: Option<&Array2<T>>,
    rng: &RngState,
) -> Result<AttackResult<T>> {
    pgd_in_mode(model, batch, spec, reference, rng, Mode::Eval)
}

/// PGD with an explicit forward mode (training attacks use batch statistics).
pub fn pgd_in_mode<T: Real, M: AttackModel<T>>(
    model: &M,
    batch: &LabeledBatch<T>,
    spec: &AttackSpec,
    reference: Option<&Array2<T>>,
    rng: &RngState,
    mode: Mode,
) -> Result<AttackResult<T>> {
    spec.validate()?;
    if spec.loss_kind == AttackLossKind::KlToReference && reference.is_none() {
        return Err(Error::invalid("KL attack requires the clean reference distribution"));
    }
    let geometry = geometries::<T>().get(spec.threat.norm.name())?;
    let x = batch.images.data();
    let labels = &batch.labels;
    let n = x.shape()[0];
    let eps = T::of(spec.threat.epsilon);
    let alpha = T::of(spec.threat.step_size);

    let (loss_before, logits0, _) = model.loss_and_grad(x, labels, spec.loss_kind, reference, mode)?;
    let mut best_delta = Array4::<T>::zeros(x.raw_dim());
    let mut best_loss = vec![T::neg_infinity(); n];
    let mut best_logits = logits0;

    let mut dir = vec![T::zero(); x.len() / n.max(1)];
    let mut gbuf = Vec::with_capacity(dir.len());
    let sparse = spec.threat.norm == Norm::L1;
    for restart in 0..spec.restarts {
        let mut g = rng.derive("restart", restart as u64).generator();
        let mut delta = Array4::<T>::zeros(x.raw_dim());
        if spec.threat.random_start {
            for mut s in delta.axis_iter_mut(Axis(0)) {
                geometry.random_start(&mut g, spec.threat.epsilon, s.as_slice_mut().expect("contiguous"));
            }
            clip_delta(x, &mut delta);
        }
        for step in 0..=spec.threat.steps {
            let xa = x + &delta;
            let (loss, logits, grad) = model.loss_and_grad(&xa, labels, spec.loss_kind, reference, mode)?;
            for i in 0..n {
                if loss[i] > best_loss[i] {
                    best_loss[i] = loss[i];
                    best_delta.index_axis_mut(Axis(0), i).assign(&delta.index_axis(Axis(0), i));
                    best_logits.row_mut(i).assign(&logits.row(i));
                }
            }
            if step == spec.threat.steps {
                break;
            }
            let grad = grad.as_standard_layout().into_owned();
            for ((mut d, gi), xi) in delta.axis_iter_mut(Axis(0)).zip(grad.axis_iter(Axis(0))).zip(x.axis_iter(Axis(0))) {
                let d = d.as_slice_mut().expect("contiguous");
                gbuf.clear();
                gbuf.extend(gi.iter().copied());
                if sparse {
                    // pixels pinned at 0 or 1 cannot move further; leave them out of the top-q pick
                    for ((gv, &dv), &xv) in gbuf.iter_mut().zip(d.iter()).zip(xi.iter()) {
                        let px = xv + dv;
                        if (px <= T::zero() && *gv < T::zero()) || (px >= T::one() && *gv > T::zero()) {
                            *gv = T::zero();
                        }
                    }
                }
                geometry.direction(&gbuf, &mut dir);
                for (dv, &u) in d.iter_mut().zip(&dir) {
                    *dv += alpha * u;
                }
                project_slice(d, spec.threat.norm, eps);
            }
            clip_delta(x, &mut delta);
        }
    }

    let success = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| argmax(best_logits.row(i).as_slice().expect("contiguous")) != y)
        .collect();
    let loss_after = best_loss
        .iter()
        .zip(&loss_before)
        .map(|(&b, &l0)| if b.is_finite() { b } else { l0 })
        .collect();
    Ok(AttackResult {
        adversarial: ImageBatch::clipped(x + &best_delta),
        delta: best_delta,
        loss_before,
        loss_after,
        success,
    })
}

/// One augmented view and the attack on it.
#[derive(Debug, Clone)]
pub struct BranchAttack {
    /// `T_i(x)` before perturbation.
    pub clean: ImageBatch,
    pub result: AttackResult,
}

/// Attacks each augmented view independently. For the KL objective the
/// reference is the model's prediction on that branch's clean view.
pub fn attack_branches(
    model: &Classifier,
    batch: &LabeledBatch,
    transforms: &[BatchTransform],
    spec: &AttackSpec,
    rng: &RngState,
    mode: Mode,
) -> Result<Vec<BranchAttack>> {
    transforms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let clean = t.apply(&batch.images)?;
            let view = LabeledBatch {
                images: clean.clone(),
                labels: batch.labels.clone(),
            };
            let reference = match spec.loss_kind {
                AttackLossKind::KlToReference => {
                    Some(softmax(model.logits(clean.data(), mode)?.view()).probs().to_owned())
                }
                _ => None,
            };
            let result = pgd_in_mode(model, &view, spec, reference.as_ref(), &rng.derive("branch", i as u64), mode)?;
            Ok(BranchAttack { clean, result })
        })
        .collect()
}

/// `(delta_1, delta_2)` for two concrete transforms, computed independently.
pub fn attack_pair(
    model: &Classifier,
    batch: &LabeledBatch,
    t1: &BatchTransform,
    t2: &BatchTransform,
    spec: &AttackSpec,
    rng: &RngState,
) -> Result<(AttackResult, AttackResult)> {
    let mut v = attack_branches(model, batch, &[t1.clone(), t2.clone()], spec, rng, Mode::Eval)?;
    let b = v.pop().expect("two branches").result;
    let a = v.pop().expect("two branches").result;
    Ok((a, b))
}
