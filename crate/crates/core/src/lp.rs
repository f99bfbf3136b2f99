//! lp-ball geometry: norms, threat models and Euclidean projection.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
    LInf,
}

impl Norm {
    /// Parses `p` as used in configs (`1`, `2`, `inf`).
    pub fn from_p(p: &str) -> Result<Self> {
        match p.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "∞" => Ok(Norm::LInf),
            other => Err(Error::NormNotSupported(other.to_string())),
        }
    }

    pub fn from_p_value(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(Norm::L1)
        } else if p == 2.0 {
            Ok(Norm::L2)
        } else if p.is_infinite() && p > 0.0 {
            Ok(Norm::LInf)
        } else {
            Err(Error::NormNotSupported(p.to_string()))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::LInf => "linf",
        }
    }

    pub fn of<T: Real>(self, v: &[T]) -> T {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|&x| x * x).sum::<T>().sqrt(),
            Norm::LInf => v.iter().fold(T::zero(), |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Norm::from_p(s)
    }
}

/// Attacker constraint set and iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    /// Radius in `[0, 1]` pixel scale (8/255 ≈ 0.0314).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl ThreatModel {
    pub fn new(norm: Norm, epsilon: f64, steps: usize, step_size: f64, random_start: bool) -> Result<Self> {
        let t = Self {
            norm,
            epsilon,
            steps,
            step_size,
            random_start,
        };
        t.validate()?;
        Ok(t)
    }

    /// Evaluation-style threat model with step size `2ε/k`.
    pub fn with_eval_step(norm: Norm, epsilon: f64, steps: usize) -> Result<Self> {
        Self::new(norm, epsilon, steps, 2.0 * epsilon / steps as f64, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        Ok(())
    }
}

/// Projects a single flattened perturbation onto the lp ball of radius `epsilon`.
pub fn project_slice<T: Real>(v: &mut [T], norm: Norm, epsilon: T) {
    match norm {
        Norm::LInf => {
            for x in v.iter_mut() {
                *x = x.max(-epsilon).min(epsilon);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of(v);
            if n > epsilon {
                let scale = epsilon / n;
                for x in v.iter_mut() {
                    *x *= scale;
                }
            }
        }
        Norm::L1 => project_l1(v, epsilon),
    }
}

/// Euclidean projection onto the l1 ball via the sorting-based simplex
/// projection of the magnitudes.
fn project_l1<T: Real>(v: &mut [T], epsilon: T) {
    if Norm::L1.of(v) <= epsilon {
        return;
    }
    let mut mags: Vec<T> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut theta = T::zero();
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - epsilon) / T::of((j + 1) as f64);
        if u - t > T::zero() {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        let m = (x.abs() - theta).max(T::zero());
        *x = if *x < T::zero() { -m } else { m };
    }
}

/// Per-sample projection of a `[N, C, H, W]` perturbation.
pub fn project_lp<T: Real>(delta: &Array4<T>, norm: Norm, epsilon: T) -> Result<Array4<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut out = delta.as_standard_layout().into_owned();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        let slice = sample
            .as_slice_mut()
            .expect("standard layout sample is contiguous");
        project_slice(slice, norm, epsilon);
    }
    Ok(out)
}

/// Per-sample norms of a `[N, C, H, W]` array.
pub fn sample_norms<T: Real>(delta: &Array4<T>, norm: Norm) -> Vec<T> {
    delta
        .axis_iter(Axis(0))
        .map(|s| {
            let s = s.as_standard_layout();
            norm.of(s.as_slice().expect("contiguous"))
        })
        .collect()
}
