//! Projection oracles.

use consistency_at::lp::project_slice;
use consistency_at::{Norm, RngState};
use rand::Rng;

pub const NORMS: [Norm; 3] = [Norm::L1, Norm::L2, Norm::LInf];

fn random_point(g: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| g.gen_range(-scale..scale)).collect()
}

/// Norm bound, interior fixity, idempotence and shrinkage on `points` random
/// vectors per norm.
pub fn sweep_norms(points: usize) {
    for norm in NORMS {
        let mut g = RngState::new(1).derive(norm.name(), 0).generator();
        for _ in 0..points {
            let d = g.gen_range(1..40);
            let eps = g.gen_range(0.01..2.0);
            let v = random_point(&mut g, d, 3.0);
            let mut p = v.clone();
            project_slice(&mut p, norm, eps);
            assert!(norm.of(&p) <= eps * (1.0 + 1e-9) + 1e-12, "{norm}: {} > {eps}", norm.of(&p));
            if norm.of(&v) <= eps {
                assert_eq!(p, v, "{norm}: interior point moved");
            }
            let mut again = p.clone();
            project_slice(&mut again, norm, eps);
            for (a, b) in again.iter().zip(&p) {
                assert!((a - b).abs() <= 1e-12, "{norm}: not idempotent");
            }
            // signs preserved, no coordinate grows
            for (a, b) in p.iter().zip(&v) {
                assert!(a.abs() <= b.abs() + 1e-15 && a * b >= 0.0);
            }
        }
    }
}

/// Threshold `theta` with `sum max(|v| - theta, 0) = eps`, by bisection.
pub fn l1_by_bisection(v: &[f64], eps: f64) -> Vec<f64> {
    if Norm::L1.of(v) <= eps {
        return v.to_vec();
    }
    let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
        if s > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    v.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Visits every point of a regular grid over `[-eps, eps]^d`, pulled onto the
/// l1 ball by radial rescaling.
pub fn l1_grid(d: usize, eps: f64, steps: usize, mut visit: impl FnMut(&[f64])) {
    let mut idx = vec![0usize; d];
    loop {
        let x: Vec<f64> = idx.iter().map(|&i| -eps + 2.0 * eps * i as f64 / steps as f64).collect();
        let n = Norm::L1.of(&x);
        if n > eps {
            visit(&x.iter().map(|c| c * eps / n).collect::<Vec<_>>());
        } else {
            visit(&x);
        }
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] <= steps {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            return;
        }
    }
}

/// l1 projection against an exhaustive grid over the ball for every d <= 5.
pub fn l1_grid_oracle() {
    let mut g = RngState::new(2).generator();
    for d in 1..=5 {
        let steps = [0, 4000, 400, 80, 30, 16][d];
        for _ in 0..6 {
            let eps = g.gen_range(0.2..1.0);
            let v = random_point(&mut g, d, 1.5);
            let mut p = v.clone();
            project_slice(&mut p, Norm::L1, eps);
            let dp = sq_dist(&v, &p);
            let mut best = f64::INFINITY;
            l1_grid(d, eps, steps, |y| {
                let dy = sq_dist(&v, y);
                best = best.min(dy);
                // a projection satisfies |v-y|^2 >= |v-p|^2 + |p-y|^2 for every y in the ball
                assert!(dy + 1e-9 >= dp + sq_dist(&p, y), "d={d} v={v:?} p={p:?} y={y:?}");
            });
            // and the best grid point is within grid resolution of it
            let cell = 2.0 * eps / steps as f64;
            assert!(best.sqrt() - dp.sqrt() <= cell * (d as f64).sqrt() + 1e-12, "d={d}");
        }
    }
}

/// l1 projection against a bisection solve of the threshold.
pub fn l1_bisection_agreement() {
    let mut g = RngState::new(3).generator();
    for d in 1..=5 {
        for _ in 0..2_000 {
            let eps = g.gen_range(0.05..2.0);
            let v = random_point(&mut g, d, 2.0);
            let mut p = v.clone();
            project_slice(&mut p, Norm::L1, eps);
            let want = l1_by_bisection(&v, eps);
            for (a, b) in p.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "d={d} v={v:?}: {p:?} vs {want:?}");
            }
        }
    }
}

