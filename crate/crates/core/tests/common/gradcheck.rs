//! Analytic gradients of the full objective against f64 central differences.

use consistency_at::model::{Classifier, ModelSpec};
use consistency_at::nn::Mode;
use consistency_at::objective::attack_loss::AttackLossKind;
use consistency_at::objective::{total_loss, Branch, GradRequest, LossConfig};
use consistency_at::{ImageBatch, RngState};
use ndarray::Array4;
use rand::Rng;

pub const N: usize = 6;
pub const K: usize = 4;
pub const SHAPE: (usize, usize, usize) = (3, 8, 8);
pub const COORDS: usize = 20;
pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
// Gradients below this magnitude are compared on an absolute scale.
pub const FLOOR: f64 = 1e-3;

/// Every method with and without consistency, plus the ablation regularizers.
pub const COMBOS: [(&str, &str); 10] = [
    ("at", "none"),
    ("at", "js_consistency"),
    ("trades", "none"),
    ("trades", "js_consistency"),
    ("mart", "none"),
    ("mart", "js_consistency"),
    ("at", "mse_cr"),
    ("at", "kl_cr"),
    ("at", "augmix_cr"),
    ("at", "conventional_cr"),
];

pub fn images(rng: &RngState) -> Array4<f32> {
    let mut g = rng.generator();
    Array4::from_shape_fn((N, SHAPE.0, SHAPE.1, SHAPE.2), |_| g.gen_range(0.05f32..0.95))
}

pub fn attack_kind(method: &str) -> AttackLossKind {
    match method {
        "trades" => AttackLossKind::KlToReference,
        _ => AttackLossKind::CrossEntropy,
    }
}

pub struct Setup {
    pub model: Classifier<f32>,
    pub branches: Vec<Branch<f32>>,
    pub labels: Vec<usize>,
    pub config: LossConfig,
}

pub fn setup(method: &str, regularizer: &str, seed: u64) -> Setup {
    let root = RngState::new(seed);
    let spec = ModelSpec::new("tiny_cnn", K, SHAPE).with_cifar_normalization();
    let model = Classifier::new(spec, root.derive("model", 0)).unwrap();
    let config = LossConfig {
        method: method.into(),
        regularizer: regularizer.into(),
        lambda: if regularizer == "none" { 0.0 } else { 1.5 },
        ..LossConfig::default()
    };
    let n_branches = config.branches().unwrap();
    let branches = (0..n_branches)
        .map(|i| {
            let clean = images(&root.derive("clean", i as u64));
            let noise = images(&root.derive("noise", i as u64));
            let adv = &clean * 0.9 + &noise * 0.1;
            Branch {
                clean: ImageBatch::new(clean).unwrap(),
                adversarial: ImageBatch::new(adv).unwrap(),
                attack_loss: attack_kind(method),
            }
        })
        .collect();
    let labels = (0..N).map(|i| i % K).collect();
    Setup {
        model,
        branches,
        labels,
        config,
    }
}

pub fn loss64(model: &Classifier<f64>, branches: &[Branch<f64>], s: &Setup) -> f64 {
    total_loss(model, branches, &s.labels, &s.config, Mode::Train, GradRequest::default())
        .unwrap()
        .total
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks parameter and input gradients at `COORDS` random coordinates each;
/// returns the worst relative error.
pub fn check(method: &str, regularizer: &str) -> f64 {
    let s = setup(method, regularizer, 7);
    let out = total_loss(
        &s.model,
        &s.branches,
        &s.labels,
        &s.config,
        Mode::Train,
        GradRequest {
            params: true,
            inputs: true,
        },
    )
    .unwrap();
    let pg = out.param_grads.as_ref().unwrap();
    let m64 = s.model.cast::<f64>();
    let b64: Vec<Branch<f64>> = s
        .branches
        .iter()
        .map(|b| Branch {
            clean: b.clean.cast(),
            adversarial: b.adversarial.cast(),
            attack_loss: b.attack_loss,
        })
        .collect();
    let mut g = RngState::new(99).derive(regularizer, method.len() as u64).generator();
    let mut worst = 0.0f64;

    // parameters
    for _ in 0..COORDS {
        let t = g.gen_range(0..m64.net.params.len());
        let j = g.gen_range(0..m64.net.params.values[t].len());
        let eval_at = |v: f64| {
            let mut m = m64.clone();
            m.net.params.values[t].as_slice_mut().unwrap()[j] = v;
            loss64(&m, &b64, &s)
        };
        let w = m64.net.params.values[t].as_slice().unwrap()[j];
        let numeric = (eval_at(w + H) - eval_at(w - H)) / (2.0 * H);
        let analytic = pg.values[t].as_slice().unwrap()[j] as f64;
        let e = rel_err(analytic, numeric);
        assert!(
            e < TOL,
            "{method}+{regularizer} param {}[{j}]: analytic {analytic} numeric {numeric}",
            m64.net.params.names[t]
        );
        worst = worst.max(e);
    }

    // inputs: adversarial, and clean where the objective reads it
    let mut slots: Vec<(usize, bool)> = (0..b64.len()).map(|i| (i, false)).collect();
    slots.extend(
        out.clean_input_grads
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_some())
            .map(|(i, _)| (i, true)),
    );
    for k in 0..COORDS {
        let (bi, clean) = slots[k % slots.len()];
        let grad = if clean {
            out.clean_input_grads[bi].as_ref().unwrap()
        } else {
            out.adv_input_grads[bi].as_ref().unwrap()
        };
        let j = g.gen_range(0..grad.len());
        let eval_at = |delta: f64| {
            let mut b = b64.clone();
            let target = if clean { &mut b[bi].clean } else { &mut b[bi].adversarial };
            let mut data = target.data().clone();
            data.as_slice_mut().unwrap()[j] += delta;
            *target = ImageBatch::new(data).unwrap();
            loss64(&m64, &b, &s)
        };
        let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
        let analytic = grad.as_slice().unwrap()[j] as f64;
        let e = rel_err(analytic, numeric);
        assert!(
            e < TOL,
            "{method}+{regularizer} input b{bi} clean={clean} [{j}]: analytic {analytic} numeric {numeric}"
        );
        worst = worst.max(e);
    }
    worst
}

