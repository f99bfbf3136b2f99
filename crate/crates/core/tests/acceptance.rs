//! Acceptance report: one line per criterion, written straight to stderr so it
//! shows without `--nocapture`.
//!
//! The overfitting experiment (criterion 6) needs CIFAR-10 and long training;
//! it lives in the ignored test `criterion_6_overfitting_smoke`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{fixture_data, fixture_models, gradcheck, lpcheck, reference};
use consistency_at::attack::{pgd, AttackModel, AttackSpec};
use consistency_at::augment::AugmentPolicy;
use consistency_at::config::{RunConfig, DATA_ENV};
use consistency_at::data::{cifar10_dir, synthetic_split, CIFAR_TRAIN_FILES};
use consistency_at::eval::{
    black_box_transfer, clean_accuracy, confusing_class_rate, mce_from_errors, robust_accuracy, sweep, unseen_sweep,
};
use consistency_at::model::{Classifier, ModelSpec};
use consistency_at::nn::Mode;
use consistency_at::objective::attack_loss::AttackLossKind;
use consistency_at::objective::prob::{ce_from_logits, mse_rows};
use consistency_at::objective::{
    cross_entropy, js_divergence, kl_divergence, softmax, softmax_temperature, total_loss, Branch, GradRequest,
    LossConfig, ProbVector,
};
use consistency_at::train::{run_training, RunOptions, TrainConfig, METRICS_FILE, TERMS_FILE};
use consistency_at::{ImageBatch, LabeledBatch, Norm, RngState, ThreatModel};
use ndarray::{array, Array2, Array4, Axis};
use rand::Rng;

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run(n: usize, budget: Option<Duration>, f: impl FnOnce()) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let over = budget.is_some_and(|b| took > b);
    let ok = outcome.is_ok() && !over;
    let detail = match (&outcome, over) {
        (Err(e), _) => e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()),
        (Ok(()), true) => format!("over the {:?} budget", budget.unwrap()),
        _ => String::new(),
    };
    report(&format!(
        "criterion {n}: {} ({:.1}s){}{}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        if detail.is_empty() { "" } else { ": " },
        detail
    ));
    ok
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn pv(v: &[f64]) -> ProbVector<f64> {
    ProbVector::new(v.to_vec()).unwrap()
}

fn criterion_1() {
    let ln2 = std::f64::consts::LN_2;
    let e = std::f64::consts::E;
    let p = softmax(array![[0.0f64, 0.0], [1.0, 0.0]].view());
    assert!(close(p.probs()[[0, 0]], 0.5, 1e-6) && close(p.probs()[[1, 0]], e / (1.0 + e), 1e-6));
    assert!(close(kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap(), ln2, 1e-6));
    assert_eq!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
    assert!(close(js_divergence(&[&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])]).unwrap(), ln2, 1e-6));
    let c = pv(&[0.2, 0.3, 0.5]);
    assert_eq!(js_divergence(&[&c, &c, &c]).unwrap(), 0.0);
    let uniform = softmax(Array2::<f64>::zeros((1, 10)).view());
    assert!(close(cross_entropy(&uniform, &[0]).unwrap(), 10f64.ln(), 1e-6));
    let (mse, ..) = mse_rows(&array![[1.0f64, 0.0]], &array![[0.0, 1.0]]).unwrap();
    assert!(close(mse[0], 2.0, 1e-6));

    let mut g = RngState::new(1).derive("criterion", 1).generator();
    let mut simplex = |k: usize| {
        let v: Vec<f64> = (0..k).map(|_| g.gen_range(1e-9..1.0)).collect();
        let s: f64 = v.iter().sum();
        pv(&v.iter().map(|x| x / s).collect::<Vec<_>>())
    };
    for _ in 0..10_000 {
        let (a, b, c) = (simplex(6), simplex(6), simplex(6));
        let two = js_divergence(&[&a, &b]).unwrap();
        let three = js_divergence(&[&a, &b, &c]).unwrap();
        assert!((0.0..=ln2 + 1e-12).contains(&two));
        assert!((0.0..=3f64.ln() + 1e-12).contains(&three));
    }
    let mut g = RngState::new(2).derive("criterion", 1).generator();
    for _ in 0..100_000 {
        let k = g.gen_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| g.gen_range(-20.0..20.0)).collect();
        let tau = g.gen_range(0.05..5.0);
        let p = softmax_temperature(Array2::from_shape_vec((1, k), z.clone()).unwrap().view(), tau).unwrap();
        let want = z.iter().enumerate().fold(0, |b, (i, v)| if *v > z[b] { i } else { b });
        assert_eq!(p.row(0).argmax(), want);
    }
}

fn criterion_2() {
    for (method, reg) in gradcheck::COMBOS {
        let worst = gradcheck::check(method, reg);
        assert!(worst < gradcheck::TOL, "{method}+{reg}: {worst}");
    }
}

fn criterion_3() {
    lpcheck::sweep_norms(10_000);
    lpcheck::l1_grid_oracle();
    lpcheck::l1_bisection_agreement();
}

fn ref_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ref_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn ref_loss(method: &str, clean: &[f64], adv: &[f64], y: usize, cfg: &LossConfig) -> f64 {
    let (p, q) = (ref_softmax(clean), ref_softmax(adv));
    match method {
        "at" => -q[y].ln(),
        "trades" => -p[y].ln() + cfg.beta * ref_kl(&p, &q),
        _ => {
            let other = q.iter().enumerate().filter(|(k, _)| *k != y).map(|(_, v)| *v).fold(0.0, f64::max);
            -q[y].ln() - (1.0 - other).ln() + cfg.gamma * (1.0 - p[y]) * ref_kl(&p, &q)
        }
    }
}

fn criterion_4() {
    let model: Classifier<f64> = Classifier::new(ModelSpec::new("tiny_cnn", 4, (3, 8, 8)), RngState::new(4))
        .unwrap()
        .cast();
    let mut g = RngState::new(5).generator();
    let mut batch = || ImageBatch::new(Array4::from_shape_fn((8, 3, 8, 8), |_| g.gen_range(0.0..1.0))).unwrap();
    let (clean, adv) = (batch(), batch());
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let rows = |x: &ImageBatch<f64>| -> Vec<Vec<f64>> {
        let z = model.forward(x, Mode::Train).unwrap();
        z.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    };
    let (zc, za) = (rows(&clean), rows(&adv));
    for method in ["at", "trades", "mart"] {
        let kind = if method == "trades" { AttackLossKind::KlToReference } else { AttackLossKind::CrossEntropy };
        let want = (0..8).map(|i| ref_loss(method, &zc[i], &za[i], labels[i], &LossConfig::default())).sum::<f64>() / 8.0;
        // identity transforms: both branches see the same attacked input
        let branch = Branch { clean: clean.clone(), adversarial: adv.clone(), attack_loss: kind };
        let cfg = LossConfig { method: method.into(), lambda: 0.0, ..LossConfig::default() };
        let out = total_loss(&model, &[branch.clone(), branch], &labels, &cfg, Mode::Train, GradRequest::default()).unwrap();
        assert!(close(out.total, want, 1e-6), "{method}: {} vs {want}", out.total);
    }

    let cfg = TrainConfig {
        model: ModelSpec::new("tiny_cnn", 4, (3, 8, 8)),
        epochs: 1,
        batch_size: 8,
        lr: 0.05,
        loss: LossConfig { lambda: 0.0, ..LossConfig::default() },
        augment: AugmentPolicy::none(),
        seed: 7,
        ..TrainConfig::default()
    };
    let data = synthetic_split(4, 8, 4, (3, 8, 8), RngState::new(3));
    let want = reference::reference_at_steps(&cfg, &data, 10);
    let got = reference::algorithm_steps(&cfg, &data, 10);
    for (s, (a, b)) in want.iter().zip(&got).enumerate() {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "step {s} differs");
    }
}

/// Two-class model with logits `[0, w x]` on a single pixel.
struct Logistic(f64);

impl AttackModel<f64> for Logistic {
    fn logits(&self, x: &Array4<f64>, _: Mode) -> consistency_at::Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((x.shape()[0], 2), |(i, k)| if k == 0 { 0.0 } else { self.0 * x[[i, 0, 0, 0]] }))
    }

    fn loss_and_grad(
        &self,
        x: &Array4<f64>,
        labels: &[usize],
        _: AttackLossKind,
        _: Option<&Array2<f64>>,
        mode: Mode,
    ) -> consistency_at::Result<(Vec<f64>, Array2<f64>, Array4<f64>)> {
        let z = self.logits(x, mode)?;
        let (per, dz) = ce_from_logits(&z, labels)?;
        let dx = Array4::from_shape_fn(x.raw_dim(), |(i, ..)| dz[[i, 1]] * self.0);
        Ok((per, z, dx))
    }
}

fn criterion_5() {
    let (m, _) = fixture_models();
    let test = &fixture_data().test;
    let rng = RngState::new(5);
    let clean = clean_accuracy(m, test).unwrap();
    for name in ["pgd20_eval", "cw100_eval"] {
        let mut spec = AttackSpec::preset(name).unwrap();
        spec.threat.epsilon = 0.0;
        assert_eq!(robust_accuracy(m, test, &spec, &rng, 64).unwrap(), clean);
    }
    let spec = AttackSpec::new(
        ThreatModel::new(Norm::LInf, 8.0 / 255.0, 10, 2.0 / 255.0, false).unwrap(),
        AttackLossKind::CrossEntropy,
        1,
    )
    .unwrap();
    let r = pgd(m, test, &spec, None, &rng).unwrap();
    assert!(r.loss_after.iter().zip(&r.loss_before).all(|(a, b)| a >= b));
    let grid: Vec<(Norm, f64)> = [2.0, 4.0, 8.0].iter().map(|&e| (Norm::LInf, e)).collect();
    let cells = sweep(m, test, &grid, 20, &rng, 64).unwrap();
    for w in cells.windows(2) {
        assert!(w[1].accuracy <= w[0].accuracy + 0.5, "{cells:?}");
    }
    // loss softplus(-w x) for label 1; one signed step of 0.05 from x = 0.1
    let one = AttackSpec::new(ThreatModel::new(Norm::LInf, 0.05, 1, 0.05, false).unwrap(), AttackLossKind::CrossEntropy, 1)
        .unwrap();
    let x = LabeledBatch::new(ImageBatch::new(Array4::from_elem((1, 1, 1, 1), 0.1)).unwrap(), vec![1], 2).unwrap();
    let r = pgd(&Logistic(2.0), &x, &one, None, &RngState::new(0)).unwrap();
    assert!(close(r.delta[[0, 0, 0, 0]], -0.05, 1e-6));
    assert!(close(r.loss_after[0], (1.0 + (-2.0 * 0.05f64).exp()).ln(), 1e-6));
}

fn criterion_7() {
    let r = mce_from_errors(&[("a".into(), vec![10.0, 20.0, 30.0, 40.0, 50.0]), ("b".into(), vec![0.0; 5])], vec![])
        .unwrap();
    assert_eq!(r.mce, 15.0);
    let constant: Vec<(String, Vec<f64>)> = (0..19).map(|i| (format!("c{i}"), vec![37.5; 5])).collect();
    assert_eq!(mce_from_errors(&constant, vec![]).unwrap().mce, 37.5);

    let (m, _) = fixture_models();
    let test = fixture_data().test.slice(0, 32);
    let rng = RngState::new(6);
    let names: Vec<String> = unseen_sweep(m, &test, &rng, 64).unwrap().iter().map(|c| c.name()).collect();
    assert_eq!(
        names,
        [
            "pgd100_linf_eps4",
            "pgd100_linf_eps16",
            "pgd100_l2_eps150",
            "pgd100_l2_eps300",
            "pgd100_l1_eps2000",
            "pgd100_l1_eps4000"
        ]
    );
    let spec = AttackSpec::preset("pgd20_eval").unwrap();
    assert_eq!(
        black_box_transfer(m, m, &test, &spec, &rng, 64).unwrap(),
        robust_accuracy(m, &test, &spec, &rng, 64).unwrap()
    );
    let d = synthetic_split(2, 1, 64, (3, 8, 8), RngState::new(4));
    let binary = Classifier::new(ModelSpec::new("tiny_cnn", 2, (3, 8, 8)), RngState::new(3)).unwrap();
    let strong = AttackSpec::eval(Norm::LInf, 64.0 / 255.0, 10, AttackLossKind::CrossEntropy).unwrap();
    assert_eq!(confusing_class_rate(&binary, &d.test, &strong, &rng, 64).unwrap(), Some(100.0));
}

fn recipe(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/recipes").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn criterion_8() {
    let cfg = recipe("synthetic_smoke.cfg");
    let data = cfg.data.load(cfg.train.model.num_classes, cfg.train.seed).unwrap();
    let runs: Vec<tempfile::TempDir> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let opts = RunOptions { out_dir: Some(dir.path().into()), stop_after: None };
            run_training(&cfg.train, &data, &opts).unwrap();
            dir
        })
        .collect();
    for f in [METRICS_FILE, TERMS_FILE] {
        let a = std::fs::read(runs[0].path().join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(runs[1].path().join(f)).unwrap(), "{f} differs");
    }
}

fn cifar_root() -> PathBuf {
    recipe("desk_none.cfg").data.resolved_root()
}

#[test]
fn acceptance_report() {
    let mut ok = true;
    ok &= run(1, Some(Duration::from_secs(60)), criterion_1);
    ok &= run(2, Some(Duration::from_secs(300)), criterion_2);
    ok &= run(3, Some(Duration::from_secs(120)), criterion_3);
    ok &= run(4, None, criterion_4);
    ok &= run(5, None, criterion_5);
    let dir = cifar10_dir(&cifar_root());
    let heavy = "`cargo test --release -p consistency-at --test acceptance -- --ignored`";
    if CIFAR_TRAIN_FILES.iter().all(|f| dir.join(f).is_file()) {
        report(&format!("criterion 6: NOT RUN (three 30-epoch trainings; run {heavy})"));
    } else {
        report(&format!(
            "criterion 6: NOT RUN, BLOCKED (CIFAR-10 binaries not found in {}; set {DATA_ENV} and run {heavy})",
            dir.display()
        ));
    }
    ok &= run(7, None, criterion_7);
    ok &= run(8, None, criterion_8);
    assert!(ok, "acceptance criteria failed; see the report above");
}

fn best_last_gap(metrics: &[consistency_at::metrics::MetricsRow]) -> (f64, f64, f64) {
    let best = metrics.iter().map(|r| r.pgd10_acc).fold(f64::MIN, f64::max);
    let last = metrics.last().expect("at least one epoch").pgd10_acc;
    (best, last, best - last)
}

#[test]
#[ignore = "needs CIFAR-10 and about half an hour of CPU"]
fn criterion_6_overfitting_smoke() {
    let ok = run(6, None, || {
        let mut results = Vec::new();
        for name in ["desk_none.cfg", "desk_autoaugment.cfg", "desk_consistency.cfg"] {
            let cfg = recipe(name);
            let data = cfg.data.load(cfg.train.model.num_classes, cfg.train.seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let out = run_training(&cfg.train, &data, &RunOptions { out_dir: Some(dir.path().into()), stop_after: None })
                .unwrap();
            let (best, last, gap) = best_last_gap(&out.metrics);
            report(&format!("  {name}: best {best:.2} last {last:.2} gap {gap:.2}"));
            results.push((best, last, gap));
        }
        let (none, aug, cons) = (results[0], results[1], results[2]);
        assert!(none.2 > aug.2, "no-augmentation gap {} not above AutoAugment gap {}", none.2, aug.2);
        assert!(cons.1 >= aug.1 - 1.0, "consistency last {} below augmentation-only last {} - 1", cons.1, aug.1);
    });
    assert!(ok);
}
