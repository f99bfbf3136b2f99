//! Analytic gradients of the full objective against f64 central differences.

mod common;

use common::gradcheck::*;
use consistency_at::nn::Mode;
use consistency_at::objective::{total_loss, Branch, GradRequest};

#[test]
fn at_plain() {
    let worst = check("at", "none");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn at_js_consistency() {
    let worst = check("at", "js_consistency");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn trades_plain() {
    let worst = check("trades", "none");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn trades_js_consistency() {
    let worst = check("trades", "js_consistency");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn mart_plain() {
    let worst = check("mart", "none");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn mart_js_consistency() {
    let worst = check("mart", "js_consistency");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn at_mse_cr() {
    let worst = check("at", "mse_cr");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn at_kl_cr() {
    let worst = check("at", "kl_cr");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn at_augmix_cr() {
    let worst = check("at", "augmix_cr");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn at_conventional_cr() {
    let worst = check("at", "conventional_cr");
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn tempered_ablation_gradients() {
    let mut s = setup("at", "kl_cr", 3);
    s.config.temper_ablation = true;
    s.config.tau = 0.7;
    let out = total_loss(&s.model, &s.branches, &s.labels, &s.config, Mode::Train, GradRequest { params: true, inputs: false }).unwrap();
    let pg = out.param_grads.unwrap();
    let m64 = s.model.cast::<f64>();
    let b64: Vec<Branch<f64>> = s
        .branches
        .iter()
        .map(|b| Branch { clean: b.clean.cast(), adversarial: b.adversarial.cast(), attack_loss: b.attack_loss })
        .collect();
    let t = m64.net.params.index_of("linear.weight").unwrap();
    for j in 0..m64.net.params.values[t].len() {
        let eval_at = |d: f64| {
            let mut m = m64.clone();
            m.net.params.values[t].as_slice_mut().unwrap()[j] += d;
            loss64(&m, &b64, &s)
        };
        let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
        let analytic = pg.values[t].as_slice().unwrap()[j] as f64;
        assert!(rel_err(analytic, numeric) < TOL, "[{j}] {analytic} vs {numeric}");
    }
}
