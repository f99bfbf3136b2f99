//! Hand-written adversarial-training steps used as a bit-exact reference.

use consistency_at::attack::pgd_in_mode;
use consistency_at::data::DatasetSplit;
use consistency_at::nn::Mode;
use consistency_at::objective::softmax;
use consistency_at::train::{train_step, TrainConfig, TrainState};
use consistency_at::RngState;
use ndarray::{Array1, ArrayD};

/// Plain AT with SGD written out by hand on the first batch.
pub fn reference_at_steps(cfg: &TrainConfig, data: &DatasetSplit, steps: usize) -> Vec<Array1<f32>> {
    let mut state = TrainState::new(cfg).unwrap();
    let root = RngState::new(cfg.seed);
    let mut bufs: Option<Vec<ArrayD<f32>>> = None;
    let batch = data.train.slice(0, cfg.batch_size);
    let mut out = Vec::new();
    for step in 0..steps {
        let rng = root.derive("step", step as u64).derive("attack", 0).derive("branch", 0);
        let adv = pgd_in_mode(&state.model, &batch, &cfg.attack, None, &rng, Mode::Train)
            .unwrap()
            .adversarial;
        let (z, tape) = state.model.forward_tape(adv.data(), Mode::Train).unwrap();
        let n = batch.labels.len() as f32;
        let mut d = softmax(z.view()).probs().to_owned();
        for (i, &y) in batch.labels.iter().enumerate() {
            d[[i, y]] -= 1.0;
        }
        d.mapv_inplace(|v| v / n);
        let mut grads = state.model.net.params.zeros_like();
        state.model.backward(&tape, &d, Some(&mut grads));
        state.model.net.commit_running_stats(&tape);
        let (lr, m, wd) = (cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        let first = bufs.is_none();
        let bufs_v = bufs.get_or_insert_with(|| grads.values.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect());
        for ((w, g), buf) in state.model.net.params.values.iter_mut().zip(&grads.values).zip(bufs_v.iter_mut()) {
            for ((w, &g), b) in w.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
                let dg = g + wd * *w;
                *b = if first { dg } else { m * *b + dg };
                *w -= lr * *b;
            }
        }
        out.push(flat(&state.model.net.params));
    }
    out
}

pub fn flat(store: &consistency_at::nn::TensorStore<f32>) -> Array1<f32> {
    store.values.iter().flat_map(|v| v.iter().copied()).collect()
}

/// The same number of steps through `train_step`.
pub fn algorithm_steps(cfg: &TrainConfig, data: &DatasetSplit, steps: usize) -> Vec<Array1<f32>> {
    let mut state = TrainState::new(cfg).unwrap();
    let root = RngState::new(cfg.seed);
    let batch = data.train.slice(0, cfg.batch_size);
    (0..steps)
        .map(|s| {
            train_step(&mut state, &batch, cfg, cfg.lr, &root.derive("step", s as u64)).unwrap();
            flat(&state.model.net.params)
        })
        .collect()
}

