#![allow(dead_code)]

use jefp::autodiff::Tensor;
use jefp::channel::{generate_realization, ScenarioConfig};
use jefp::model::{ModelConfig, Sample};
use jefp::nn::ParamStore;
use rand::Rng;

pub fn samples(cfg: &ModelConfig, first_seed: u64, n: usize) -> Vec<Sample> {
    let sc = ScenarioConfig::uma_like(cfg.nc, cfg.nt, cfg.k_max);
    (0..n).map(|i| Sample::from(&generate_realization(&sc, first_seed + i as u64).unwrap())).collect()
}

/// Largest relative error between the analytic gradient and central
/// differences over the flat parameter indices `picks`. `loss(store, true)`
/// returns the loss and per-parameter gradients, `loss(store, false)` only
/// the loss.
pub fn max_fd_error<F>(store: &ParamStore, picks: &[usize], h: f64, loss: F) -> f64
where
    F: Fn(&ParamStore, bool) -> (f64, Option<Vec<Tensor>>),
{
    let grads = loss(store, true).1.expect("gradients");
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.iter().copied()).collect();
    let flat = store.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &i in picks {
        let mut f = flat.clone();
        f[i] = flat[i] + h;
        probe.set_flat(&f);
        let up = loss(&probe, false).0;
        f[i] = flat[i] - h;
        probe.set_flat(&f);
        let down = loss(&probe, false).0;
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

/// `n` distinct random indices below `len` (all of them if `n >= len`).
pub fn pick(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n.min(len) {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n.min(len));
    idx
}
