//! Finite-difference oracles for the three trainable attackers. These are
//! the load-bearing correctness checks for the bi-level machinery and run
//! on every build.

mod common;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_core::baselines::{uap_outer_grad, uap_outer_loss};
use gta_core::data::{batch_nchw, Image};
use gta_core::ice::{ice_outer_grad, ice_outer_loss, IceResources, IceTrainConfig};
use gta_core::models::build_surrogate_with;
use gta_core::sine_attack::{sa_init, sa_outer_grad, sa_outer_loss, SineParams};

fn batches_of(resources: &IceResources) -> Vec<(ArrayD<f64>, Vec<usize>)> {
    resources
        .source_datasets
        .iter()
        .map(|set| {
            let imgs: Vec<&Image> = set.images.iter().collect();
            (batch_nchw(&imgs), set.labels.clone())
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn ice_meta_gradient_matches_finite_differences() {
    let resources = common::toy_resources(12, 3, 6, 71);
    let batches = batches_of(&resources);
    let mut surrogate = build_surrogate_with(4, [3, 4, 5, 6], 123).unwrap();
    // small eps_c keeps the inner step away from the pixel clamp so the
    // finite-difference secant never crosses a kink
    let cfg = IceTrainConfig { eps_c: 2.0, ..IceTrainConfig::default() };
    let (_, grads) = ice_outer_grad(&surrogate, &resources, &batches, cfg.eps_c, &cfg).unwrap();

    // probe the 6 largest-magnitude coordinates across all tensors
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        for (ei, &v) in g.iter().enumerate() {
            entries.push((ti, ei, v.abs()));
        }
    }
    entries.sort_by(|a, b| b.2.total_cmp(&a.2));
    let h = 1e-4;
    for &(ti, ei, _) in entries.iter().take(6) {
        let analytic = grads[ti].as_slice().unwrap()[ei];
        let base = surrogate.net.params[ti].1.as_slice().unwrap()[ei];
        surrogate.net.params[ti].1.as_slice_mut().unwrap()[ei] = base + h;
        let lp = ice_outer_loss(&surrogate, &resources, &batches, cfg.eps_c, &cfg).unwrap();
        surrogate.net.params[ti].1.as_slice_mut().unwrap()[ei] = base - h;
        let lm = ice_outer_loss(&surrogate, &resources, &batches, cfg.eps_c, &cfg).unwrap();
        surrogate.net.params[ti].1.as_slice_mut().unwrap()[ei] = base;
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            rel_err(analytic, fd) <= 1e-3,
            "tensor {ti} entry {ei}: analytic {analytic} vs fd {fd}"
        );
    }
}

#[test]
fn sa_gradient_matches_finite_differences_on_all_nine() {
    let resources = common::toy_resources(12, 3, 6, 72);
    let batches = batches_of(&resources);
    let omega = sa_init(5);
    let epsilon = 10.0;
    let (_, analytic) = sa_outer_grad(&omega, &resources, &batches, epsilon).unwrap();
    let h = 1e-5;
    let flat = omega.to_vec();
    for k in 0..9 {
        let mut plus = flat;
        plus[k] += h;
        let mut minus = flat;
        minus[k] -= h;
        let lp = sa_outer_loss(&SineParams::from_vec(&plus).unwrap(), &resources, &batches, epsilon).unwrap();
        let lm = sa_outer_loss(&SineParams::from_vec(&minus).unwrap(), &resources, &batches, epsilon).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            rel_err(analytic[k], fd) <= 1e-4,
            "omega[{k}]: analytic {} vs fd {fd}",
            analytic[k]
        );
    }
}

#[test]
fn uap_gradient_matches_finite_differences_on_sampled_entries() {
    let resources = common::toy_resources(12, 3, 6, 73);
    let batches = batches_of(&resources);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut nu = ArrayD::from_shape_fn(IxDyn(&[1, 3, 100, 100]), |_| rng.gen_range(-0.5..0.5));
    let epsilon = 10.0;
    let (_, analytic) = uap_outer_grad(&nu, &resources, &batches, epsilon).unwrap();
    let mut entries: Vec<(usize, f64)> =
        analytic.iter().enumerate().map(|(i, &v)| (i, v.abs())).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    let h = 1e-5;
    for &(idx, _) in entries.iter().take(10) {
        let base = nu.as_slice().unwrap()[idx];
        nu.as_slice_mut().unwrap()[idx] = base + h;
        let lp = uap_outer_loss(&nu, &resources, &batches, epsilon).unwrap();
        nu.as_slice_mut().unwrap()[idx] = base - h;
        let lm = uap_outer_loss(&nu, &resources, &batches, epsilon).unwrap();
        nu.as_slice_mut().unwrap()[idx] = base;
        let fd = (lp - lm) / (2.0 * h);
        let an = analytic.as_slice().unwrap()[idx];
        assert!(rel_err(an, fd) <= 1e-3, "nu[{idx}]: analytic {an} vs fd {fd}");
    }
}
