//! Hand-computed oracles for the data, model, and attack primitives.

use std::f64::consts::PI;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_autodiff::Tape;
use gta_core::attack_core::{
    customized_fgsm_from_grad, entropy_ascent, momentum_sign_ascent, sign_projection, LossMode,
};
use gta_core::checkpoint::{load_classifier, save_classifier};
use gta_core::data::{
    coordinate_map, crop_top_left, generate_desk_dataset, hwc_to_nchw, load_archive, resize,
    save_archive, AttackBudget, DeskSpec,
};
use gta_core::losses::entropy;
use gta_core::models::{build_classifier, build_surrogate_with, DiffModel};

#[test]
fn resize_checkerboard_averages_to_midgray() {
    let board = Array3::from_shape_fn((4, 4, 3), |(i, j, _)| if (i + j) % 2 == 0 { 0.0 } else { 255.0 });
    let down = resize(&board, 2, 2).unwrap();
    for &v in down.iter() {
        assert!((v - 127.5).abs() < 1e-9, "expected 127.5, got {v}");
    }
}

#[test]
fn resize_same_shape_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Array3::from_shape_fn((13, 9, 3), |_| rng.gen_range(0.0..255.0));
    let out = resize(&img, 13, 9).unwrap();
    assert_eq!(img, out);
}

#[test]
fn resize_preserves_constants_across_scales() {
    let img = Array3::from_elem((10, 14, 3), 77.25);
    for (h, w) in [(5, 7), (20, 28), (33, 9)] {
        let out = resize(&img, h, w).unwrap();
        assert!(out.iter().all(|&v| (v - 77.25).abs() < 1e-9));
    }
}

#[test]
fn coordinate_map_definition() {
    let m = coordinate_map(3, 5);
    assert_eq!(m.x_map[[2, 4]], 4.0);
    assert_eq!(m.y_map[[2, 4]], 2.0);
    assert_eq!(m.x_map[[0, 0]], 0.0);
    assert_eq!(m.y_map[[1, 3]], 1.0);
}

#[test]
fn crop_is_top_left_window() {
    let img = Array3::from_shape_fn((6, 6, 3), |(i, j, c)| (i * 100 + j * 10 + c) as f64);
    let crop = crop_top_left(&img, 2, 3).unwrap();
    assert_eq!(crop.dim(), (2, 3, 3));
    assert_eq!(crop[[1, 2, 0]], img[[1, 2, 0]]);
    assert!(crop_top_left(&img, 7, 3).is_err());
}

#[test]
fn desk_generation_is_deterministic_and_valid() {
    let spec = DeskSpec {
        name: "desk-a".into(),
        height: 20,
        width: 20,
        num_classes: 3,
        samples_per_class: 4,
        seed: 99,
    };
    let a = generate_desk_dataset(&spec).unwrap();
    let b = generate_desk_dataset(&spec).unwrap();
    assert_eq!(a.len(), 12);
    for (x, y) in a.images.iter().zip(&b.images) {
        assert_eq!(x, y);
    }
    assert!(generate_desk_dataset(&DeskSpec { height: 8, ..spec.clone() }).is_err());
}

#[test]
fn archive_round_trip_is_exact_on_integer_pixels() {
    let spec = DeskSpec {
        name: "arch".into(),
        height: 16,
        width: 16,
        num_classes: 2,
        samples_per_class: 3,
        seed: 5,
    };
    let mut set = generate_desk_dataset(&spec).unwrap();
    for img in &mut set.images {
        img.mapv_inplace(|v| v.round());
    }
    let path = std::env::temp_dir().join("gta-archive-test.bin");
    save_archive(&set, &path).unwrap();
    let back = load_archive(&path).unwrap();
    assert_eq!(back.name, set.name);
    assert_eq!(back.num_classes, set.num_classes);
    assert_eq!(back.labels, set.labels);
    for (a, b) in set.images.iter().zip(&back.images) {
        assert_eq!(a, b);
    }
    std::fs::remove_file(&path).ok();
}

fn scalar_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[test]
fn customized_step_constant_gradient_closed_form() {
    let tape = Tape::new();
    let n_px = 12.0; // 1x3x2x2
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), 100.0));
    let g = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), 0.7));
    let eps_c = 5.0;
    let out = customized_fgsm_from_grad(x, g, eps_c, 0.01, 0.01);
    let expect = 100.0 + eps_c * (0.01 / n_px + 0.005 + 1.0);
    for &v in out.to_array().iter() {
        assert!((v - expect).abs() < 1e-12, "expected {expect}, got {v}");
    }
}

#[test]
fn customized_step_zero_gradient_is_identity() {
    let tape = Tape::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 3, 2, 2]), 42.0));
    let g = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3, 2, 2])));
    let out = customized_fgsm_from_grad(x, g, 3000.0, 0.01, 0.01);
    for &v in out.to_array().iter() {
        assert!((v - 42.0).abs() < 1e-12);
    }
}

#[test]
fn customized_step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xv = ArrayD::from_shape_fn(IxDyn(&[1, 3, 2, 2]), |_| rng.gen_range(40.0..200.0));
    let gv = ArrayD::from_shape_fn(IxDyn(&[1, 3, 2, 2]), |_| rng.gen_range(-2.0..2.0));
    let tape = Tape::new();
    let x = tape.leaf(xv.clone());
    let g = tape.leaf(gv.clone());
    let (eps_c, g1, g2) = (5.0, 0.01, 0.01);
    let out = customized_fgsm_from_grad(x, g, eps_c, g1, g2);
    let out = out.to_array();

    let s: f64 = gv.iter().map(|v| v.abs()).sum();
    let m = s / 12.0;
    for (i, (&xi, &gi)) in xv.iter().zip(gv.iter()).enumerate() {
        let inc = eps_c * (g1 * gi / s + g2 * (2.0 / PI) * (gi / m).atan() + scalar_sign(gi));
        let expect = (xi + inc).clamp(0.0, 255.0);
        let got = out.as_slice().unwrap()[i];
        assert!((got - expect).abs() < 1e-12, "pixel {i}: {got} vs {expect}");
    }
}

#[test]
fn entropy_ascent_raises_entropy_on_frozen_model() {
    let model = build_classifier("plain-mini", 4, (16, 16), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(40.0..215.0));
    let before = entropy(&model_probs(&model, &img));
    let budget = AttackBudget { epsilon: 0.05, steps: 5 };
    let out = entropy_ascent(&model, &img, budget, LossMode::Entropy).unwrap();
    let after = entropy(&model_probs(&model, &out));
    assert!(after >= before - 1e-12, "entropy fell: {before} -> {after}");
}

fn model_probs(model: &gta_core::models::Classifier, img: &Array3<f64>) -> Vec<f64> {
    model.predict(img).probabilities
}

#[test]
fn zero_epsilon_leaves_image_unchanged() {
    let model = build_classifier("plain-mini", 3, (16, 16), 2).unwrap();
    let img = Array3::from_elem((16, 16, 3), 90.0);
    let out = entropy_ascent(&model, &img, AttackBudget { epsilon: 0.0, steps: 3 }, LossMode::Entropy).unwrap();
    assert_eq!(out, img);
}

#[test]
fn momentum_zero_equals_plain_ascent_bitwise() {
    let model = build_classifier("vgg-mini", 3, (16, 16), 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(20.0..235.0));
    let budget = AttackBudget { epsilon: 15.0, steps: 4 };
    let a = entropy_ascent(&model, &img, budget, LossMode::Entropy).unwrap();
    let b = momentum_sign_ascent(&model, &img, budget, 0.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kl_mode_runs_and_respects_budget() {
    let model = build_classifier("resnet-mini", 3, (16, 16), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(20.0..235.0));
    let budget = AttackBudget { epsilon: 8.0, steps: 4 };
    let out = entropy_ascent(&model, &img, budget, LossMode::KlVsClean).unwrap();
    let max_dev = out
        .iter()
        .zip(img.iter())
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
    assert!(max_dev <= 8.0 + 1e-12);
}

#[test]
fn sign_projection_fuzz_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..1000 {
        let h = rng.gen_range(1..6);
        let w = rng.gen_range(1..6);
        let eps = rng.gen_range(0.0..40.0);
        let clean = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..255.0));
        let attacked = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(-50.0..305.0));
        let out = sign_projection(&clean, &attacked, eps).unwrap();
        for ((&o, &c), &a) in out.iter().zip(clean.iter()).zip(attacked.iter()) {
            assert!((0.0..=255.0).contains(&o));
            assert!((o - c).abs() <= eps + 1e-12);
            // the pre-clip move is exactly +-eps or 0
            let moved = c + eps * scalar_sign(a - c);
            assert!((o - moved.clamp(0.0, 255.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn surrogate_output_length_is_resolution_independent() {
    let s = build_surrogate_with(17, [3, 4, 5, 6], 9).unwrap();
    for side in [8usize, 12, 16, 24, 33] {
        let img = Array3::from_elem((side, side, 3), 50.0);
        let p = s.predict(&img).unwrap();
        assert_eq!(p.len(), 17);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let tiny = Array3::from_elem((7, 7, 3), 50.0);
    assert!(s.predict(&tiny).is_err());
}

#[test]
fn unknown_architecture_is_rejected_by_name() {
    let err = build_classifier("resnet-9000", 4, (16, 16), 0).unwrap_err();
    assert!(err.to_string().contains("resnet-9000"));
}

#[test]
fn classifier_checkpoint_round_trip_is_exact() {
    let model = build_classifier("mobile-mini", 5, (16, 16), 444).unwrap();
    let path = std::env::temp_dir().join("gta-ck-test.bin");
    save_classifier(&model, &path).unwrap();
    let back = load_classifier(&path).unwrap();
    assert_eq!(back.architecture_id, "mobile-mini");
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..255.0));
    let (pa, pb) = (model.predict(&img), back.predict(&img));
    for (a, b) in pa.probabilities.iter().zip(&pb.probabilities) {
        assert!((a - b).abs() < 1e-10);
    }
    // corrupting any byte must be detected by the checksum
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_classifier(&path).is_err());
    std::fs::remove_file(&path).ok();
}

#[test]
fn diff_model_forward_matches_predict() {
    let model = build_classifier("vgg-mini", 4, (16, 16), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..255.0));
    let direct = model.predict(&img).probabilities;
    let tape = Tape::new();
    let x = tape.leaf(hwc_to_nchw(&img));
    let via_graph = model.forward_probs_graph(&tape, x).to_array();
    for (a, b) in direct.iter().zip(via_graph.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}
