//! Finite-difference checks for first- and second-order gradients.

use gta_autodiff::{grad, Tape, Tx};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(1e-9..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Central finite differences of a scalar function of one flat input array.
fn fd_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// A little network touching conv, pooling, resize, padding, softmax and the
/// pointwise ops, reduced to a scalar.
fn net_scalar<'a>(t: &'a Tape, x: Tx<'a>, w1: Tx<'a>, w2: Tx<'a>) -> Tx<'a> {
    let h = x.conv2d(w1, 1).max_scalar(0.0).maxpool2();
    let h = h.resize((5, 5)).pad_zero(1, 1, (7, 7));
    let h = h.conv2d(w2, 0).atan().sin();
    let n = h.shape()[0];
    let c = h.shape()[1];
    let pooled = h.global_avg_pool().reshape(&[n, c]);
    let d = pooled.softmax_rows();
    let eps = t.scalar(1e-12);
    let safe = d.max_scalar(0.0) + eps;
    (-(d * safe.ln())).sum_all()
}

#[test]
fn first_order_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = randn(&mut rng, &[2, 3, 8, 8]);
    let w10 = randn(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.3);
    let w20 = randn(&mut rng, &[5, 4, 3, 3]).mapv(|v| v * 0.3);

    let eval = |x: &ArrayD<f64>, w1: &ArrayD<f64>, w2: &ArrayD<f64>| -> f64 {
        let t = Tape::new();
        let (xt, w1t, w2t) = (t.leaf(x.clone()), t.leaf(w1.clone()), t.leaf(w2.clone()));
        let y = net_scalar(&t, xt, w1t, w2t);
        let v = y.to_array();
        v[[0]]
    };

    let t = Tape::new();
    let (xt, w1t, w2t) = (t.leaf(x0.clone()), t.leaf(w10.clone()), t.leaf(w20.clone()));
    let y = net_scalar(&t, xt, w1t, w2t);
    let gs = grad(y, &[xt, w1t, w2t]);

    let gx = gs[0].unwrap().to_array();
    let gw1 = gs[1].unwrap().to_array();
    let gw2 = gs[2].unwrap().to_array();

    let fx = fd_grad(&|x| eval(x, &w10, &w20), &x0, 1e-5);
    let fw1 = fd_grad(&|w| eval(&x0, w, &w20), &w10, 1e-5);
    let fw2 = fd_grad(&|w| eval(&x0, &w10, w), &w20, 1e-5);

    // tolerance allows for relu/maxpool kinks crossed by the secant
    assert!(max_rel_err(&gx, &fx) < 1e-4, "x grad err {}", max_rel_err(&gx, &fx));
    assert!(max_rel_err(&gw1, &fw1) < 1e-4, "w1 grad err {}", max_rel_err(&gw1, &fw1));
    assert!(max_rel_err(&gw2, &fw2) < 1e-4, "w2 grad err {}", max_rel_err(&gw2, &fw2));
}

/// Second-order check: F(w) = sum over pixels of (d entropy / d x)^2 for a
/// conv-softmax model. dF/dw is a gradient through a recorded gradient.
#[test]
fn second_order_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0 = randn(&mut rng, &[1, 2, 5, 5]);
    let w0 = randn(&mut rng, &[3, 2, 3, 3]).mapv(|v| v * 0.5);

    let f = |w: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
        let t = Tape::new();
        let xt = t.leaf(x0.clone());
        let wt = t.leaf(w.clone());
        let feat = xt.conv2d(wt, 0).atan();
        let n = feat.shape()[0];
        let c = feat.shape()[1];
        let d = feat.global_avg_pool().reshape(&[n, c]).softmax_rows();
        let ent = (-(d * d.max_scalar(1e-300).ln())).sum_all();
        let gx = grad(ent, &[xt])[0].unwrap();
        let obj = (gx * gx).sum_all();
        let v = obj.to_array()[[0]];
        let gw = grad(obj, &[wt])[0].map(|g| g.to_array());
        (v, gw)
    };

    let (_, gw) = f(&w0);
    let gw = gw.expect("weight gradient must exist through the inner gradient");
    let fd = fd_grad(&|w| f(w).0, &w0, 1e-5);
    let err = max_rel_err(&gw, &fd);
    assert!(err < 1e-4, "second-order grad err {}", err);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 6, 7]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let g = randn(&mut rng, &[2, 4, 6, 7]);

    let y = gta_autodiff::kernels::conv2d(&x, &w, 1);
    let xt = gta_autodiff::kernels::conv2d_transpose(&g, &w, 1, (6, 7));
    let lhs: f64 = (&y * &g).sum();
    let rhs: f64 = (&x * &xt).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

    let gw = gta_autodiff::kernels::conv2d_wgrad(&x, &g, 1, [4, 3, 3, 3]);
    let rhs2: f64 = (&w * &gw).sum();
    assert!((lhs - rhs2).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn resize_identity_and_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[1, 3, 8, 8]);
    let same = gta_autodiff::kernels::resize_bilinear(&x, (8, 8));
    assert_eq!(x, same);

    let y = gta_autodiff::kernels::resize_bilinear(&x, (13, 5));
    let g = randn(&mut rng, &[1, 3, 13, 5]);
    let xt = gta_autodiff::kernels::resize_bilinear_adjoint(&g, (8, 8));
    let lhs: f64 = (&y * &g).sum();
    let rhs: f64 = (&x * &xt).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn broadcast_reduce_roundtrip_shapes() {
    let t = Tape::new();
    let a = t.leaf(ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), 2.0));
    let s = a.sum_to(&[2, 1, 1, 1]);
    assert_eq!(s.shape(), vec![2, 1, 1, 1]);
    assert_eq!(s.to_array()[[0, 0, 0, 0]], 2.0 * 48.0);
    let b = s.broadcast_to(&[2, 3, 4, 4]);
    assert_eq!(b.shape(), vec![2, 3, 4, 4]);
    // each element of `a` feeds its per-image sum, which fans out 3*4*4 times
    let g = grad(b.sum_all(), &[a]);
    let ga = g[0].unwrap().to_array();
    assert!(ga.iter().all(|&v| (v - 48.0).abs() < 1e-12));
}
