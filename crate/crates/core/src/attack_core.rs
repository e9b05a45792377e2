//! Shared attack primitives: the customized one-step perturbation, T-step
//! entropy/KL ascent with optional input and gradient decorators, momentum
//! ascent, and sign-projection.

use std::f64::consts::FRAC_2_PI;

use ndarray::ArrayD;

use gta_autodiff::{grad, Tape, Tx};

use crate::data::{hwc_to_nchw, nchw_to_hwc, AttackBudget, Image};
use crate::error::{GtaError, Result};
use crate::losses::LOG_FLOOR;
use crate::models::DiffModel;

#[derive(Debug, Clone)]
pub struct PerturbationRecord {
    pub clean: Image,
    pub adversarial: Image,
    pub noise: Image,
    pub method: String,
    pub budget: AttackBudget,
}

impl PerturbationRecord {
    pub fn new(clean: Image, adversarial: Image, method: impl Into<String>, budget: AttackBudget) -> Self {
        let noise = &adversarial - &clean;
        Self { clean, adversarial, noise, method: method.into(), budget }
    }

    pub fn max_abs_noise(&self) -> f64 {
        self.noise.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Maximize the entropy of the model output (Shannon, nats).
    Entropy,
    /// Maximize KL divergence of the current output against the clean
    /// image's output distribution.
    KlVsClean,
}

/// Entropy summed over batch rows, recorded on the tape.
fn graph_entropy_sum<'a>(probs: Tx<'a>) -> Tx<'a> {
    -(probs * probs.max_scalar(LOG_FLOOR).ln()).sum_all()
}

/// One customized FGSM step (a scaled blend of normalized, arctan-squashed
/// and signed gradient), recorded entirely on the caller's tape so the
/// result stays differentiable with respect to anything the forward pass
/// touched — in particular surrogate parameters.
///
/// `forward` maps the input batch node to output probabilities (N, K).
/// Normalizers are per-image: sum and mean of |g| over each sample's
/// C*H*W entries. Samples whose gradient is identically zero pass through
/// unchanged (all three terms vanish).
pub fn customized_fgsm_step<'a>(
    forward: &dyn Fn(Tx<'a>) -> Tx<'a>,
    x: Tx<'a>,
    eps_c: f64,
    gamma1: f64,
    gamma2: f64,
) -> Tx<'a> {
    assert!(eps_c > 0.0, "eps_c must be positive");
    let probs = forward(x);
    let loss = graph_entropy_sum(probs);
    let g = grad(loss, &[x])[0].expect("input is not connected to the loss");
    customized_fgsm_from_grad(x, g, eps_c, gamma1, gamma2)
}

/// The pure blend of Eq.-2 terms applied to an explicit gradient node.
pub fn customized_fgsm_from_grad<'a>(
    x: Tx<'a>,
    g: Tx<'a>,
    eps_c: f64,
    gamma1: f64,
    gamma2: f64,
) -> Tx<'a> {
    let sh = x.shape();
    let n = sh[0];
    let per_image = (x.value().len() / n) as f64;
    let bshape: Vec<usize> = std::iter::once(n).chain(std::iter::repeat(1).take(sh.len() - 1)).collect();
    // floor the normalizers at a tiny constant: where sum|g| would be zero
    // the gradient itself is zero, so every term is zero and x is unchanged
    let s = g.abs().sum_to(&bshape).max_scalar(1e-300);
    let m = s.scale(1.0 / per_image);
    let term1 = (g / s.broadcast_to(&sh)).scale(gamma1);
    let term2 = (g / m.broadcast_to(&sh)).atan().scale(gamma2 * FRAC_2_PI);
    let term3 = g.sign();
    (x + (term1 + term2 + term3).scale(eps_c)).clip(0.0, 255.0)
}

/// Optional decorators around the ascent loop. `transform_input` rewrites
/// the image node before the forward pass (diverse-input style) and
/// `transform_grad` post-processes the raw pixel gradient (translation-
/// invariant kernel smoothing).
#[derive(Default)]
pub struct AscentHooks<'h> {
    pub transform_input: Option<&'h dyn for<'a> Fn(&'a Tape, Tx<'a>) -> Tx<'a>>,
    pub transform_grad: Option<&'h dyn Fn(&mut ArrayD<f64>)>,
}

fn check_resolution(model: &dyn DiffModel, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let min = model.min_input();
    if h < min || w < min {
        return Err(GtaError::Shape(format!(
            "image {h}x{w} is below the model's {min}x{min} minimum"
        )));
    }
    Ok(())
}

/// T steps of x <- clip(x + (eps/T) * sign(m)), where m is the gradient of
/// the chosen loss, optionally accumulated with momentum mu after L1
/// normalization. mu = 0 reduces to plain iterative ascent; T = 1 with
/// mu = 0 is exactly FGSM on the chosen loss.
pub fn ascent_loop(
    model: &dyn DiffModel,
    image: &Image,
    budget: AttackBudget,
    mu: f64,
    loss_mode: LossMode,
    hooks: &AscentHooks<'_>,
) -> Result<Image> {
    check_resolution(model, image)?;
    let step = budget.epsilon / budget.steps as f64;
    let clean_probs: Option<Vec<f64>> = match loss_mode {
        LossMode::Entropy => None,
        LossMode::KlVsClean => {
            let tape = Tape::new();
            let x = tape.leaf(hwc_to_nchw(image));
            let probs = model.forward_probs_graph(&tape, x);
            Some(probs.to_array().iter().map(|&p| p.max(LOG_FLOOR)).collect())
        }
    };
    let (h, w, c) = image.dim();
    let mut current = image.clone();
    let mut momentum: Option<ArrayD<f64>> = None;
    for _ in 0..budget.steps {
        let tape = Tape::new();
        let x = tape.leaf(hwc_to_nchw(&current));
        let xin = match hooks.transform_input {
            Some(f) => f(&tape, x),
            None => x,
        };
        let probs = model.forward_probs_graph(&tape, xin);
        let loss = match (&clean_probs, loss_mode) {
            (_, LossMode::Entropy) => graph_entropy_sum(probs),
            (Some(p0), LossMode::KlVsClean) => {
                // KL(p || p0) = sum p (ln p - ln p0); ln p0 enters as a constant
                let ln_p0 =
                    ArrayD::from_shape_vec(probs.shape(), p0.iter().map(|v| v.ln()).collect()).unwrap();
                let ln_p0 = tape.leaf(ln_p0);
                (probs * (probs.max_scalar(LOG_FLOOR).ln() - ln_p0)).sum_all()
            }
            _ => unreachable!(),
        };
        let mut g = match grad(loss, &[x])[0] {
            Some(g) => g.to_array(),
            None => break,
        };
        if let Some(f) = hooks.transform_grad {
            f(&mut g);
        }
        let dir = match mu {
            m if m > 0.0 => {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                if l1 > 0.0 {
                    g.mapv_inplace(|v| v / l1);
                }
                let buf = momentum.get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                buf.zip_mut_with(&g, |b, &gv| *b = m * *b + gv);
                buf.clone()
            }
            _ => g,
        };
        let dir_img = nchw_to_hwc(&dir, h, w, c);
        current.zip_mut_with(&dir_img, |x, &d| {
            *x = (*x + step * sign(d)).clamp(0.0, 255.0)
        });
    }
    Ok(current)
}

/// T-step signed ascent on the model's entropy (or KL-vs-clean) loss.
pub fn entropy_ascent(
    model: &dyn DiffModel,
    image: &Image,
    budget: AttackBudget,
    loss_mode: LossMode,
) -> Result<Image> {
    ascent_loop(model, image, budget, 0.0, loss_mode, &AscentHooks::default())
}

/// Momentum variant: m <- mu * m + g / ||g||_1, step along sign(m).
pub fn momentum_sign_ascent(
    model: &dyn DiffModel,
    image: &Image,
    budget: AttackBudget,
    mu: f64,
) -> Result<Image> {
    if mu < 0.0 {
        return Err(GtaError::Invalid(format!("mu must be >= 0, got {mu}")));
    }
    ascent_loop(model, image, budget, mu, LossMode::Entropy, &AscentHooks::default())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// clip(clean + eps * sign(attacked - clean)): every pixel moves by exactly
/// +-eps or not at all, then re-enters [0, 255].
pub fn sign_projection(clean: &Image, attacked: &Image, epsilon: f64) -> Result<Image> {
    if clean.dim() != attacked.dim() {
        return Err(GtaError::Shape(format!(
            "sign_projection shapes differ: {:?} vs {:?}",
            clean.dim(),
            attacked.dim()
        )));
    }
    let mut out = clean.clone();
    out.zip_mut_with(attacked, |c, &a| *c = (*c + epsilon * sign(a - *c)).clamp(0.0, 255.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn sign_projection_trivial_cases() {
        let clean = Array3::from_elem((4, 4, 3), 100.0);
        let attacked = Array3::from_elem((4, 4, 3), 103.0);
        let out = sign_projection(&clean, &attacked, 15.0).unwrap();
        assert!(out.iter().all(|&v| (v - 115.0).abs() < 1e-12));

        let same = sign_projection(&clean, &clean, 15.0).unwrap();
        assert_eq!(same, clean);

        let hi = Array3::from_elem((2, 2, 3), 250.0);
        let hi_att = Array3::from_elem((2, 2, 3), 251.0);
        let out = sign_projection(&hi, &hi_att, 15.0).unwrap();
        assert!(out.iter().all(|&v| (v - 255.0).abs() < 1e-12));
    }

    #[test]
    fn sign_projection_rejects_shape_mismatch() {
        let a = Array3::from_elem((4, 4, 3), 1.0);
        let b = Array3::from_elem((5, 4, 3), 1.0);
        assert!(sign_projection(&a, &b, 1.0).is_err());
    }
}
