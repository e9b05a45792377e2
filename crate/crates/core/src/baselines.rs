//! Ensemble transfer-attack baselines under the GTA setting: the
//! resize / per-model ascent / fuse / sign-project pipeline for
//! FGSM, PGD, MI, DI and TI-DIM, the joint single-image variant, and a
//! resolution-bridged UAP.

use std::cell::RefCell;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gta_autodiff::{grad, kernels, Tape, Tx};

use crate::attack_core::{ascent_loop, sign_projection, AscentHooks, LossMode, PerturbationRecord};
use crate::data::{batch_nchw, hwc_to_nchw, nchw_to_hwc, resize, AttackBudget, Image};
use crate::error::{GtaError, Result};
use crate::ice::{IceMetricsRow, IceResources};
use crate::losses::{graph_cross_entropy_mean, LOG_FLOOR};
use crate::models::{Classifier, DiffModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    /// One full-budget signed entropy step.
    Fgsm,
    /// T-step signed entropy ascent.
    Pgd,
    /// Momentum iterative variant; the reference setting is mu = 1.
    Mi { mu: f64 },
    /// Diverse-input: each step resizes the input to a random intermediate
    /// size and zero-pads to a fixed enlarged canvas (apply probability 1).
    Di { seed: u64 },
    /// Translation-invariant: gradients are smoothed with a Gaussian
    /// kernel; combined with momentum as in the usual TI-DIM stack.
    TiDim { kernel_size: usize, sigma: f64 },
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Fgsm => "FGSM",
            BaselineMethod::Pgd => "PGD",
            BaselineMethod::Mi { .. } => "MI",
            BaselineMethod::Di { .. } => "DI",
            BaselineMethod::TiDim { .. } => "TI-DIM",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineMethod::Mi { mu } if mu < 0.0 => {
                Err(GtaError::Invalid(format!("MI mu must be >= 0, got {mu}")))
            }
            BaselineMethod::TiDim { kernel_size, sigma } => {
                if kernel_size % 2 == 0 || kernel_size == 0 {
                    return Err(GtaError::Invalid("TI kernel size must be odd".into()));
                }
                if sigma <= 0.0 {
                    return Err(GtaError::Invalid("TI sigma must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Extra padding range for the diverse-input transform, in pixels.
const DI_PAD_MIN: usize = 4;
const DI_PAD_MAX: usize = 12;

fn gaussian_kernel(size: usize, sigma: f64) -> ArrayD<f64> {
    let half = (size / 2) as isize;
    let mut k = ArrayD::<f64>::zeros(IxDyn(&[1, 1, size, size]));
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as isize - half, j as isize - half);
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            k[[0, 0, i, j]] = v;
            total += v;
        }
    }
    k.mapv_inplace(|v| v / total);
    k
}

/// Depthwise same-padding convolution of an NCHW gradient with the kernel.
fn smooth_gradient(g: &mut ArrayD<f64>, kernel: &ArrayD<f64>) {
    let sh = g.shape().to_vec();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let pad = kernel.shape()[2] / 2;
    let mut out = g.clone();
    for ni in 0..n {
        for ci in 0..c {
            let slice = g
                .slice(ndarray::s![ni..ni + 1, ci..ci + 1, .., ..])
                .to_owned()
                .into_dyn();
            let sm = kernels::conv2d(&slice, kernel, pad);
            for i in 0..h {
                for j in 0..w {
                    out[[ni, ci, i, j]] = sm[[0, 0, i, j]];
                }
            }
        }
    }
    *g = out;
}

fn attack_one_model(
    model: &Classifier,
    image: &Image,
    method: &BaselineMethod,
    budget: AttackBudget,
    loss_mode: LossMode,
    model_index: usize,
) -> Result<Image> {
    match *method {
        BaselineMethod::Fgsm => ascent_loop(
            model,
            image,
            AttackBudget { epsilon: budget.epsilon, steps: 1 },
            0.0,
            loss_mode,
            &AscentHooks::default(),
        ),
        BaselineMethod::Pgd => ascent_loop(model, image, budget, 0.0, loss_mode, &AscentHooks::default()),
        BaselineMethod::Mi { mu } => ascent_loop(model, image, budget, mu, loss_mode, &AscentHooks::default()),
        BaselineMethod::Di { seed } => {
            // pin the closure to the higher-ranked hook signature
            fn hook<F: for<'a> Fn(&'a Tape, Tx<'a>) -> Tx<'a>>(f: F) -> F {
                f
            }
            let rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ (model_index as u64).wrapping_mul(0x9e37)));
            let transform = hook(move |_tape: &Tape, x| {
                let sh = x.shape();
                let (h, w) = (sh[2], sh[3]);
                let (canvas_h, canvas_w) = (h + DI_PAD_MAX, w + DI_PAD_MAX);
                let mut r = rng.borrow_mut();
                let rh = r.gen_range(h..=h + DI_PAD_MAX - DI_PAD_MIN);
                let rw = r.gen_range(w..=w + DI_PAD_MAX - DI_PAD_MIN);
                let top = r.gen_range(0..=canvas_h - rh);
                let left = r.gen_range(0..=canvas_w - rw);
                x.resize((rh, rw)).pad_zero(top, left, (canvas_h, canvas_w))
            });
            let hooks = AscentHooks { transform_input: Some(&transform), transform_grad: None };
            ascent_loop(model, image, budget, 0.0, loss_mode, &hooks)
        }
        BaselineMethod::TiDim { kernel_size, sigma } => {
            let kernel = gaussian_kernel(kernel_size, sigma);
            let smooth = move |g: &mut ArrayD<f64>| smooth_gradient(g, &kernel);
            let hooks = AscentHooks { transform_input: None, transform_grad: Some(&smooth) };
            ascent_loop(model, image, budget, 1.0, loss_mode, &hooks)
        }
    }
}

/// §-style ensemble pipeline: resize the victim image into every source
/// model, attack each copy independently, resize the results back, average
/// them, and sign-project onto the epsilon ball around the clean image.
pub fn ensemble_transfer_attack(
    source_models: &[Classifier],
    image: &Image,
    method: BaselineMethod,
    budget: AttackBudget,
    loss_mode: LossMode,
) -> Result<PerturbationRecord> {
    if source_models.is_empty() {
        return Err(GtaError::Invalid("ensemble attack needs at least one source model".into()));
    }
    method.validate()?;
    let (h, w, _) = image.dim();
    let per_model: Vec<Image> = source_models
        .par_iter()
        .enumerate()
        .map(|(mi, model)| -> Result<Image> {
            let (mh, mw) = model.input_resolution;
            let local = resize(image, mh, mw)?;
            let adv = attack_one_model(model, &local, &method, budget, loss_mode, mi)?;
            resize(&adv, h, w)
        })
        .collect::<Result<_>>()?;
    let mut fused = Array3::<f64>::zeros((h, w, 3));
    for adv in &per_model {
        fused += adv;
    }
    fused.mapv_inplace(|v| v / per_model.len() as f64);
    let adversarial = sign_projection(image, &fused, budget.epsilon)?;
    Ok(PerturbationRecord::new(image.clone(), adversarial, method.name(), budget))
}

/// Appendix-style joint variant: one image is ascended on the fused mean
/// entropy of all source models, differentiating through the per-model
/// bilinear resizes, then sign-projected.
pub fn joint_single_image_attack(
    source_models: &[Classifier],
    image: &Image,
    budget: AttackBudget,
) -> Result<PerturbationRecord> {
    if source_models.is_empty() {
        return Err(GtaError::Invalid("joint attack needs at least one source model".into()));
    }
    let (h, w, _) = image.dim();
    let step = budget.epsilon / budget.steps as f64;
    let mut current = image.clone();
    for _ in 0..budget.steps {
        let tape = Tape::new();
        let x = tape.leaf(hwc_to_nchw(&current));
        let mut loss = None;
        for model in source_models {
            let xm = if model.input_resolution == (h, w) {
                x
            } else {
                x.resize(model.input_resolution)
            };
            let probs = model.forward_probs_graph(&tape, xm);
            let ent = -(probs * probs.max_scalar(LOG_FLOOR).ln()).sum_all();
            loss = Some(match loss {
                None => ent,
                Some(acc) => acc + ent,
            });
        }
        let loss = loss.unwrap().scale(1.0 / source_models.len() as f64);
        let g = grad(loss, &[x])[0].expect("image not connected to loss").to_array();
        let g = nchw_to_hwc(&g, h, w, 3);
        current.zip_mut_with(&g, |x, &d| {
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *x = (*x + step * s).clamp(0.0, 255.0)
        });
    }
    let adversarial = sign_projection(image, &current, budget.epsilon)?;
    Ok(PerturbationRecord::new(image.clone(), adversarial, "Joint", budget))
}

pub const UAP_SIDE: usize = 100;

/// The universal perturbation carrier: a fixed 100x100x3 real array that is
/// bilinearly resized to each victim resolution.
#[derive(Debug, Clone)]
pub struct UapArtifact {
    pub nu: Image,
}

impl UapArtifact {
    pub fn validate(&self) -> Result<()> {
        if self.nu.dim() != (UAP_SIDE, UAP_SIDE, 3) {
            return Err(GtaError::Shape(format!("UAP carrier must be {UAP_SIDE}x{UAP_SIDE}x3, got {:?}", self.nu.dim())));
        }
        if self.nu.iter().any(|v| !v.is_finite()) {
            return Err(GtaError::Invalid("UAP carrier has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UapTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for UapTrainConfig {
    fn default() -> Self {
        Self { iterations: 200, batch_size: 64, learning_rate: 0.5, epsilon: 15.0, seed: 0 }
    }
}

fn uap_outer_pass(
    nu: &ArrayD<f64>,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
    want_grad: bool,
) -> Result<(f64, Option<ArrayD<f64>>)> {
    let tape = Tape::new();
    let nu_node = tape.leaf(nu.clone());
    let mut total = None;
    for (d, (batch, labels)) in batches.iter().enumerate() {
        let set = &resources.source_datasets[d];
        let sh = batch.shape().to_vec();
        let x = tape.leaf(batch.clone());
        let z = nu_node.resize((sh[2], sh[3]));
        let xadv = (x + z.scale(epsilon).broadcast_to(&sh)).clip(0.0, 255.0);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[labels.len(), set.num_classes]));
        for (i, &l) in labels.iter().enumerate() {
            y[[i, l]] = 1.0;
        }
        let y = tape.leaf(y);
        let mut ds_loss = None;
        for model in &resources.source_models[d] {
            let probs = model.forward_probs_graph(&tape, xadv);
            let ce = graph_cross_entropy_mean(probs, y);
            ds_loss = Some(match ds_loss {
                None => ce,
                Some(acc) => acc + ce,
            });
        }
        let ds_loss = ds_loss.unwrap().scale(1.0 / resources.source_models[d].len() as f64);
        total = Some(match total {
            None => ds_loss,
            Some(acc) => acc + ds_loss,
        });
    }
    let total = total.unwrap().scale(1.0 / batches.len() as f64);
    let loss = total.to_array()[[0]];
    let g = if want_grad {
        Some(
            grad(total, &[nu_node])[0]
                .map(|g| g.to_array())
                .unwrap_or_else(|| ArrayD::zeros(nu.raw_dim())),
        )
    } else {
        None
    };
    Ok((loss, g))
}

/// Outer loss value only (for finite-difference checks). `nu` is NCHW
/// (1, 3, 100, 100).
pub fn uap_outer_loss(
    nu: &ArrayD<f64>,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
) -> Result<f64> {
    uap_outer_pass(nu, resources, batches, epsilon, false).map(|(l, _)| l)
}

pub fn uap_outer_grad(
    nu: &ArrayD<f64>,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
) -> Result<(f64, ArrayD<f64>)> {
    uap_outer_pass(nu, resources, batches, epsilon, true).map(|(l, g)| (l, g.unwrap()))
}

/// Train the carrier by gradient ascent on the mean adversarial
/// cross-entropy, differentiating through the per-resolution resize.
pub fn train_uap(resources: &IceResources, cfg: &UapTrainConfig) -> Result<(UapArtifact, Vec<IceMetricsRow>)> {
    resources.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // start near zero so early steps explore all of the loss surface
    let mut nu = ArrayD::from_shape_fn(IxDyn(&[1, 3, UAP_SIDE, UAP_SIDE]), |_| rng.gen_range(-0.05..0.05));
    let mut metrics = Vec::new();
    for it in 0..cfg.iterations {
        let batches: Vec<(ArrayD<f64>, Vec<usize>)> = resources
            .source_datasets
            .iter()
            .map(|set| {
                let idx: Vec<usize> = (0..cfg.batch_size.min(set.len()))
                    .map(|_| rng.gen_range(0..set.len()))
                    .collect();
                let imgs: Vec<&Image> = idx.iter().map(|&i| &set.images[i]).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
                (batch_nchw(&imgs), labels)
            })
            .collect();
        let (loss, g) = uap_outer_pass(&nu, resources, &batches, cfg.epsilon, true)?;
        if !loss.is_finite() {
            return Err(GtaError::Training(format!("UAP loss diverged at iteration {it}")));
        }
        metrics.push(IceMetricsRow { iteration: it, dataset: "all".into(), loss });
        nu.zip_mut_with(&g.unwrap(), |v, &gv| *v += cfg.learning_rate * gv);
    }
    let artifact = UapArtifact { nu: nchw_to_hwc(&nu, UAP_SIDE, UAP_SIDE, 3) };
    artifact.validate()?;
    Ok((artifact, metrics))
}

/// clip(x + eps * sign(resize(nu, resolution(x)))). The resize is raw
/// bilinear (no pixel clamp: nu is not a pixel map).
pub fn uap_attack(artifact: &UapArtifact, image: &Image, epsilon: f64) -> PerturbationRecord {
    let (h, w, _) = image.dim();
    let resized = if (h, w) == (UAP_SIDE, UAP_SIDE) {
        artifact.nu.clone()
    } else {
        let nchw = hwc_to_nchw(&artifact.nu);
        let out = kernels::resize_bilinear(&nchw, (h, w));
        nchw_to_hwc(&out, h, w, 3)
    };
    let mut adv = image.clone();
    adv.zip_mut_with(&resized, |x, &n| {
        let s = if n > 0.0 {
            1.0
        } else if n < 0.0 {
            -1.0
        } else {
            0.0
        };
        *x = (*x + epsilon * s).clamp(0.0, 255.0)
    });
    PerturbationRecord::new(image.clone(), adv, "UAP", AttackBudget { epsilon, steps: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.5);
        let total: f64 = k.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((k[[0, 0, 1, 2]] - k[[0, 0, 3, 2]]).abs() < 1e-15);
        assert!((k[[0, 0, 2, 1]] - k[[0, 0, 2, 3]]).abs() < 1e-15);
    }

    #[test]
    fn uap_attack_constant_carrier() {
        let artifact = UapArtifact { nu: Array3::from_elem((UAP_SIDE, UAP_SIDE, 3), 0.3) };
        let img = Array3::from_elem((36, 44, 3), 100.0);
        let rec = uap_attack(&artifact, &img, 15.0);
        assert!(rec.noise.iter().all(|&v| (v - 15.0).abs() < 1e-12));

        let native = Array3::from_elem((UAP_SIDE, UAP_SIDE, 3), 50.0);
        let rec = uap_attack(&artifact, &native, 8.0);
        assert!(rec.max_abs_noise() <= 8.0 + 1e-12);
    }

    #[test]
    fn uap_noise_is_universal_per_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nu = Array3::from_shape_fn((UAP_SIDE, UAP_SIDE, 3), |_| rng.gen_range(-1.0..1.0));
        let artifact = UapArtifact { nu };
        let a = Array3::from_elem((30, 30, 3), 128.0);
        let b = Array3::from_elem((30, 30, 3), 100.0);
        let ra = uap_attack(&artifact, &a, 5.0);
        let rb = uap_attack(&artifact, &b, 5.0);
        assert_eq!(ra.noise, rb.noise);
    }
}
