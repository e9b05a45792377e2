//! Image Classification Eraser: bi-level meta-training of the universal
//! surrogate and its resolution-agnostic attack pipeline.
//!
//! Each training iteration visits every source dataset round-robin: a batch
//! is perturbed by the customized one-step attack under the *current*
//! surrogate, the perturbed batch is scored by that dataset's source
//! classifiers, and the surrogate ascends the mean adversarial
//! cross-entropy. The perturbation stays on the tape, so the update is a
//! true meta-gradient through the inner step.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_autodiff::{grad, Tape};

use crate::attack_core::{customized_fgsm_step, entropy_ascent, sign_projection, LossMode, PerturbationRecord};
use crate::data::{batch_nchw, AttackBudget, Image, LabeledImageSet};
use crate::error::{GtaError, Result};
use crate::losses::graph_cross_entropy_mean;
use crate::models::{Classifier, DiffModel, SurrogateModel};

#[derive(Debug, Clone)]
pub struct IceResources {
    pub source_datasets: Vec<LabeledImageSet>,
    pub source_models: Vec<Vec<Classifier>>,
}

impl IceResources {
    pub fn new(source_datasets: Vec<LabeledImageSet>, source_models: Vec<Vec<Classifier>>) -> Result<Self> {
        let r = Self { source_datasets, source_models };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_datasets.is_empty() {
            return Err(GtaError::Invalid("need at least one source dataset".into()));
        }
        if self.source_models.len() != self.source_datasets.len() {
            return Err(GtaError::Invalid(format!(
                "{} datasets but {} model groups",
                self.source_datasets.len(),
                self.source_models.len()
            )));
        }
        for (set, models) in self.source_datasets.iter().zip(&self.source_models) {
            if set.is_empty() {
                return Err(GtaError::Invalid(format!("source dataset {} is empty", set.name)));
            }
            if models.is_empty() {
                return Err(GtaError::Invalid(format!("dataset {} has no source models", set.name)));
            }
            for m in models {
                if m.input_resolution != set.resolution() {
                    return Err(GtaError::Shape(format!(
                        "model '{}' expects {:?} but dataset {} is {:?}",
                        m.architecture_id,
                        m.input_resolution,
                        set.name,
                        set.resolution()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IceTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eps_c: f64,
    pub eps_c_decay: f64,
    /// Decay period in iterations; `None` scales the reference schedule
    /// (x0.9 every 3000 of 50000 iterations) to the configured run length.
    pub eps_c_period: Option<usize>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for IceTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 64,
            learning_rate: 0.01,
            eps_c: 3000.0,
            eps_c_decay: 0.9,
            eps_c_period: None,
            gamma1: 0.01,
            gamma2: 0.01,
            inner_steps: 1,
            seed: 0,
        }
    }
}

impl IceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1 {
            return Err(GtaError::Invalid("inner_steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.eps_c <= 0.0 || self.batch_size == 0 {
            return Err(GtaError::Invalid("rates and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn decay_period(&self) -> usize {
        match self.eps_c_period {
            Some(p) => p.max(1),
            None => ((3000 * self.iterations) / 50000).max(1),
        }
    }

    pub fn eps_c_at(&self, iteration: usize) -> f64 {
        self.eps_c * self.eps_c_decay.powi((iteration / self.decay_period()) as i32)
    }
}

/// One per-dataset outer-loss sample recorded during training.
#[derive(Debug, Clone)]
pub struct IceMetricsRow {
    pub iteration: usize,
    pub dataset: String,
    pub loss: f64,
}

pub fn metrics_csv(rows: &[IceMetricsRow]) -> String {
    let mut out = String::from("iteration,dataset,outer_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.10}\n", r.iteration, r.dataset, r.loss));
    }
    out
}

fn one_hot(labels: &[usize], k: usize) -> ArrayD<f64> {
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[labels.len(), k]));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

/// Outer loss over explicit batches: mean over datasets of the mean (over
/// that dataset's models) adversarial cross-entropy after `inner_steps`
/// customized inner perturbations. Returns the per-dataset losses and, when
/// requested, the analytic gradient with respect to surrogate parameters.
fn outer_pass(
    surrogate: &SurrogateModel,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    eps_c: f64,
    cfg: &IceTrainConfig,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Vec<ArrayD<f64>>>)> {
    if batches.len() != resources.source_datasets.len() {
        return Err(GtaError::Invalid("one batch per source dataset is required".into()));
    }
    let tape = Tape::new();
    let p = surrogate.net.bind(&tape);
    let mut per_dataset = Vec::with_capacity(batches.len());
    let mut total = None;
    for (d, (batch, labels)) in batches.iter().enumerate() {
        let set = &resources.source_datasets[d];
        let mut x = tape.leaf(batch.clone());
        for _ in 0..cfg.inner_steps {
            let params = &p;
            let forward = move |xin| surrogate.net.forward_probs(xin, params);
            x = customized_fgsm_step(&forward, x, eps_c, cfg.gamma1, cfg.gamma2);
        }
        let y = tape.leaf(one_hot(labels, set.num_classes));
        let mut ds_loss = None;
        for model in &resources.source_models[d] {
            let probs = model.forward_probs_graph(&tape, x);
            let ce = graph_cross_entropy_mean(probs, y);
            ds_loss = Some(match ds_loss {
                None => ce,
                Some(acc) => acc + ce,
            });
        }
        let ds_loss = ds_loss.unwrap().scale(1.0 / resources.source_models[d].len() as f64);
        per_dataset.push(ds_loss.to_array()[[0]]);
        total = Some(match total {
            None => ds_loss,
            Some(acc) => acc + ds_loss,
        });
    }
    let total = total.unwrap().scale(1.0 / batches.len() as f64);
    let grads = if want_grad {
        let gs = grad(total, &p);
        if gs.iter().all(|g| g.is_none()) {
            return Err(GtaError::Training(
                "outer loss is not connected to surrogate parameters".into(),
            ));
        }
        Some(
            gs.iter()
                .zip(&surrogate.net.params)
                .map(|(g, (_, v))| match g {
                    Some(g) => g.to_array(),
                    None => ArrayD::zeros(v.raw_dim()),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((per_dataset, grads))
}

/// Outer loss value only (for finite-difference checks).
pub fn ice_outer_loss(
    surrogate: &SurrogateModel,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    eps_c: f64,
    cfg: &IceTrainConfig,
) -> Result<f64> {
    let (per_dataset, _) = outer_pass(surrogate, resources, batches, eps_c, cfg, false)?;
    Ok(per_dataset.iter().sum::<f64>() / per_dataset.len() as f64)
}

/// Outer loss and its analytic gradient with respect to surrogate
/// parameters, flowing through the inner perturbation.
pub fn ice_outer_grad(
    surrogate: &SurrogateModel,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    eps_c: f64,
    cfg: &IceTrainConfig,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let (per_dataset, grads) = outer_pass(surrogate, resources, batches, eps_c, cfg, true)?;
    Ok((per_dataset.iter().sum::<f64>() / per_dataset.len() as f64, grads.unwrap()))
}

/// Meta-train the surrogate on the source zoo. Deterministic for a fixed
/// seed. Aborts on non-finite losses.
pub fn train_ice(
    mut surrogate: SurrogateModel,
    resources: &IceResources,
    cfg: &IceTrainConfig,
) -> Result<(SurrogateModel, Vec<IceMetricsRow>)> {
    resources.validate()?;
    cfg.validate()?;
    for set in &resources.source_datasets {
        surrogate.check_input(set.height, set.width)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
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
        let (per_dataset, grads) =
            outer_pass(&surrogate, resources, &batches, cfg.eps_c_at(it), cfg, true)?;
        for (set, &loss) in resources.source_datasets.iter().zip(&per_dataset) {
            if !loss.is_finite() {
                return Err(GtaError::Training(format!(
                    "outer loss diverged at iteration {it} on dataset {}",
                    set.name
                )));
            }
            metrics.push(IceMetricsRow { iteration: it, dataset: set.name.clone(), loss });
        }
        for (slot, g) in surrogate.net.params.iter_mut().zip(grads.unwrap()) {
            slot.1.zip_mut_with(&g, |w, &gw| *w += cfg.learning_rate * gw);
        }
    }
    Ok((surrogate, metrics))
}

/// T-step entropy ascent on the surrogate followed by sign-projection.
/// Never touches a target model.
pub fn ice_attack(surrogate: &SurrogateModel, image: &Image, budget: AttackBudget) -> Result<PerturbationRecord> {
    let (h, w, _) = image.dim();
    surrogate.check_input(h, w)?;
    let ascended = entropy_ascent(surrogate, image, budget, LossMode::Entropy)?;
    let adversarial = sign_projection(image, &ascended, budget.epsilon)?;
    Ok(PerturbationRecord::new(image.clone(), adversarial, "ICE", budget))
}
