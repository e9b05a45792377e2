//! Classifier zoo, the fully convolutional surrogate, supervised training,
//! and checkpointing.
//!
//! All networks here are built from stride-1 3x3/1x1 convolutions, 2x2 max
//! pooling and global average pooling, so every model accepts any input
//! resolution at or above its pooling-imposed minimum. Classifiers still
//! carry a nominal `input_resolution` that training and evaluation enforce.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_autodiff::grad;
pub use gta_autodiff::{Tape, Tx};

use crate::data::{batch_nchw, hwc_to_nchw, Image, LabeledImageSet};
use crate::error::{GtaError, Result};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv { w: usize, b: usize, pad: usize },
    Relu,
    MaxPool,
    /// conv-relu-conv plus a skip path (1x1 conv when channels change),
    /// followed by relu.
    Residual { w1: usize, b1: usize, w2: usize, b2: usize, skip: Option<(usize, usize)> },
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: Vec<(String, ArrayD<f64>)>,
}

struct NetBuilder {
    layers: Vec<Layer>,
    params: Vec<(String, ArrayD<f64>)>,
    rng: ChaCha8Rng,
}

impl NetBuilder {
    fn new(seed: u64) -> Self {
        Self { layers: Vec::new(), params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn he_weight(&mut self, co: usize, ci: usize, k: usize) -> ArrayD<f64> {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn conv_params(&mut self, name: &str, co: usize, ci: usize, k: usize) -> (usize, usize) {
        let w = self.he_weight(co, ci, k);
        self.params.push((format!("{name}.w"), w));
        self.params.push((format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, co, 1, 1]))));
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) {
        let (w, b) = self.conv_params(name, co, ci, k);
        self.layers.push(Layer::Conv { w, b, pad: k / 2 });
    }

    fn relu(&mut self) {
        self.layers.push(Layer::Relu);
    }

    fn pool(&mut self) {
        self.layers.push(Layer::MaxPool);
    }

    fn residual(&mut self, name: &str, co: usize, ci: usize) {
        let (w1, b1) = self.conv_params(&format!("{name}.conv1"), co, ci, 3);
        let (w2, b2) = self.conv_params(&format!("{name}.conv2"), co, co, 3);
        let skip = if ci != co {
            Some(self.conv_params(&format!("{name}.skip"), co, ci, 1))
        } else {
            None
        };
        self.layers.push(Layer::Residual { w1, b1, w2, b2, skip });
    }

    fn gap(&mut self) {
        self.layers.push(Layer::GlobalAvgPool);
    }

    fn finish(self) -> Network {
        Network { layers: self.layers, params: self.params }
    }
}

impl Network {
    /// Record every parameter as a tape leaf.
    pub fn bind<'a>(&self, tape: &'a Tape) -> Vec<Tx<'a>> {
        self.params.iter().map(|(_, v)| tape.leaf(v.clone())).collect()
    }

    /// Forward pass to logits (N, K), using the given parameter nodes.
    /// Pixel inputs in [0, 255] are scaled to [0, 1] so that He-initialized
    /// weights start in the linear regime of the softmax.
    pub fn forward_logits<'a>(&self, x: Tx<'a>, p: &[Tx<'a>]) -> Tx<'a> {
        let mut h = x.scale(1.0 / 255.0);
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { w, b, pad } => h.conv2d(p[w], pad) + p[b],
                Layer::Relu => h.max_scalar(0.0),
                Layer::MaxPool => h.maxpool2(),
                Layer::Residual { w1, b1, w2, b2, skip } => {
                    let main = (h.conv2d(p[w1], 1) + p[b1]).max_scalar(0.0);
                    let main = main.conv2d(p[w2], 1) + p[b2];
                    let shortcut = match skip {
                        Some((ws, bs)) => h.conv2d(p[ws], 0) + p[bs],
                        None => h,
                    };
                    (main + shortcut).max_scalar(0.0)
                }
                Layer::GlobalAvgPool => h.global_avg_pool(),
            };
        }
        let sh = h.shape();
        assert_eq!(sh.len(), 4, "network must end NCHW before the logit reshape");
        h.reshape(&[sh[0], sh[1]])
    }

    /// Forward pass to row-softmax probabilities (N, K).
    pub fn forward_probs<'a>(&self, x: Tx<'a>, p: &[Tx<'a>]) -> Tx<'a> {
        self.forward_logits(x, p).softmax_rows()
    }

    /// Smallest admissible input side, set by the number of 2x2 poolings.
    pub fn min_input(&self) -> usize {
        let pools = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool))
            .count();
        1 << pools
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Models that expose a differentiable image -> probability forward pass
/// with their own parameters held constant.
pub trait DiffModel: Sync {
    fn forward_probs_graph<'a>(&self, tape: &'a Tape, x: Tx<'a>) -> Tx<'a>;
    fn min_input(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub architecture_id: String,
    pub input_resolution: (usize, usize),
    pub num_classes: usize,
    pub net: Network,
}

#[derive(Debug, Clone)]
pub struct PredictionDistribution {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Classifier {
    pub fn predict(&self, image: &Image) -> PredictionDistribution {
        let tape = Tape::new();
        let x = tape.leaf(hwc_to_nchw(image));
        let p = self.net.bind(&tape);
        let logits = self.net.forward_logits(x, &p);
        let probs = logits.softmax_rows();
        PredictionDistribution {
            probabilities: probs.to_array().iter().copied().collect(),
            logits: logits.to_array().iter().copied().collect(),
        }
    }
}

impl DiffModel for Classifier {
    fn forward_probs_graph<'a>(&self, tape: &'a Tape, x: Tx<'a>) -> Tx<'a> {
        let p = self.net.bind(tape);
        self.net.forward_probs(x, &p)
    }

    fn min_input(&self) -> usize {
        self.net.min_input()
    }
}

pub const REGISTERED_ARCHITECTURES: [&str; 4] =
    ["vgg-mini", "resnet-mini", "mobile-mini", "plain-mini"];

/// Randomly initialized desk-scale classifier; a fixed seed gives an
/// identical initialization.
pub fn build_classifier(
    architecture_id: &str,
    num_classes: usize,
    input_resolution: (usize, usize),
    seed: u64,
) -> Result<Classifier> {
    if num_classes < 2 {
        return Err(GtaError::Invalid("classifier needs at least 2 classes".into()));
    }
    let mut b = NetBuilder::new(seed);
    match architecture_id {
        "vgg-mini" => {
            b.conv("s1c1", 12, 3, 3);
            b.relu();
            b.conv("s1c2", 12, 12, 3);
            b.relu();
            b.pool();
            b.conv("s2c1", 24, 12, 3);
            b.relu();
            b.conv("s2c2", 24, 24, 3);
            b.relu();
            b.pool();
            b.gap();
            b.conv("head", num_classes, 24, 1);
        }
        "resnet-mini" => {
            b.conv("stem", 12, 3, 3);
            b.relu();
            b.residual("block1", 24, 12);
            b.pool();
            b.residual("block2", 32, 24);
            b.pool();
            b.gap();
            b.conv("head", num_classes, 32, 1);
        }
        "mobile-mini" => {
            b.conv("stem", 10, 3, 3);
            b.relu();
            b.pool();
            b.conv("expand", 20, 10, 1);
            b.relu();
            b.conv("spatial", 20, 20, 3);
            b.relu();
            b.conv("project", 12, 20, 1);
            b.relu();
            b.pool();
            b.gap();
            b.conv("head", num_classes, 12, 1);
        }
        "plain-mini" => {
            b.conv("c1", 10, 3, 3);
            b.relu();
            b.pool();
            b.conv("c2", 16, 10, 3);
            b.relu();
            b.pool();
            b.conv("c3", 20, 16, 3);
            b.relu();
            b.gap();
            b.conv("head", num_classes, 20, 1);
        }
        other => return Err(GtaError::UnknownArchitecture(other.to_string())),
    }
    Ok(Classifier {
        architecture_id: architecture_id.to_string(),
        input_resolution,
        num_classes,
        net: b.finish(),
    })
}

pub const DEFAULT_SURROGATE_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const MIN_SURROGATE_INPUT: usize = 8;

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub output_dim: usize,
    pub block_widths: [usize; 4],
    pub net: Network,
}

/// Fully convolutional surrogate: four cascaded residual blocks with 2x2
/// max pooling after the first three and global average pooling after the
/// fourth, then a 1x1 convolutional head. No flatten or fully connected
/// layer anywhere, so the output length is `output_dim` for every input
/// resolution of at least 8x8.
pub fn build_surrogate(output_dim: usize) -> Result<SurrogateModel> {
    build_surrogate_with(output_dim, DEFAULT_SURROGATE_WIDTHS, 0x1ce0_5eed)
}

pub fn build_surrogate_with(output_dim: usize, widths: [usize; 4], seed: u64) -> Result<SurrogateModel> {
    if output_dim < 2 {
        return Err(GtaError::Invalid(format!("output_dim must be >= 2, got {output_dim}")));
    }
    let [m1, m2, m3, m4] = widths;
    let mut b = NetBuilder::new(seed);
    b.residual("block1", m1, 3);
    b.pool();
    b.residual("block2", m2, m1);
    b.pool();
    b.residual("block3", m3, m2);
    b.pool();
    b.residual("block4", m4, m3);
    b.gap();
    b.conv("head", output_dim, m4, 1);
    Ok(SurrogateModel { output_dim, block_widths: widths, net: b.finish() })
}

impl SurrogateModel {
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h < MIN_SURROGATE_INPUT || w < MIN_SURROGATE_INPUT {
            return Err(GtaError::Shape(format!(
                "surrogate input {h}x{w} is below the {MIN_SURROGATE_INPUT}x{MIN_SURROGATE_INPUT} minimum"
            )));
        }
        Ok(())
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w, _) = image.dim();
        self.check_input(h, w)?;
        let tape = Tape::new();
        let x = tape.leaf(hwc_to_nchw(image));
        let p = self.net.bind(&tape);
        let probs = self.net.forward_probs(x, &p);
        Ok(probs.to_array().iter().copied().collect())
    }
}

impl DiffModel for SurrogateModel {
    fn forward_probs_graph<'a>(&self, tape: &'a Tape, x: Tx<'a>) -> Tx<'a> {
        let p = self.net.bind(tape);
        self.net.forward_probs(x, &p)
    }

    fn min_input(&self) -> usize {
        MIN_SURROGATE_INPUT
    }
}

#[derive(Debug, Clone)]
pub struct TrainHparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Classical momentum on the SGD update; 0.0 recovers plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainHparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 1e-5,
            momentum: 0.0,
            batch_size: 128,
            iterations: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

fn one_hot_batch(labels: &[usize], k: usize) -> ArrayD<f64> {
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[labels.len(), k]));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

/// Plain SGD with L2 weight decay on mean cross-entropy.
pub fn train_classifier(
    model: &mut Classifier,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    hp: &TrainHparams,
) -> Result<TrainStats> {
    if train_set.is_empty() {
        return Err(GtaError::Training("training set is empty".into()));
    }
    if train_set.resolution() != model.input_resolution {
        return Err(GtaError::Shape(format!(
            "dataset resolution {:?} does not match model input {:?}",
            train_set.resolution(),
            model.input_resolution
        )));
    }
    if train_set.num_classes != model.num_classes {
        return Err(GtaError::Shape(format!(
            "dataset has {} classes, model expects {}",
            train_set.num_classes, model.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut final_loss = f64::NAN;
    let mut velocity: Vec<ArrayD<f64>> =
        model.net.params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
    for it in 0..hp.iterations {
        let idx: Vec<usize> =
            (0..hp.batch_size.min(train_set.len())).map(|_| rng.gen_range(0..train_set.len())).collect();
        let imgs: Vec<&Image> = idx.iter().map(|&i| &train_set.images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();

        let tape = Tape::new();
        let x = tape.leaf(batch_nchw(&imgs));
        let p = model.net.bind(&tape);
        let probs = model.net.forward_probs(x, &p);
        let y = tape.leaf(one_hot_batch(&labels, model.num_classes));
        let loss = crate::losses::graph_cross_entropy_mean(probs, y);
        final_loss = loss.to_array()[[0]];
        if !final_loss.is_finite() {
            return Err(GtaError::Training(format!("loss diverged at iteration {it}")));
        }
        let grads = grad(loss, &p);
        for ((slot, vel), g) in model.net.params.iter_mut().zip(&mut velocity).zip(grads) {
            if let Some(g) = g {
                let gv = g.to_array();
                ndarray::Zip::from(&mut slot.1).and(vel).and(&gv).for_each(|w, v, &gw| {
                    *v = hp.momentum * *v + gw + hp.weight_decay * *w;
                    *w -= hp.learning_rate * *v;
                });
            }
        }
    }
    let train_accuracy = classifier_accuracy(model, train_set, 512);
    let test_accuracy = test_set.map(|s| classifier_accuracy(model, s, usize::MAX));
    Ok(TrainStats { final_loss, train_accuracy, test_accuracy })
}

pub fn classifier_accuracy(model: &Classifier, set: &LabeledImageSet, limit: usize) -> f64 {
    use rayon::prelude::*;
    let n = set.len().min(limit);
    if n == 0 {
        return 0.0;
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = model.predict(&set.images[i]);
            usize::from(crate::losses::argmax(&d.probabilities) == set.labels[i])
        })
        .sum();
    hits as f64 / n as f64
}
