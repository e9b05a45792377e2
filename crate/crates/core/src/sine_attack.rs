//! Sine Attack: a nine-parameter universal perturbation made of one planar
//! sine wave per color channel, trained end to end against the source zoo
//! and applied through a sign step at inference.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_autodiff::{grad, Tape, Tx};

use crate::attack_core::PerturbationRecord;
use crate::data::{batch_nchw, coordinate_map, AttackBudget, CoordinateMap, Image};
use crate::error::{GtaError, Result};
use crate::ice::{IceMetricsRow, IceResources};
use crate::losses::graph_cross_entropy_mean;
use crate::models::DiffModel;

/// Per channel j: Z_j = sin(a_j * X + b_j * Y + c_j). Channel order R, G, B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineParams {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub c: [f64; 3],
}

impl SineParams {
    pub fn validate(&self) -> Result<()> {
        let all = self.a.iter().chain(&self.b).chain(&self.c);
        for &v in all {
            if !v.is_finite() {
                return Err(GtaError::Invalid("sine parameters must be finite".into()));
            }
        }
        Ok(())
    }

    /// Channel-major flattening: aR bR cR aG bG cG aB bB cB.
    pub fn to_vec(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for j in 0..3 {
            out[3 * j] = self.a[j];
            out[3 * j + 1] = self.b[j];
            out[3 * j + 2] = self.c[j];
        }
        out
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(GtaError::Invalid(format!("expected 9 sine parameters, got {}", v.len())));
        }
        let p = Self {
            a: [v[0], v[3], v[6]],
            b: [v[1], v[4], v[7]],
            c: [v[2], v[5], v[8]],
        };
        p.validate()?;
        Ok(p)
    }
}

/// Random initialization: spatial frequencies start below Nyquist and away
/// from the zero-frequency saddle, phases anywhere on the circle.
pub fn sa_init(seed: u64) -> SineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SineParams { a: [0.0; 3], b: [0.0; 3], c: [0.0; 3] };
    for j in 0..3 {
        p.a[j] = rng.gen_range(0.05..0.5);
        p.b[j] = rng.gen_range(0.05..0.5);
        p.c[j] = rng.gen_range(0.0..2.0 * PI);
    }
    p
}

/// Evaluate the three waves over a coordinate grid; values in [-1, 1].
pub fn sine_noise(omega: &SineParams, coords: &CoordinateMap) -> Image {
    let (h, w) = coords.x_map.dim();
    Array3::from_shape_fn((h, w, 3), |(i, jc, ch)| {
        (omega.a[ch] * coords.x_map[[i, jc]] + omega.b[ch] * coords.y_map[[i, jc]] + omega.c[ch]).sin()
    })
}

#[derive(Debug, Clone, Copy)]
pub struct WaveChannel {
    /// Cycles per pixel.
    pub frequency: f64,
    /// Degrees; 0 when the wave is fully degenerate (a = b = 0), 90 when
    /// a = 0 with b nonzero.
    pub direction: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct WaveDescriptor {
    pub channels: [WaveChannel; 3],
}

pub fn wave_descriptor(omega: &SineParams) -> WaveDescriptor {
    let mut channels = [WaveChannel { frequency: 0.0, direction: 0.0, phase: 0.0 }; 3];
    for j in 0..3 {
        let (a, b) = (omega.a[j], omega.b[j]);
        let frequency = (a * a + b * b).sqrt() / (2.0 * PI);
        let direction = if a == 0.0 && b == 0.0 {
            0.0
        } else if a == 0.0 {
            90.0
        } else {
            (b / a).atan().to_degrees()
        };
        channels[j] = WaveChannel { frequency, direction, phase: omega.c[j] };
    }
    WaveDescriptor { channels }
}

impl WaveDescriptor {
    pub fn table(&self) -> String {
        let mut out = String::from("channel,frequency_cycles_per_px,direction_deg,phase_rad\n");
        for (name, ch) in ["R", "G", "B"].iter().zip(&self.channels) {
            out.push_str(&format!("{name},{:.6},{:.3},{:.6}\n", ch.frequency, ch.direction, ch.phase));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SaTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SaTrainConfig {
    fn default() -> Self {
        Self { iterations: 200, batch_size: 64, learning_rate: 0.01, epsilon: 15.0, seed: 0 }
    }
}

/// Build the (1, 3, H, W) noise tensor on the tape from nine scalar nodes
/// (channel-major, as in `SineParams::to_vec`).
fn graph_sine_noise<'a>(tape: &'a Tape, omega: &[Tx<'a>; 9], h: usize, w: usize) -> Tx<'a> {
    let coords = coordinate_map(h, w);
    let xm = tape.leaf(coords.x_map.into_dyn().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap());
    let ym = tape.leaf(coords.y_map.into_dyn().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap());
    let mut z = None;
    for j in 0..3 {
        let (a, b, c) = (omega[3 * j], omega[3 * j + 1], omega[3 * j + 2]);
        let zj = (xm * a + ym * b + c).sin().broadcast_to(&[1, 3, h, w]);
        let mut mask = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 1, 1]));
        mask[[0, j, 0, 0]] = 1.0;
        let mask = tape.leaf(mask);
        let term = zj * mask;
        z = Some(match z {
            None => term,
            Some(acc) => acc + term,
        });
    }
    z.unwrap()
}

fn sa_outer_pass(
    omega: &SineParams,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
    want_grad: bool,
) -> Result<(f64, Option<[f64; 9]>)> {
    if batches.len() != resources.source_datasets.len() {
        return Err(GtaError::Invalid("one batch per source dataset is required".into()));
    }
    let tape = Tape::new();
    let flat = omega.to_vec();
    let nodes: Vec<Tx<'_>> = flat.iter().map(|&v| tape.scalar(v)).collect();
    let nodes: [Tx<'_>; 9] = nodes.try_into().unwrap();
    let mut total = None;
    for (d, (batch, labels)) in batches.iter().enumerate() {
        let set = &resources.source_datasets[d];
        let sh = batch.shape().to_vec();
        let (h, w) = (sh[2], sh[3]);
        let x = tape.leaf(batch.clone());
        let z = graph_sine_noise(&tape, &nodes, h, w);
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
    let grads = if want_grad {
        let gs = grad(total, &nodes);
        let mut out = [0.0; 9];
        for (slot, g) in out.iter_mut().zip(gs) {
            *slot = g.map(|g| g.to_array()[[0]]).unwrap_or(0.0);
        }
        Some(out)
    } else {
        None
    };
    Ok((loss, grads))
}

/// Outer loss value only (for finite-difference checks).
pub fn sa_outer_loss(
    omega: &SineParams,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
) -> Result<f64> {
    sa_outer_pass(omega, resources, batches, epsilon, false).map(|(l, _)| l)
}

/// Outer loss and its analytic gradient over the nine parameters
/// (channel-major order).
pub fn sa_outer_grad(
    omega: &SineParams,
    resources: &IceResources,
    batches: &[(ArrayD<f64>, Vec<usize>)],
    epsilon: f64,
) -> Result<(f64, [f64; 9])> {
    sa_outer_pass(omega, resources, batches, epsilon, true).map(|(l, g)| (l, g.unwrap()))
}

/// Train omega by gradient ascent on the mean adversarial cross-entropy.
/// The training perturbation is the raw wave (no sign step) so the loss is
/// smooth in omega.
pub fn sa_train(resources: &IceResources, cfg: &SaTrainConfig) -> Result<(SineParams, Vec<IceMetricsRow>)> {
    resources.validate()?;
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(GtaError::Invalid("learning rate and batch size must be positive".into()));
    }
    let mut omega = sa_init(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a_5a5a_5a5a_5a5a);
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
        let (loss, grads) = sa_outer_pass(&omega, resources, &batches, cfg.epsilon, true)?;
        if !loss.is_finite() {
            return Err(GtaError::Training(format!("sine loss diverged at iteration {it}")));
        }
        metrics.push(IceMetricsRow { iteration: it, dataset: "all".into(), loss });
        let g = grads.unwrap();
        let mut flat = omega.to_vec();
        for (v, gv) in flat.iter_mut().zip(g) {
            *v += cfg.learning_rate * gv;
        }
        omega = SineParams::from_vec(&flat)?;
    }
    Ok((omega, metrics))
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

/// Inference: clip(x + eps * sign(Z)). The noise depends only on the image
/// resolution, never on its content.
pub fn sa_attack(omega: &SineParams, image: &Image, epsilon: f64) -> PerturbationRecord {
    let (h, w, _) = image.dim();
    let z = sine_noise(omega, &coordinate_map(h, w));
    let mut adv = image.clone();
    adv.zip_mut_with(&z, |x, &n| *x = (*x + epsilon * sign(n)).clamp(0.0, 255.0));
    PerturbationRecord::new(image.clone(), adv, "SA", AttackBudget { epsilon, steps: 1 })
}

/// Persist omega as a small text record, channel-major.
pub fn save_omega(omega: &SineParams, path: &Path) -> Result<()> {
    let flat = omega.to_vec();
    let vals: Vec<String> = flat.iter().map(|v| format!("{v:.17e}")).collect();
    let body = format!(
        "# sine-attack omega v1\n# channel-major: aR bR cR aG bG cG aB bB cB\n{}\n",
        vals.join(" ")
    );
    fs::write(path, body)?;
    Ok(())
}

pub fn load_omega(path: &Path) -> Result<SineParams> {
    let text = fs::read_to_string(path)?;
    let vals: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .flat_map(|l| l.split_whitespace())
        .map(|t| t.parse::<f64>().map_err(|_| GtaError::Corrupt(format!("bad omega value '{t}'"))))
        .collect::<Result<_>>()?;
    SineParams::from_vec(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_phase_wave() {
        let omega = SineParams { a: [0.0; 3], b: [0.0; 3], c: [PI / 2.0; 3] };
        let z = sine_noise(&omega, &coordinate_map(5, 7));
        assert!(z.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn integer_zero_crossings() {
        let omega = SineParams { a: [PI, 0.0, 0.0], b: [0.0; 3], c: [0.0; 3] };
        let z = sine_noise(&omega, &coordinate_map(4, 8));
        for i in 0..4 {
            for j in 0..8 {
                assert!(z[[i, j, 0]].abs() < 1e-9, "sin(pi * {j}) should vanish");
            }
        }
    }

    #[test]
    fn phase_periodicity() {
        let base = sa_init(7);
        let mut shifted = base;
        for j in 0..3 {
            shifted.c[j] += 2.0 * PI;
        }
        let coords = coordinate_map(9, 11);
        let z0 = sine_noise(&base, &coords);
        let z1 = sine_noise(&shifted, &coords);
        for (a, b) in z0.iter().zip(z1.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn descriptor_closed_forms() {
        let omega = SineParams { a: [1.0, 1.0, 0.0], b: [1.0, 0.0, 0.0], c: [0.0; 3] };
        let d = wave_descriptor(&omega);
        assert!((d.channels[0].frequency - 2.0f64.sqrt() / (2.0 * PI)).abs() < 1e-12);
        assert!((d.channels[0].direction - 45.0).abs() < 1e-9);
        assert!((d.channels[1].direction - 0.0).abs() < 1e-9);
        assert_eq!(d.channels[2].frequency, 0.0);
        assert_eq!(d.channels[2].direction, 0.0);

        let vertical = SineParams { a: [0.0; 3], b: [0.3; 3], c: [0.0; 3] };
        assert!((wave_descriptor(&vertical).channels[0].direction - 90.0).abs() < 1e-9);
    }

    #[test]
    fn attack_noise_is_universal_and_bounded() {
        let omega = sa_init(3);
        let img_a = Array3::from_elem((20, 24, 3), 120.0);
        let img_b = Array3::from_shape_fn((20, 24, 3), |(i, j, c)| ((i * 31 + j * 7 + c * 13) % 256) as f64);
        let ra = sa_attack(&omega, &img_a, 15.0);
        let rb = sa_attack(&omega, &img_b, 15.0);
        assert!(ra.max_abs_noise() <= 15.0 + 1e-12);
        assert!(rb.adversarial.iter().all(|&v| (0.0..=255.0).contains(&v)));
        // universality: identical unclipped shifts => identical noise where
        // neither image clips
        let za = &ra.adversarial - &ra.clean;
        let zb = &rb.adversarial - &rb.clean;
        for (i, (a, b)) in za.iter().zip(zb.iter()).enumerate() {
            let (ca, cb) = (ra.clean.as_slice().unwrap()[i], rb.clean.as_slice().unwrap()[i]);
            if (15.0..=240.0).contains(&ca) && (15.0..=240.0).contains(&cb) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn omega_round_trip() {
        let omega = sa_init(11);
        let dir = std::env::temp_dir().join("gta-omega-test.txt");
        save_omega(&omega, &dir).unwrap();
        let back = load_omega(&dir).unwrap();
        let (a, b) = (omega.to_vec(), back.to_vec());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        std::fs::remove_file(&dir).ok();
    }
}
