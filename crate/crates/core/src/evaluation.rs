//! Success-rate protocol, universality transfer studies, FFT spectrum
//! analysis of noises, and CSV/PNG report generation.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::attack_core::PerturbationRecord;
use crate::data::{crop_top_left, Image, LabeledImageSet};
use crate::error::{GtaError, Result};
use crate::losses::argmax;
use crate::models::Classifier;

/// One method-vs-target measurement. Only images the target classifies
/// correctly when clean enter the denominator; success means the adversarial
/// argmax differs from the clean one (ties to the lowest class index on
/// both sides).
#[derive(Debug, Clone)]
pub struct GTAReport {
    pub method: String,
    pub target_model: String,
    pub evaluated: usize,
    pub successes: usize,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
}

impl GTAReport {
    pub fn rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.successes as f64 / self.evaluated as f64
        }
    }
}

/// Run `attack_fn` over every correctly classified image of the set. The
/// attack only ever sees the image, never the target model; that interface
/// is the GTA firewall.
pub fn gta_success_rate(
    target: &Classifier,
    target_name: &str,
    clean_set: &LabeledImageSet,
    attack_fn: &(dyn Fn(&Image) -> Result<Image> + Sync),
    method: &str,
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<GTAReport> {
    if clean_set.resolution() != target.input_resolution {
        return Err(GtaError::Shape(format!(
            "clean set is {:?} but target expects {:?}",
            clean_set.resolution(),
            target.input_resolution
        )));
    }
    let outcomes: Vec<Result<Option<bool>>> = clean_set
        .images
        .par_iter()
        .zip(&clean_set.labels)
        .map(|(img, &label)| {
            let clean_pred = argmax(&target.predict(img).probabilities);
            if clean_pred != label {
                return Ok(None);
            }
            let adv = attack_fn(img)?;
            let adv_pred = argmax(&target.predict(&adv).probabilities);
            Ok(Some(adv_pred != clean_pred))
        })
        .collect();
    let mut evaluated = 0;
    let mut successes = 0;
    for o in outcomes {
        if let Some(success) = o? {
            evaluated += 1;
            if success {
                successes += 1;
            }
        }
    }
    Ok(GTAReport {
        method: method.into(),
        target_model: target_name.into(),
        evaluated,
        successes,
        epsilon,
        steps,
        seed,
    })
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

fn apply_signed_noise(victim: &Image, noise: &Image, epsilon: f64) -> Image {
    let mut out = victim.clone();
    out.zip_mut_with(noise, |x, &n| *x = (*x + epsilon * sign(n)).clamp(0.0, 255.0));
    out
}

/// Within-dataset universality: the noise of record i is sign-applied to
/// every other image j != i of the same set (records correspond to the set
/// positionally). Victims misclassified clean are skipped.
pub fn transfer_within_dataset(
    records: &[PerturbationRecord],
    clean_set: &LabeledImageSet,
    target: &Classifier,
    target_name: &str,
) -> Result<GTAReport> {
    if records.is_empty() {
        return Err(GtaError::Invalid("transfer study needs at least one record".into()));
    }
    for r in records {
        if r.clean.dim() != (clean_set.height, clean_set.width, 3) {
            return Err(GtaError::Shape("record resolution differs from the clean set".into()));
        }
    }
    let epsilon = records[0].budget.epsilon;
    let pairs: Vec<(usize, usize)> = (0..records.len())
        .flat_map(|i| (0..clean_set.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<Option<bool>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let victim = &clean_set.images[j];
            let clean_pred = argmax(&target.predict(victim).probabilities);
            if clean_pred != clean_set.labels[j] {
                return None;
            }
            let adv = apply_signed_noise(victim, &records[i].noise, epsilon);
            Some(argmax(&target.predict(&adv).probabilities) != clean_pred)
        })
        .collect();
    let evaluated = outcomes.iter().flatten().count();
    let successes = outcomes.iter().flatten().filter(|&&s| s).count();
    Ok(GTAReport {
        method: format!("{}-within", records[0].method),
        target_model: target_name.into(),
        evaluated,
        successes,
        epsilon,
        steps: records[0].budget.steps,
        seed: 0,
    })
}

/// Cross-dataset universality: noises from dataset A (larger or equal
/// resolution) are top-left-cropped onto victims from dataset B.
pub fn transfer_cross_dataset(
    records_a: &[PerturbationRecord],
    clean_set_b: &LabeledImageSet,
    epsilon: f64,
    target_b: &Classifier,
    target_name: &str,
) -> Result<GTAReport> {
    if records_a.is_empty() {
        return Err(GtaError::Invalid("transfer study needs at least one record".into()));
    }
    let (bh, bw) = clean_set_b.resolution();
    for r in records_a {
        let (ah, aw, _) = r.noise.dim();
        if ah < bh || aw < bw {
            return Err(GtaError::Shape(format!(
                "source noise {ah}x{aw} is smaller than victim resolution {bh}x{bw}"
            )));
        }
    }
    let cropped: Vec<Image> = records_a
        .iter()
        .map(|r| crop_top_left(&r.noise, bh, bw))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..cropped.len())
        .flat_map(|i| (0..clean_set_b.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<Option<bool>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let victim = &clean_set_b.images[j];
            let clean_pred = argmax(&target_b.predict(victim).probabilities);
            if clean_pred != clean_set_b.labels[j] {
                return None;
            }
            let adv = apply_signed_noise(victim, &cropped[i], epsilon);
            Some(argmax(&target_b.predict(&adv).probabilities) != clean_pred)
        })
        .collect();
    let evaluated = outcomes.iter().flatten().count();
    let successes = outcomes.iter().flatten().filter(|&&s| s).count();
    Ok(GTAReport {
        method: format!("{}-cross", records_a[0].method),
        target_model: target_name.into(),
        evaluated,
        successes,
        epsilon,
        steps: records_a[0].budget.steps,
        seed: 0,
    })
}

/// DC-centered per-channel magnitude spectra of a real noise field.
#[derive(Debug, Clone)]
pub struct SpectrumDiagram {
    /// DC sits at (H/2, W/2).
    pub magnitudes: [Array2<f64>; 3],
    /// Offset of the strongest off-DC bin from the center, per channel,
    /// as (row offset, column offset).
    pub peak_bins: [(isize, isize); 3],
}

impl SpectrumDiagram {
    /// Radial distance of each channel's peak from DC, in bins.
    pub fn peak_radius(&self, channel: usize) -> f64 {
        let (du, dv) = self.peak_bins[channel];
        ((du * du + dv * dv) as f64).sqrt()
    }
}

fn fft2_magnitude(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data: Vec<Vec<Complex<f64>>> = (0..h)
        .map(|i| (0..w).map(|j| Complex::new(plane[[i, j]], 0.0)).collect())
        .collect();
    for row in data.iter_mut() {
        row_fft.process(row);
    }
    let mut mag = Array2::<f64>::zeros((h, w));
    for j in 0..w {
        let mut col: Vec<Complex<f64>> = (0..h).map(|i| data[i][j]).collect();
        col_fft.process(&mut col);
        for i in 0..h {
            // fftshift: move DC to the center bin
            let si = (i + h / 2) % h;
            let sj = (j + w / 2) % w;
            mag[[si, sj]] = col[i].norm();
        }
    }
    mag
}

/// Unnormalized 2-D DFT of each channel of the raw noise, DC-centered.
pub fn spectrum(noise: &Image) -> Result<SpectrumDiagram> {
    let (h, w, _) = noise.dim();
    if h < 2 || w < 2 {
        return Err(GtaError::Shape(format!("spectrum needs at least 2x2, got {h}x{w}")));
    }
    let mut magnitudes: Vec<Array2<f64>> = Vec::with_capacity(3);
    let mut peaks = Vec::with_capacity(3);
    for ch in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(i, j)| noise[[i, j, ch]]);
        let mag = fft2_magnitude(&plane);
        let (ci, cj) = (h as isize / 2, w as isize / 2);
        let mut best = (0isize, 0isize);
        let mut best_mag = -1.0;
        for i in 0..h as isize {
            for j in 0..w as isize {
                if (i, j) == (ci, cj) {
                    continue;
                }
                let m = mag[[i as usize, j as usize]];
                if m > best_mag {
                    best_mag = m;
                    best = (i - ci, j - cj);
                }
            }
        }
        magnitudes.push(mag);
        peaks.push(best);
    }
    Ok(SpectrumDiagram {
        magnitudes: magnitudes.try_into().unwrap(),
        peak_bins: [peaks[0], peaks[1], peaks[2]],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Rows = methods, columns = target models, cells = rates.
    MatrixCsv,
    /// One row per (method, target) with full metadata.
    RowsCsv,
}

pub fn build_report(reports: &[GTAReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(GtaError::Invalid("cannot build a report from zero measurements".into()));
    }
    match format {
        ReportFormat::RowsCsv => {
            let mut out = String::from("method,target_model,evaluated,successes,rate,epsilon,T,seed\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{:.3},{},{},{}\n",
                    r.method,
                    r.target_model,
                    r.evaluated,
                    r.successes,
                    r.rate(),
                    r.epsilon,
                    r.steps,
                    r.seed
                ));
            }
            Ok(out)
        }
        ReportFormat::MatrixCsv => {
            let mut methods: Vec<&str> = Vec::new();
            let mut targets: Vec<&str> = Vec::new();
            for r in reports {
                if !methods.contains(&r.method.as_str()) {
                    methods.push(&r.method);
                }
                if !targets.contains(&r.target_model.as_str()) {
                    targets.push(&r.target_model);
                }
            }
            let mut out = format!("method,{}\n", targets.join(","));
            for m in &methods {
                out.push_str(m);
                for t in &targets {
                    let cell = reports
                        .iter()
                        .find(|r| r.method == *m && r.target_model == *t)
                        .map(|r| format!("{:.3}", r.rate()))
                        .unwrap_or_default();
                    out.push(',');
                    out.push_str(&cell);
                }
                out.push('\n');
            }
            Ok(out)
        }
    }
}

fn min_max_normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|&v| (255.0 * (v - lo) / span).round() as u8).collect()
}

/// Save a noise field as an RGB PNG, min-max normalized for display.
pub fn save_noise_panel(noise: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = noise.dim();
    let flat: Vec<f64> = noise.iter().copied().collect();
    let bytes = min_max_normalize_to_u8(&flat);
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| GtaError::Invalid(format!("PNG write failed: {e}")))?;
    Ok(())
}

/// Save each channel's spectrum as a grayscale PNG; returns written paths.
pub fn save_spectrum_panels(diagram: &SpectrumDiagram, stem: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for (name, mag) in ["r", "g", "b"].iter().zip(&diagram.magnitudes) {
        let (h, w) = mag.dim();
        let flat: Vec<f64> = mag.iter().copied().collect();
        let bytes = min_max_normalize_to_u8(&flat);
        let path = stem.with_file_name(format!(
            "{}_spectrum_{name}.png",
            stem.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        image::save_buffer(&path, &bytes, w as u32, h as u32, image::ColorType::L8)
            .map_err(|e| GtaError::Invalid(format!("PNG write failed: {e}")))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::f64::consts::PI;

    #[test]
    fn spectrum_of_pure_sine_peaks_at_expected_bin() {
        let w = 64;
        let a = 2.0 * PI * 4.0 / w as f64;
        let noise = Array3::from_shape_fn((w, w, 3), |(_, j, _)| (a * j as f64).sin());
        let d = spectrum(&noise).unwrap();
        for ch in 0..3 {
            let (du, dv) = d.peak_bins[ch];
            assert_eq!(du.abs(), 0, "row offset should be 0");
            assert_eq!(dv.abs(), 4, "column offset should be 4, got {dv}");
        }
    }

    #[test]
    fn spectrum_of_constant_noise_is_dc_only() {
        let noise = Array3::from_elem((16, 16, 3), 0.7);
        let d = spectrum(&noise).unwrap();
        for mag in &d.magnitudes {
            let mut off_dc_max = 0.0f64;
            for i in 0..16usize {
                for j in 0..16usize {
                    if (i, j) != (8, 8) {
                        off_dc_max = off_dc_max.max(mag[[i, j]]);
                    }
                }
            }
            assert!(off_dc_max < 1e-9);
            assert!(mag[[8, 8]] > 1.0);
        }
    }

    #[test]
    fn spectrum_point_symmetry() {
        let noise = Array3::from_shape_fn((12, 18, 3), |(i, j, c)| {
            ((i * 7 + j * 3 + c) as f64 * 0.37).sin() * 10.0
        });
        let d = spectrum(&noise).unwrap();
        let (h, w) = (12usize, 18usize);
        for mag in &d.magnitudes {
            for i in 0..h {
                for j in 0..w {
                    // reflection through DC in the shifted layout
                    let ri = (2 * (h / 2) + h - i) % h;
                    let rj = (2 * (w / 2) + w - j) % w;
                    assert!((mag[[i, j]] - mag[[ri, rj]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn report_formats() {
        let mk = |method: &str, target: &str, succ: usize| GTAReport {
            method: method.into(),
            target_model: target.into(),
            evaluated: 1000,
            successes: succ,
            epsilon: 15.0,
            steps: 10,
            seed: 0,
        };
        let reports = vec![
            mk("PGD", "t1", 373),
            mk("PGD", "t2", 509),
            mk("PGD", "t3", 432),
            mk("PGD", "t4", 615),
        ];
        let csv = build_report(&reports, ReportFormat::MatrixCsv).unwrap();
        assert!(csv.contains("PGD,0.373,0.509,0.432,0.615"));
        let rows = build_report(&reports[..1], ReportFormat::RowsCsv).unwrap();
        assert_eq!(rows.lines().count(), 2);
        assert!(rows.contains("PGD,t1,1000,373,0.373,15,10,0"));
        assert!(build_report(&[], ReportFormat::MatrixCsv).is_err());
    }
}
