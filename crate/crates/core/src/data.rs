//! Dataset registry: synthetic desk-scale datasets, external readers,
//! resizing/cropping and coordinate maps.
//!
//! Images are (H, W, 3) arrays of real-valued pixels in [0, 255]. Pixels stay
//! real-valued throughout; quantization to integers happens only when a
//! dataset is exported to an archive or a PNG.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GtaError, Result};

pub type Image = Array3<f64>;

#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<Image>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let set = Self { name: name.into(), height, width, num_classes, images, labels };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.images.len() {
            return Err(GtaError::Invalid(format!(
                "{}: {} images but {} labels",
                self.name,
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.num_classes < 1 {
            return Err(GtaError::Invalid(format!("{}: num_classes must be >= 1", self.name)));
        }
        for (i, img) in self.images.iter().enumerate() {
            let dim = img.dim();
            if dim != (self.height, self.width, 3) {
                return Err(GtaError::Shape(format!(
                    "{}: image {} has shape {:?}, expected ({}, {}, 3)",
                    self.name, i, dim, self.height, self.width
                )));
            }
            if img.iter().any(|&p| !(0.0..=255.0).contains(&p)) {
                return Err(GtaError::Invalid(format!(
                    "{}: image {} has a pixel outside [0, 255]",
                    self.name, i
                )));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(GtaError::Invalid(format!(
                    "{}: label {} at index {} out of range [0, {})",
                    self.name, l, i, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Integer pixel-index maps, origin at the top-left: x_map[i][j] = j, y_map[i][j] = i.
#[derive(Debug, Clone)]
pub struct CoordinateMap {
    pub x_map: Array2<f64>,
    pub y_map: Array2<f64>,
}

pub fn coordinate_map(height: usize, width: usize) -> CoordinateMap {
    assert!(height >= 1 && width >= 1, "coordinate_map needs positive dims");
    CoordinateMap {
        x_map: Array2::from_shape_fn((height, width), |(_, j)| j as f64),
        y_map: Array2::from_shape_fn((height, width), |(i, _)| i as f64),
    }
}

/// L-infinity budget in pixel units plus the step count shared by all attacks.
#[derive(Debug, Clone, Copy)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub steps: usize,
}

impl AttackBudget {
    pub fn new(epsilon: f64, steps: usize) -> Result<Self> {
        if epsilon < 0.0 {
            return Err(GtaError::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if steps < 1 {
            return Err(GtaError::Invalid("steps must be >= 1".into()));
        }
        Ok(Self { epsilon, steps })
    }
}

#[derive(Debug, Clone)]
pub struct DeskSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

/// Per-class appearance for the synthetic desk datasets. Class evidence is
/// carried by two oriented gratings in shared frequency bands (a strong
/// jittered high band and a weak exact low band), plus a faint color tint
/// and a bright geometric shape.
struct ClassStyle {
    base: [f64; 3],
    orientation: f64,
    spacing: f64,
    freq: f64,
    low_freq: f64,
    shape_square: bool,
    accent_channel: usize,
}

fn class_style(c: usize, num_classes: usize) -> ClassStyle {
    let t = c as f64 / num_classes as f64;
    let hue = t * 2.0 * PI;
    // colors on a mid-brightness wheel, distinct but not saturated
    // Deliberately small color margins: the oriented grating carries most of
    // the class evidence, so a bounded pixel perturbation can contest it.
    let base = [
        128.0 + 8.0 * hue.cos(),
        128.0 + 8.0 * (hue + 2.0 * PI / 3.0).cos(),
        128.0 + 8.0 * (hue + 4.0 * PI / 3.0).cos(),
    ];
    ClassStyle {
        base,
        orientation: PI * t,
        spacing: PI / num_classes as f64,
        // two shared frequency bands: a strong high band whose orientation
        // is jittered per image (fast to learn but deliberately ambiguous
        // between neighboring classes) and a weaker low band at the exact
        // class orientation that resolves the ambiguity
        freq: 2.0 * PI * 0.18,
        low_freq: 2.0 * PI * 0.06,
        shape_square: c % 2 == 0,
        accent_channel: c % 3,
    }
}

fn render_desk_image(style: &ClassStyle, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let low_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    // jitter spans 90% of the class spacing, so the high band stays equally
    // ambiguous regardless of how many classes share the half-turn
    let jitter: f64 = rng.gen_range(-0.45..0.45) * style.spacing;
    let orient = style.orientation + jitter;
    let (dx, dy) = (orient.cos(), orient.sin());
    let (lx, ly) = (style.orientation.cos(), style.orientation.sin());
    let cy = rng.gen_range(0.3..0.7) * h as f64;
    let cx = rng.gen_range(0.3..0.7) * w as f64;
    let radius = 0.22 * h.min(w) as f64;
    let mut img = Array3::<f64>::zeros((h, w, 3));
    let mut noise = vec![0.0f64; h * w * 3];
    for n in noise.iter_mut() {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *n = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
    }
    for i in 0..h {
        for j in 0..w {
            let tex = 40.0 * (style.freq * (dx * j as f64 + dy * i as f64) + phase).sin()
                + 16.0 * (style.low_freq * (lx * j as f64 + ly * i as f64) + low_phase).sin();
            let inside = if style.shape_square {
                (i as f64 - cy).abs() < radius && (j as f64 - cx).abs() < radius
            } else {
                (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) < radius * radius
            };
            for ch in 0..3 {
                let mut v = style.base[ch] + tex;
                if inside && ch == style.accent_channel {
                    v += 20.0;
                }
                v += 8.0 * noise[(i * w + j) * 3 + ch];
                img[[i, j, ch]] = v.clamp(0.0, 255.0);
            }
        }
    }
    img
}

/// Deterministic synthetic dataset: colored shapes on oriented gratings.
pub fn generate_desk_dataset(spec: &DeskSpec) -> Result<LabeledImageSet> {
    if spec.height < 16 || spec.width < 16 {
        return Err(GtaError::Invalid(format!(
            "desk dataset resolution must be at least 16x16, got {}x{}",
            spec.height, spec.width
        )));
    }
    if spec.num_classes < 2 {
        return Err(GtaError::Invalid("desk dataset needs at least 2 classes".into()));
    }
    let mut images = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.num_classes {
        let style = class_style(c, spec.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (c as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for _ in 0..spec.samples_per_class {
            images.push(render_desk_image(&style, spec.height, spec.width, &mut rng));
            labels.push(c);
        }
    }
    LabeledImageSet::new(spec.name.clone(), spec.height, spec.width, spec.num_classes, images, labels)
}

/// Disjoint train/test pair: the test split continues each class RNG stream
/// far from the training draws.
pub fn generate_desk_split(spec: &DeskSpec, test_per_class: usize) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = generate_desk_dataset(spec)?;
    let test_spec = DeskSpec {
        name: format!("{}-test", spec.name),
        samples_per_class: test_per_class,
        seed: spec.seed ^ 0x5bf0_3635_dead_beef,
        ..spec.clone()
    };
    let test = generate_desk_dataset(&test_spec)?;
    Ok((train, test))
}

/// Bilinear resize with half-pixel centers; output clipped to [0, 255].
/// Resizing to the source shape is an exact identity.
pub fn resize(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(GtaError::Invalid("resize target dims must be positive".into()));
    }
    let (h, w, c) = image.dim();
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let nchw = hwc_to_nchw(image);
    let out = gta_autodiff::kernels::resize_bilinear(&nchw, (height, width));
    let mut img = nchw_to_hwc(&out, height, width, c);
    img.mapv_inplace(|v| v.clamp(0.0, 255.0));
    Ok(img)
}

/// Top-left crop of a noise map; target must fit inside the source.
pub fn crop_top_left(noise: &Image, height: usize, width: usize) -> Result<Image> {
    let (h, w, _) = noise.dim();
    if height > h || width > w {
        return Err(GtaError::Invalid(format!(
            "crop target {height}x{width} exceeds source {h}x{w}"
        )));
    }
    Ok(noise.slice(ndarray::s![0..height, 0..width, ..]).to_owned())
}

pub fn hwc_to_nchw(image: &Image) -> ndarray::ArrayD<f64> {
    let (h, w, c) = image.dim();
    let mut out = ndarray::Array4::<f64>::zeros((1, c, h, w));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[0, ch, i, j]] = image[[i, j, ch]];
            }
        }
    }
    out.into_dyn()
}

pub fn nchw_to_hwc(batch: &ndarray::ArrayD<f64>, h: usize, w: usize, c: usize) -> Image {
    let mut out = Array3::<f64>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[i, j, ch]] = batch[[0, ch, i, j]];
            }
        }
    }
    out
}

/// Batch a list of equally sized images into (N, 3, H, W).
pub fn batch_nchw(images: &[&Image]) -> ndarray::ArrayD<f64> {
    assert!(!images.is_empty());
    let (h, w, c) = images[0].dim();
    let mut out = ndarray::Array4::<f64>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    out[[n, ch, i, j]] = img[[i, j, ch]];
                }
            }
        }
    }
    out.into_dyn()
}

const ARCHIVE_MAGIC: &[u8; 8] = b"GTDATA01";

/// Serialize a dataset to a single little-endian archive. Pixels are
/// quantized to u8 at export.
pub fn save_archive(set: &LabeledImageSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    let name = set.name.as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&(set.height as u32).to_le_bytes());
    buf.extend_from_slice(&(set.width as u32).to_le_bytes());
    buf.extend_from_slice(&(set.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (img, &label) in set.images.iter().zip(&set.labels) {
        buf.extend_from_slice(&(label as u16).to_le_bytes());
        for &p in img.iter() {
            buf.push(p.round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<LabeledImageSet> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(GtaError::Corrupt(format!("{}: truncated archive", path.display())));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != ARCHIVE_MAGIC {
        return Err(GtaError::Corrupt(format!("{}: bad magic", path.display())));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let name_len = u32_at(take(&mut pos, 4)?);
    let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
        .map_err(|_| GtaError::Corrupt("archive name is not utf-8".into()))?;
    let height = u32_at(take(&mut pos, 4)?);
    let width = u32_at(take(&mut pos, 4)?);
    let num_classes = u32_at(take(&mut pos, 4)?);
    let count = u32_at(take(&mut pos, 4)?);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, height * width * 3)?;
        let img = Array3::from_shape_fn((height, width, 3), |(i, j, c)| {
            raw[(i * width + j) * 3 + c] as f64
        });
        images.push(img);
        labels.push(label);
    }
    LabeledImageSet::new(name, height, width, num_classes, images, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// This crate's archive format.
    Archive,
    /// CIFAR-style binary: records of 1 label byte + 3072 CHW pixel bytes.
    CifarBinary,
    /// Directory of PNGs, one subdirectory per class.
    PngDirectory,
}

pub fn load_external_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledImageSet> {
    match format {
        DatasetFormat::Archive => load_archive(path),
        DatasetFormat::CifarBinary => load_cifar_binary(path),
        DatasetFormat::PngDirectory => load_png_directory(path),
    }
}

pub fn load_cifar_binary(path: &Path) -> Result<LabeledImageSet> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    const REC: usize = 1 + 3 * 32 * 32;
    if buf.is_empty() || buf.len() % REC != 0 {
        return Err(GtaError::Corrupt(format!(
            "{}: size {} is not a multiple of {REC}",
            path.display(),
            buf.len()
        )));
    }
    let count = buf.len() / REC;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let rec = &buf[r * REC..(r + 1) * REC];
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(GtaError::Invalid(format!(
                "{}: record {} has label {} out of range",
                path.display(),
                r,
                label
            )));
        }
        // CIFAR stores channel-planar CHW
        let img = Array3::from_shape_fn((32, 32, 3), |(i, j, c)| {
            rec[1 + c * 1024 + i * 32 + j] as f64
        });
        images.push(img);
        labels.push(label);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar".into());
    LabeledImageSet::new(name, 32, 32, 10, images, labels)
}

pub fn load_png_directory(path: &Path) -> Result<LabeledImageSet> {
    let mut class_dirs: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(GtaError::Invalid(format!(
            "{}: no class subdirectories found",
            path.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut resolution: Option<(usize, usize)> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| GtaError::Corrupt(format!("{}: {e}", file.display())))?
                .into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match resolution {
                None => resolution = Some((h, w)),
                Some(res) if res != (h, w) => {
                    return Err(GtaError::Shape(format!(
                        "{}: resolution {h}x{w} differs from {}x{}",
                        file.display(),
                        res.0,
                        res.1
                    )))
                }
                _ => {}
            }
            let arr = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
                img.get_pixel(j as u32, i as u32)[c] as f64
            });
            images.push(arr);
            labels.push(class);
        }
    }
    let (h, w) = resolution.ok_or_else(|| GtaError::Invalid("no PNG files found".into()))?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png-dir".into());
    LabeledImageSet::new(name, h, w, class_dirs.len(), images, labels)
}
