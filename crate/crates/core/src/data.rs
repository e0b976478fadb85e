//! Image folders, HR preparation and continuous-scale degradation.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::neural_operator::scaled_size;

/// Smallest LR side accepted anywhere in the pipeline.
pub const MIN_LR_SIZE: usize = 8;

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub hr_size: usize,
    /// Fraction of images assigned to training, the rest go to evaluation.
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hr_size < MIN_LR_SIZE {
            return Err(Error::Config(format!("data: hr_size {} below {MIN_LR_SIZE}", self.hr_size)));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("data: train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: ImageGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<NamedImage>,
    pub eval: Vec<NamedImage>,
}

/// One training triple. `round(lr_size * s) == hr_size` on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePair {
    pub lr: ImageGrid,
    pub hr: ImageGrid,
    pub s: f64,
}

/// Decode an image file to RGB in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    rgb_grid(&img.into_rgb8())
}

/// [`load_image`] on an in-memory encoded file.
pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
    rgb_grid(&img.into_rgb8())
}

fn rgb_grid(img: &image::RgbImage) -> Result<ImageGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            values[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    ImageGrid::new(3, h, w, values)
}

/// Quantise to 8-bit RGB and write a PNG.
pub fn save_png(path: &Path, img: &ImageGrid) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (((img.get(c, y as usize, x as usize) + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Central `size x size` window.
pub fn center_crop(img: &ImageGrid, size: usize) -> Result<ImageGrid> {
    let (_, h, w) = img.dims();
    if h < size || w < size {
        return Err(Error::Data(format!("{h}x{w} image is smaller than the {size}x{size} crop")));
    }
    img.crop((h - size) / 2, (w - size) / 2, size, size)
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

/// Every usable image in `dir`, center-cropped to `hr_size`. Unreadable or
/// undersized files are skipped with a warning; an empty result is an error.
pub fn load_images(dir: &Path, hr_size: usize) -> Result<Vec<NamedImage>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let image = match load_image(&path).and_then(|img| center_crop(&img, hr_size)) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        out.push(NamedImage { name, image });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no usable images of at least {hr_size}x{hr_size} in {}", dir.display())));
    }
    Ok(out)
}

/// Load `cfg.root` and split it with a seeded shuffle. Both halves keep
/// file-name order.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let images = load_images(&cfg.root, cfg.hr_size)?;
    Ok(split(images, cfg.train_fraction, cfg.split_seed))
}

pub fn split(images: Vec<NamedImage>, train_fraction: f64, seed: u64) -> Dataset {
    let n = images.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (img, t) in images.into_iter().zip(is_train) {
        if t {
            train.push(img);
        } else {
            eval.push(img);
        }
    }
    Dataset { train, eval }
}

/// Largest usable training scale for square HR crops of side `hr_size`.
pub fn scale_cap(max_scale: f64, hr_size: usize) -> f64 {
    max_scale.min(hr_size as f64 / MIN_LR_SIZE as f64)
}

/// Uniform draw from `(1, max_scale]`.
pub fn sample_scale<R: Rng + ?Sized>(rng: &mut R, max_scale: f64) -> Result<f64> {
    if !(max_scale > 1.0) || !max_scale.is_finite() {
        return Err(invalid(format!("max scale {max_scale} must exceed 1")));
    }
    let u: f64 = rng.random();
    Ok(max_scale - (max_scale - 1.0) * u)
}

/// `round(n / s)`, halves up.
pub fn lr_size(n: usize, s: f64) -> usize {
    (n as f64 / s + 0.5).floor() as usize
}

/// Bicubic downsampling to `round(size / s)` per axis, clamped to `[-1, 1]`.
pub fn degrade(hr: &ImageGrid, s: f64) -> Result<ImageGrid> {
    if !(s > 1.0) || !s.is_finite() {
        return Err(invalid(format!("degradation scale {s} must exceed 1")));
    }
    let (h, w) = (lr_size(hr.height(), s), lr_size(hr.width(), s));
    if h < MIN_LR_SIZE || w < MIN_LR_SIZE {
        return Err(invalid(format!("scale {s} leaves a {h}x{w} LR image, below {MIN_LR_SIZE}x{MIN_LR_SIZE}")));
    }
    Ok(hr.resize_bicubic(h, w).clamp(-1.0, 1.0))
}

/// Degrade `hr` and record the realised scale `hr_size / lr_size`.
pub fn make_pair(hr: &ImageGrid, s: f64) -> Result<ScalePair> {
    let lr = degrade(hr, s)?;
    let s_eff = hr.height() as f64 / lr.height() as f64;
    // non-square inputs may not reproduce both sides exactly
    if scaled_size(lr.height(), s_eff) != hr.height() || scaled_size(lr.width(), s_eff) != hr.width() {
        return Err(Error::Data(format!(
            "{}x{} cannot be paired with {}x{} at one scale",
            hr.height(),
            hr.width(),
            lr.height(),
            lr.width()
        )));
    }
    Ok(ScalePair { lr, hr: hr.clone(), s: s_eff })
}

/// A deterministic textured RGB scene in `[-1, 1]`: a smooth colour ramp,
/// a few flat-coloured rectangles and an oriented stripe pattern. Meant for
/// smoke tests and demos where no image folder is at hand.
pub fn synthetic_scene(size: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let ramp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let (y0, x0) = (rng.random_range(0.0..n * 0.7), rng.random_range(0.0..n * 0.7));
            let (h, w) = (rng.random_range(n * 0.1..n * 0.4), rng.random_range(n * 0.1..n * 0.4));
            (y0, x0, y0 + h, x0 + w, std::array::from_fn(|_| rng.random_range(-0.8..0.8)))
        })
        .collect();
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(3.0..7.0);
    let amp = rng.random_range(0.15..0.35);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut values = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let stripe = amp * (2.0 * std::f64::consts::PI * (fx * ct + fy * st) / period).sin();
            for c in 0..3 {
                let mut v = base[c] + ramp[c] * (fx + fy) / n + stripe;
                for &(y0, x0, y1, x1, col) in &rects {
                    if fy >= y0 && fy < y1 && fx >= x0 && fx < x1 {
                        v = col[c] + 0.5 * stripe;
                    }
                }
                values[(c * size + y) * size + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
    ImageGrid::new(3, size, size, values).expect("finite by construction")
}
