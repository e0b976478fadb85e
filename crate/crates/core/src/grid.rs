//! Channel-first image grids in the `[-1, 1]` value convention, plus the
//! bicubic resampler used for degradation and for the bicubic baseline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A `channels x height x width` image. Pixel value 0 maps to -1 and the
/// maximum pixel value maps to +1.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!("{} values for a {channels}x{height}x{width} image", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self { channels, height, width, values: vec![v; channels * height * width] }
    }

    /// Independent standard normal draws.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let values = (0..channels * height * width).map(|_| StandardNormal.sample(rng)).collect();
        Self { channels, height, width, values }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &ImageGrid, b: f64) -> Result<ImageGrid> {
        self.check_same_shape(other, "axpby")?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(self.with_values(values))
    }

    pub fn scaled(&self, a: f64) -> ImageGrid {
        self.with_values(self.values.iter().map(|v| a * v).collect())
    }

    fn with_values(&self, values: Vec<f64>) -> ImageGrid {
        debug_assert_eq!(values.len(), self.values.len());
        Self { channels: self.channels, height: self.height, width: self.width, values }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageGrid {
        self.with_values(self.values.iter().map(|v| v.clamp(lo, hi)).collect())
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Map from `[-1, 1]` to `[0, 1]`.
    pub fn to_unit_range(&self) -> ImageGrid {
        self.with_values(self.values.iter().map(|v| (v + 1.0) * 0.5).collect())
    }

    /// A `[1, c, h, w]` tensor.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.values.iter().map(|&v| F::of(v)).collect())
    }

    /// Stack into a `[n, c, h, w]` batch.
    pub fn batch_tensor<F: Scalar>(images: &[ImageGrid]) -> Result<Tensor<F>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.values.len());
        for im in images {
            first.check_same_shape(im, "batch")?;
            data.extend(im.values.iter().map(|&v| F::of(v)));
        }
        let (c, h, w) = first.dims();
        Ok(Tensor::from_vec(&[images.len(), c, h, w], data))
    }

    /// Split a `[n, c, h, w]` tensor into images.
    pub fn from_batch_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Vec<ImageGrid>> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        }
        let (n, c, h, w) = t.dims4();
        let plane = c * h * w;
        (0..n).map(|i| ImageGrid::new(c, h, w, t.data()[i * plane..(i + 1) * plane].iter().map(|v| v.as_f64()).collect())).collect()
    }

    /// Replicate-pad on the bottom and right edges to `height x width`.
    pub fn pad_to(&self, height: usize, width: usize) -> ImageGrid {
        assert!(height >= self.height && width >= self.width, "pad_to cannot shrink");
        let mut out = ImageGrid::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let v = self.get(c, y.min(self.height - 1), x.min(self.width - 1));
                    out.values[(c * height + y) * width + x] = v;
                }
            }
        }
        out
    }

    /// The top-left `height x width` window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageGrid> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!("crop {height}x{width}@({top},{left}) outside {}x{}", self.height, self.width)));
        }
        let mut values = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                values.extend_from_slice(&self.values[row + left..row + left + width]);
            }
        }
        ImageGrid::new(self.channels, height, width, values)
    }

    /// Separable bicubic resampling to `out_h x out_w`.
    pub fn resize_bicubic(&self, out_h: usize, out_w: usize) -> ImageGrid {
        let (c, h, w) = self.dims();
        let wy = resample_weights(h, out_h);
        let wx = resample_weights(w, out_w);
        let mut tmp = vec![0.0; c * h * out_w];
        for ch in 0..c {
            for y in 0..h {
                let src = &self.values[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
                for (d, taps) in dst.iter_mut().zip(&wx) {
                    *d = taps.iter().map(|&(i, k)| k * src[i]).sum();
                }
            }
        }
        let mut values = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for (oy, taps) in wy.iter().enumerate() {
                let dst = &mut values[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
                for &(iy, k) in taps {
                    let src = &tmp[(ch * h + iy) * out_w..(ch * h + iy + 1) * out_w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += k * s;
                    }
                }
            }
        }
        ImageGrid { channels: c, height: out_h, width: out_w, values }
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Per output index, the `(input index, weight)` taps. When shrinking the
/// kernel is stretched by the scale factor so the filter also antialiases.
/// Weights of each output sum to one; out-of-range taps clamp to the edge.
fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let k = cubic_kernel((i as f64 - center) / stretch);
                if k == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += k,
                    None => taps.push((idx, k)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bicubic_preserves_constants_in_both_directions() {
        let im = ImageGrid::filled(3, 20, 13, 0.37);
        for &(h, w) in &[(10, 7), (40, 26), (9, 31)] {
            let r = im.resize_bicubic(h, w);
            assert_eq!(r.dims(), (3, h, w));
            assert!(r.values().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn bicubic_identity_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let im = ImageGrid::randn(2, 9, 11, &mut rng);
        let r = im.resize_bicubic(9, 11);
        assert!(r.max_abs_diff(&im) < 1e-12);
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_when_upsampling() {
        // Interior samples of a linear ramp are reproduced exactly by the cubic kernel.
        let w = 16;
        let vals: Vec<f64> = (0..w).map(|x| x as f64 / 8.0 - 1.0).collect();
        let im = ImageGrid::new(1, 1, w, vals).unwrap();
        let r = im.resize_bicubic(1, 2 * w);
        for ox in 4..2 * w - 4 {
            let src = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((r.get(0, 0, ox) - (src / 8.0 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_and_pad() {
        let vals: Vec<f64> = (0..2 * 4 * 5).map(f64::from).collect();
        let im = ImageGrid::new(2, 4, 5, vals).unwrap();
        let c = im.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.get(1, 0, 0), im.get(1, 1, 2));
        assert!(im.crop(3, 0, 2, 2).is_err());
        let p = im.pad_to(6, 7);
        assert_eq!(p.get(0, 5, 6), im.get(0, 3, 4));
        assert_eq!(p.crop(0, 0, 4, 5).unwrap(), im);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ImageGrid::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImageGrid::new(0, 1, 1, vec![]).is_err());
    }
}
