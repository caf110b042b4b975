use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::noise::keyed_rng;
use crate::Result;

/// A frozen network mapping `(B, 3, H, W)` images to feature maps at several depths.
///
/// This is the plug-in point for pretrained backbones; the built-in
/// [`ConvPyramid`] is a fixed-seed random-weight stand-in.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    /// Global-average-pooled features of every level, concatenated: `(B, sum C_l)`.
    fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let maps = self.features(images)?;
        let pooled = maps
            .iter()
            .map(|m| Ok(m.mean(D::Minus1)?.mean(D::Minus1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

/// Random-weight convolutional pyramid: one 3x3 conv + ReLU per level with 2x
/// average pooling between levels. Weights are plain tensors, never trained.
pub struct ConvPyramid {
    levels: Vec<ConvLayer>,
    input_range: (f64, f64),
}

impl ConvPyramid {
    pub fn new(seed: u64, widths: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = keyed_rng(seed, 0x6665_6174, 0);
        let mut c_in = 3;
        let mut levels = Vec::with_capacity(widths.len());
        for &c_out in widths {
            let fan_in = c_in * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..c_out * fan_in)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..c_out).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            levels.push(ConvLayer {
                weight: Tensor::from_vec(w, (c_out, c_in, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::from_vec(b, (1, c_out, 1, 1), device)?.to_dtype(dtype)?,
            });
            c_in = c_out;
        }
        Ok(Self {
            levels,
            input_range: (-1.0, 1.0),
        })
    }

    /// Declares the value range of incoming images; inputs are mapped to `[-1, 1]`.
    pub fn with_input_range(mut self, lo: f64, hi: f64) -> Self {
        self.input_range = (lo, hi);
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.weight.dims()[0]).collect()
    }
}

impl FeatureExtractor for ConvPyramid {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = self.levels[0].weight.dtype();
        let (lo, hi) = self.input_range;
        let mut x = images.to_dtype(dtype)?.affine(2.0 / (hi - lo), -2.0 * lo / (hi - lo) - 1.0)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, layer) in self.levels.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = x.conv2d(&layer.weight, 1, 1, 1, 1)?.broadcast_add(&layer.bias)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// LPIPS-style distance over a frozen extractor: channel-unit-normalized features,
/// squared differences summed over channels, averaged over positions, weighted per level.
pub struct PerceptualExtractor {
    extractor: Box<dyn FeatureExtractor>,
    layer_weights: Vec<f64>,
}

impl PerceptualExtractor {
    pub fn new(extractor: Box<dyn FeatureExtractor>, layer_weights: Vec<f64>) -> Self {
        Self {
            extractor,
            layer_weights,
        }
    }

    /// Default desk-scale extractor: three-level random pyramid, equal weights.
    pub fn random_pyramid(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let pyramid = ConvPyramid::new(seed, &[16, 32, 64], dtype, device)?;
        Ok(Self::new(Box::new(pyramid), vec![1.0 / 3.0; 3]))
    }

    pub fn perceptual_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.extractor.features(images)
    }

    fn unit_normalize(f: &Tensor) -> Result<Tensor> {
        let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
        Ok(f.broadcast_div(&norm)?)
    }

    /// Per-image distance `(B,)`.
    pub fn distance_per_image(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.extractor.features(a)?;
        let fb = self.extractor.features(b)?;
        let mut total: Option<Tensor> = None;
        for ((x, y), w) in fa.iter().zip(&fb).zip(&self.layer_weights) {
            let d = (Self::unit_normalize(x)? - Self::unit_normalize(y)?)?
                .sqr()?
                .sum(1)?
                .flatten_from(1)?
                .mean(1)?;
            let d = (d * *w)?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        Ok(total.expect("at least one feature level"))
    }

    /// Batch-mean distance as a scalar tensor.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.distance_per_image(a, b)?.mean_all()?)
    }
}
