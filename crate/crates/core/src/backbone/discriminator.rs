use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarMap;

use super::features::{ConvPyramid, FeatureExtractor};
use super::params::{Init, Params};
use super::{ImageBatch, ModelConfig};
use crate::noise::NoiseSource;
use crate::Result;

/// Logit bound applied before the sigmoid so scores stay strictly inside (0, 1)
/// even in single precision.
const LOGIT_BOUND: f64 = 15.0;

/// 3x3 convolution with spectral normalization.
///
/// The normalizer is `||W^T u||` for a persistent left singular-vector estimate
/// `u` that is held fixed during a forward pass and advanced by [`SpectralConv::refresh`].
/// With `u` fixed this is exactly differentiable in `W`.
pub struct SpectralConv {
    weight: Tensor,
    bias: Tensor,
    u: Mutex<Tensor>,
}

impl SpectralConv {
    fn new(p: &Params, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let weight = p.get(&[c_out, c_in, 3, 3], "weight", Init::Uniform(bound))?;
        let bias = p.get(&[1, c_out, 1, 1], "bias", Init::Zeros)?;
        let u = NoiseSource::new(seed).batch(1, &[c_out], p.dtype(), p.device())?.reshape(c_out)?;
        let u = (&u / u.sqr()?.sum_all()?.sqrt()?.to_scalar_f64()?)?;
        let conv = Self {
            weight,
            bias,
            u: Mutex::new(u),
        };
        for _ in 0..10 {
            conv.refresh()?;
        }
        Ok(conv)
    }

    fn matrix(&self) -> Result<Tensor> {
        let c_out = self.weight.dim(0)?;
        Ok(self.weight.reshape((c_out, ()))?)
    }

    /// One power-iteration step on the current weights.
    pub fn refresh(&self) -> Result<()> {
        let w = self.matrix()?.detach();
        let mut u = self.u.lock().expect("spectral state poisoned");
        let v = w.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?;
        let v = (&v / (v.sqr()?.sum_all()?.sqrt()?.to_scalar_f64()? + 1e-12))?;
        let nu = w.matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
        *u = (&nu / (nu.sqr()?.sum_all()?.sqrt()?.to_scalar_f64()? + 1e-12))?;
        Ok(())
    }

    pub fn sigma(&self) -> Result<Tensor> {
        let u = self.u.lock().expect("spectral state poisoned").clone();
        let wtu = self.matrix()?.t()?.matmul(&u.unsqueeze(1)?)?;
        Ok(wtu.sqr()?.sum_all()?.sqrt()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.broadcast_div(&self.sigma()?)?;
        Ok(x.conv2d(&w, 1, 1, 1, 1)?.broadcast_add(&self.bias)?)
    }
}

trait ScalarF64 {
    fn to_scalar_f64(&self) -> Result<f64>;
}

impl ScalarF64 for Tensor {
    fn to_scalar_f64(&self) -> Result<f64> {
        Ok(self.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

struct Head {
    conv_in: SpectralConv,
    conv_res: SpectralConv,
    logits: Tensor,
    logits_bias: Tensor,
}

impl Head {
    fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.conv_in.forward(f)?, 0.2)?;
        let h = (&h + self.conv_res.forward(&candle_nn::ops::leaky_relu(&h, 0.2)?)?)?;
        let h = candle_nn::ops::leaky_relu(&h, 0.2)?;
        // 1x1 projection to one logit per patch.
        Ok(h.conv2d(&self.logits, 0, 1, 1, 1)?.broadcast_add(&self.logits_bias)?)
    }
}

/// Patch discriminator: a frozen feature pyramid with a trainable spectral-norm
/// residual head on each of its two deepest levels. Patch logits are averaged per
/// image. The final projection is zero-initialized, so a fresh discriminator
/// scores every input exactly 0.5.
pub struct Discriminator {
    vars: VarMap,
    trunk: Box<dyn FeatureExtractor>,
    heads: Vec<Head>,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        let dtype = config.dtype();
        let trunk = ConvPyramid::new(config.feature_seed ^ 0xd15c, &[16, 32, 64], dtype, device)?;
        Self::with_trunk(config, Box::new(trunk), &[32, 64], device)
    }

    /// Discriminator over a custom frozen trunk. `level_widths` are the channel
    /// counts of the trunk levels the heads consume (the last `level_widths.len()` levels).
    pub fn with_trunk(
        config: &ModelConfig,
        trunk: Box<dyn FeatureExtractor>,
        level_widths: &[usize],
        device: &Device,
    ) -> Result<Self> {
        let vars = VarMap::new();
        let p = Params::new(&vars, config.init_seed ^ 0xd15c, config.dtype(), device);
        let w = config.disc_width;
        let heads = level_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let hp = p.pp(format!("heads.{i}"));
                Ok(Head {
                    conv_in: SpectralConv::new(&hp.pp("conv_in"), c, w, config.init_seed + 2 * i as u64)?,
                    conv_res: SpectralConv::new(&hp.pp("conv_res"), w, w, config.init_seed + 2 * i as u64 + 1)?,
                    logits: hp.get(&[1, w, 1, 1], "logits.weight", Init::Zeros)?,
                    logits_bias: hp.get(&[1, 1, 1, 1], "logits.bias", Init::Zeros)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { vars, trunk, heads })
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    /// Per-image logits `(B,)` before bounding.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.trunk.features(images)?;
        let skip = feats.len() - self.heads.len();
        let mut total: Option<Tensor> = None;
        for (head, f) in self.heads.iter().zip(&feats[skip..]) {
            let l = head.forward(f)?.flatten_from(1)?.mean(D::Minus1)?;
            total = Some(match total {
                None => l,
                Some(t) => (t + l)?,
            });
        }
        Ok((total.expect("at least one head") / self.heads.len() as f64)?)
    }

    /// Realness scores in the open interval (0, 1), shape `(B,)`.
    pub fn discriminate(&self, images: &ImageBatch) -> Result<Tensor> {
        self.scores(images.tensor())
    }

    pub fn scores(&self, images: &Tensor) -> Result<Tensor> {
        let l = self.logits(images)?;
        let bounded = ((l / LOGIT_BOUND)?.tanh()? * LOGIT_BOUND)?;
        Ok(candle_nn::ops::sigmoid(&bounded)?)
    }

    /// Advances the power iteration of every spectral-norm layer.
    pub fn refresh_spectral(&self) -> Result<()> {
        for h in &self.heads {
            h.conv_in.refresh()?;
            h.conv_res.refresh()?;
        }
        Ok(())
    }
}
