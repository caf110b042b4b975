//! Networks: the latent encoder, the conditional velocity transformer shared by
//! teacher and student, frozen feature extractors and the patch discriminator.

mod discriminator;
mod encoder;
mod features;
mod layers;
mod params;
mod velocity;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, SpectralConv};
pub use encoder::Encoder;
pub use features::{ConvPyramid, FeatureExtractor, PerceptualExtractor};
pub use layers::Rope2d;
pub use params::{copy_vars, vars_fingerprint, Init, Params};
pub use velocity::VelocityTransformer;

use crate::error::invalid;
use crate::Result;

/// Numeric precision of model parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture hyperparameters shared by encoder, decoder and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the full-resolution square images the encoder sees.
    pub image_size: usize,
    pub patch_size: usize,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub readout_depth: usize,
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
    pub rope_base: f64,
    pub disc_width: usize,
    /// Seed of the frozen random-weight feature networks.
    pub feature_seed: u64,
    pub init_seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            num_tokens: 16,
            token_dim: 16,
            width: 128,
            depth: 4,
            heads: 4,
            encoder_depth: 2,
            readout_depth: 1,
            mlp_ratio: 4,
            time_freq_dim: 64,
            rope_base: 100.0,
            disc_width: 32,
            feature_seed: 0x5eed,
            init_seed: 0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid!(
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if !(self.width / self.heads).is_multiple_of(4) {
            return Err(invalid!("head dim must be a multiple of 4 for 2-D rotary encoding"));
        }
        if self.num_tokens == 0 || self.token_dim == 0 || self.depth == 0 {
            return Err(invalid!("token count, token width and depth must be positive"));
        }
        if !self.time_freq_dim.is_multiple_of(2) {
            return Err(invalid!("time_freq_dim must be even"));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Patch grid side at the full image size; rotary positions are expressed on this grid.
    pub fn reference_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Hex digest of the architecture; checkpoints record it to reject mismatched loads.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// A batch of RGB images laid out as `(B, 3, H, W)` with values nominally in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() != 4 || d[1] != 3 {
            return Err(invalid!("image batch must be (B, 3, H, W), got {:?}", d));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[2], d[3])
    }
}

/// Encoder output: `(B, num_tokens, token_dim)`.
#[derive(Debug, Clone)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 3 {
            return Err(invalid!("latent code must be (B, N, D), got {:?}", t.dims()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// Rows `ids` of the batch.
    pub fn select(&self, ids: &[u32]) -> Result<Self> {
        let idx = Tensor::new(ids, self.0.device())?;
        Ok(Self(self.0.index_select(&idx, 0)?))
    }
}

/// What the velocity model is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    Latent(&'a LatentCode),
    /// The learned null embedding (unconditional branch of guidance).
    Null,
    /// Per-row choice: rows where `keep` is 1 see the latent, rows where it is 0 see the null embedding.
    /// `keep` has shape `(B,)`.
    Masked {
        latent: &'a LatentCode,
        keep: &'a Tensor,
    },
}

/// A conditional velocity field `mu(x, t, cond)`.
///
/// `x` is `(B, 3, H, W)` at any stage resolution and `t` is `(B,)`; the output has
/// the shape of `x`.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor, t: &Tensor, cond: Conditioning<'_>) -> Result<Tensor>;

    /// Conditional and unconditional outputs for guidance. Implementations may batch the two.
    fn velocity_pair(&self, x: &Tensor, t: &Tensor, z: &LatentCode) -> Result<(Tensor, Tensor)> {
        let c = self.velocity(x, t, Conditioning::Latent(z))?;
        let u = self.velocity(x, t, Conditioning::Null)?;
        Ok((c, u))
    }
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn velocity(&self, x: &Tensor, t: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        (**self).velocity(x, t, cond)
    }

    fn velocity_pair(&self, x: &Tensor, t: &Tensor, z: &LatentCode) -> Result<(Tensor, Tensor)> {
        (**self).velocity_pair(x, t, z)
    }
}

/// `(B,)` tensor filled with `t`.
pub fn time_tensor(t: f64, batch: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::full(t, batch, device)?.to_dtype(dtype)?)
}

pub(crate) fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(invalid!("{what} contains non-finite values"));
    }
    Ok(())
}

/// Encoder plus multi-scale decoder.
pub struct Tokenizer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: VelocityTransformer,
    device: Device,
}

impl Tokenizer {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(config, device)?,
            decoder: VelocityTransformer::new(config, device)?,
            device: device.clone(),
        })
    }

    pub fn from_parts(config: ModelConfig, encoder: Encoder, decoder: VelocityTransformer, device: Device) -> Self {
        Self {
            config,
            encoder,
            decoder,
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentCode> {
        self.encoder.encode(images)
    }
}
