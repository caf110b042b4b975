use candle_core::{Device, Module, Tensor};
use candle_nn::{Linear, VarMap};

use super::layers::{layer_norm, patchify, unpatchify, Block, Rope2d, TimeEmbedding};
use super::params::{Init, Params};
use super::{ensure_finite, Conditioning, LatentCode, ModelConfig, VelocityModel};
use crate::error::invalid;
use crate::Result;

/// Conditional velocity transformer `mu(x, t, z)`.
///
/// Patch tokens of the noisy image (any resolution divisible by the patch size)
/// get a sinusoidal time embedding added, then pass through pre-norm blocks with
/// rotary self-attention and cross-attention to the projected latent tokens.
/// The output head is zero-initialized.
pub struct VelocityTransformer {
    config: ModelConfig,
    vars: VarMap,
    embed: Linear,
    time: TimeEmbedding,
    ctx_proj: Linear,
    ctx_pos: Tensor,
    null_tokens: Tensor,
    blocks: Vec<Block>,
    head: Linear,
}

impl VelocityTransformer {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        Self::with_seed(config, config.init_seed, device)
    }

    pub fn with_seed(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let vars = VarMap::new();
        let p = Params::new(&vars, seed ^ 0xdec0de, config.dtype(), device);
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let embed = p.pp("embed").linear(patch_dim, w, false)?;
        let time = TimeEmbedding::new(&p.pp("time"), config.time_freq_dim, w)?;
        let ctx_proj = p.pp("ctx_proj").linear(config.token_dim, w, false)?;
        let ctx_pos = p.get(&[config.num_tokens, w], "ctx_pos", Init::Normal(0.02))?;
        let null_tokens = p.get(&[config.num_tokens, config.token_dim], "null_tokens", Init::Normal(0.02))?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(&p.pp(format!("blocks.{i}")), w, Some(w), config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let head = p.pp("head").linear(w, patch_dim, true)?;
        Ok(Self {
            config: config.clone(),
            vars,
            embed,
            time,
            ctx_proj,
            ctx_pos,
            null_tokens,
            blocks,
            head,
        })
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of multiply-adds of one forward pass at `h x w`, counting the
    /// dense and attention matmuls. Used as the analytic per-step cost model.
    pub fn forward_flops(&self, h: usize, w: usize) -> f64 {
        let c = &self.config;
        let l = ((h / c.patch_size) * (w / c.patch_size)) as f64;
        let n = c.num_tokens as f64;
        let d = c.width as f64;
        let pd = (3 * c.patch_size * c.patch_size) as f64;
        let per_block = 4.0 * l * d * d          // self-attention projections
            + 2.0 * l * l * d                    // scores and weighted sum
            + 2.0 * l * d * d + 2.0 * n * d * d  // cross-attention q/o and k/v
            + 2.0 * l * n * d
            + 2.0 * l * d * d * c.mlp_ratio as f64;
        2.0 * (l * pd * d + c.depth as f64 * per_block + l * d * pd)
    }

    fn context(&self, cond: Conditioning<'_>, batch: usize) -> Result<Tensor> {
        let null = || -> Result<Tensor> {
            let (n, d) = self.null_tokens.dims2()?;
            Ok(self.null_tokens.unsqueeze(0)?.broadcast_as((batch, n, d))?)
        };
        let check = |z: &LatentCode| -> Result<()> {
            if z.batch_size() != batch
                || z.num_tokens() != self.config.num_tokens
                || z.token_dim() != self.config.token_dim
            {
                return Err(invalid!(
                    "latent code {:?} does not match batch {batch} with {}x{} tokens",
                    z.tensor().dims(),
                    self.config.num_tokens,
                    self.config.token_dim
                ));
            }
            Ok(())
        };
        let tokens = match cond {
            Conditioning::Null => null()?,
            Conditioning::Latent(z) => {
                check(z)?;
                z.tensor().to_dtype(self.config.dtype())?
            }
            Conditioning::Masked { latent, keep } => {
                check(latent)?;
                let keep = keep.to_dtype(self.config.dtype())?.reshape((batch, 1, 1))?;
                let z = latent.tensor().to_dtype(self.config.dtype())?;
                let drop = keep.affine(-1.0, 1.0)?;
                (z.broadcast_mul(&keep)? + null()?.broadcast_mul(&drop)?)?
            }
        };
        Ok(self.ctx_proj.forward(&tokens)?.broadcast_add(&self.ctx_pos)?)
    }

    fn forward_with_context(&self, x: &Tensor, t: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let p = self.config.patch_size;
        let (b, c, _, _) = x.dims4()?;
        if t.dims() != [b] {
            return Err(invalid!("time tensor must be ({b},), got {:?}", t.dims()));
        }
        let dtype = self.config.dtype();
        let (tokens, gh, gw) = patchify(&x.to_dtype(dtype)?, p)?;
        let rope = Rope2d::new(
            self.config.width / self.config.heads,
            gh,
            gw,
            self.config.reference_grid(),
            self.config.rope_base,
            dtype,
            x.device(),
        )?;
        let temb = self.time.forward(&t.to_dtype(dtype)?)?.unsqueeze(1)?;
        let mut h = self.embed.forward(&tokens)?.broadcast_add(&temb)?;
        for blk in &self.blocks {
            h = blk.forward(&h, Some(ctx), Some(&rope))?;
        }
        let out = self.head.forward(&layer_norm(&h)?)?;
        unpatchify(&out, c, p, gh, gw)?.to_dtype(x.dtype()).map_err(Into::into)
    }
}

impl VelocityModel for VelocityTransformer {
    fn velocity(&self, x: &Tensor, t: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        ensure_finite(x, "velocity input")?;
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(invalid!("expected 3 channels, got {c}"));
        }
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(invalid!("{h}x{w} input is not divisible by patch size {p}"));
        }
        let ctx = self.context(cond, b)?;
        self.forward_with_context(x, t, &ctx)
    }

    /// Runs the conditional and null branches as one doubled batch.
    fn velocity_pair(&self, x: &Tensor, t: &Tensor, z: &LatentCode) -> Result<(Tensor, Tensor)> {
        ensure_finite(x, "velocity input")?;
        let b = x.dim(0)?;
        let ctx = Tensor::cat(
            &[
                &self.context(Conditioning::Latent(z), b)?,
                &self.context(Conditioning::Null, b)?,
            ],
            0,
        )?;
        let xx = Tensor::cat(&[x, x], 0)?;
        let tt = Tensor::cat(&[t, t], 0)?;
        let out = self.forward_with_context(&xx, &tt, &ctx)?;
        Ok((out.narrow(0, 0, b)?, out.narrow(0, b, b)?))
    }
}
