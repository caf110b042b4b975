use candle_core::{Device, Module, Tensor};
use candle_nn::{Linear, VarMap};

use super::layers::{layer_norm, patchify, Block, Rope2d};
use super::params::{Init, Params};
use super::{ensure_finite, ImageBatch, LatentCode, ModelConfig};
use crate::error::invalid;
use crate::Result;

/// Patch transformer followed by a learned-query readout that compresses the
/// patch sequence into `num_tokens` latent tokens, independent of resolution.
pub struct Encoder {
    config: ModelConfig,
    vars: VarMap,
    embed: Linear,
    blocks: Vec<Block>,
    queries: Tensor,
    readout: Vec<Block>,
    out: Linear,
}

impl Encoder {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let vars = VarMap::new();
        let p = Params::new(&vars, config.init_seed ^ 0xe1c0de, config.dtype(), device);
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let embed = p.pp("embed").linear(patch_dim, w, false)?;
        let blocks = (0..config.encoder_depth)
            .map(|i| Block::new(&p.pp(format!("blocks.{i}")), w, None, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let queries = p.get(&[config.num_tokens, w], "queries", Init::Normal(0.02))?;
        let readout = (0..config.readout_depth.max(1))
            .map(|i| Block::new(&p.pp(format!("readout.{i}")), w, Some(w), config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let out = p.pp("out").linear(w, config.token_dim, false)?;
        Ok(Self {
            config: config.clone(),
            vars,
            embed,
            blocks,
            queries,
            readout,
            out,
        })
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentCode> {
        let x = images.tensor();
        let (h, w) = images.resolution();
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(invalid!("{h}x{w} images are not divisible by patch size {p}"));
        }
        ensure_finite(x, "encoder input")?;
        let b = images.batch_size();
        let (tokens, gh, gw) = patchify(&x.to_dtype(self.config.dtype())?, p)?;
        let rope = Rope2d::new(
            self.config.width / self.config.heads,
            gh,
            gw,
            self.config.reference_grid(),
            self.config.rope_base,
            self.config.dtype(),
            x.device(),
        )?;
        let mut h_tok = self.embed.forward(&tokens)?;
        for blk in &self.blocks {
            h_tok = blk.forward(&h_tok, None, Some(&rope))?;
        }
        let ctx = layer_norm(&h_tok)?;
        let (n, wd) = self.queries.dims2()?;
        let mut q = self.queries.unsqueeze(0)?.broadcast_as((b, n, wd))?.contiguous()?;
        for blk in &self.readout {
            q = blk.forward(&q, Some(&ctx), None)?;
        }
        let z = layer_norm(&self.out.forward(&layer_norm(&q)?)?)?;
        LatentCode::new(z)
    }
}
