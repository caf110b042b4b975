use candle_core::{Device, DType, Module, Tensor, D};
use candle_nn::Linear;

use super::params::Params;
use crate::error::invalid;
use crate::Result;

/// Layer normalization over the last dimension without affine parameters.
pub(crate) fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

/// `(B, C, H, W)` -> `(B, (H/p)(W/p), C p p)`, row-major over the patch grid.
pub(crate) fn patchify(x: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(invalid!("{h}x{w} input is not divisible by patch size {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let t = x
        .reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * p * p))?;
    Ok((t, gh, gw))
}

pub(crate) fn unpatchify(t: &Tensor, c: usize, p: usize, gh: usize, gw: usize) -> Result<Tensor> {
    let b = t.dim(0)?;
    Ok(t
        .reshape((b, gh, gw, c, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, gh * p, gw * p))?)
}

/// Two-axis rotary position encoding.
///
/// The first half of every head is rotated by the row coordinate, the second half
/// by the column coordinate. Coordinates are patch centres expressed on the patch
/// grid of the full-resolution image, so a coarse stage's patches land where the
/// same image area sits at full resolution.
#[derive(Debug, Clone)]
pub struct Rope2d {
    cos_r: Tensor,
    sin_r: Tensor,
    cos_c: Tensor,
    sin_c: Tensor,
    axis_dim: usize,
}

impl Rope2d {
    pub fn new(
        head_dim: usize,
        gh: usize,
        gw: usize,
        reference_grid: usize,
        base: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let axis_dim = head_dim / 2;
        let half = axis_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| base.powf(-(2.0 * i as f64) / axis_dim as f64))
            .collect();
        let l = gh * gw;
        let table = |coord: &dyn Fn(usize) -> f64| -> Result<(Tensor, Tensor)> {
            let mut cos = Vec::with_capacity(l * axis_dim);
            let mut sin = Vec::with_capacity(l * axis_dim);
            for k in 0..l {
                let pos = coord(k);
                for _ in 0..2 {
                    for f in &freqs {
                        cos.push((pos * f).cos());
                        sin.push((pos * f).sin());
                    }
                }
            }
            Ok((
                Tensor::from_vec(cos, (l, axis_dim), device)?.to_dtype(dtype)?,
                Tensor::from_vec(sin, (l, axis_dim), device)?.to_dtype(dtype)?,
            ))
        };
        let rg = reference_grid as f64;
        let (cos_r, sin_r) = table(&|k| ((k / gw) as f64 + 0.5) * rg / gh as f64)?;
        let (cos_c, sin_c) = table(&|k| ((k % gw) as f64 + 0.5) * rg / gw as f64)?;
        Ok(Self {
            cos_r,
            sin_r,
            cos_c,
            sin_c,
            axis_dim,
        })
    }

    fn rotate(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let x1 = x.narrow(D::Minus1, 0, d / 2)?;
        let x2 = x.narrow(D::Minus1, d / 2, d / 2)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
        Ok((x.broadcast_mul(cos)? + rotated.broadcast_mul(sin)?)?)
    }

    /// Applies the rotation to `(B, heads, L, head_dim)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.axis_dim;
        let xr = x.narrow(D::Minus1, 0, a)?;
        let xc = x.narrow(D::Minus1, a, a)?;
        let r = Self::rotate(&xr, &self.cos_r, &self.sin_r)?;
        let c = Self::rotate(&xc, &self.cos_c, &self.sin_c)?;
        Ok(Tensor::cat(&[&r, &c], D::Minus1)?)
    }
}

pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &Params, width: usize, ctx_width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: p.pp("q").linear(width, width, false)?,
            k: p.pp("k").linear(ctx_width, width, false)?,
            v: p.pp("v").linear(ctx_width, width, false)?,
            o: p.pp("o").linear(width, width, false)?,
            heads,
        })
    }

    fn split(&self, t: &Tensor) -> Result<Tensor> {
        let (b, l, w) = t.dims3()?;
        Ok(t
            .reshape((b, l, self.heads, w / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x` attends to `ctx`; rotary encoding is applied to queries and keys when given
    /// (self-attention only).
    pub fn forward(&self, x: &Tensor, ctx: &Tensor, rope: Option<&Rope2d>) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let mut q = self.split(&self.q.forward(x)?)?;
        let mut k = self.split(&self.k.forward(ctx)?)?;
        let v = self.split(&self.v.forward(ctx)?)?;
        if let Some(rope) = rope {
            q = rope.apply(&q)?;
            k = rope.apply(&k)?;
        }
        let scale = 1.0 / ((w / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, w))?;
        Ok(self.o.forward(&out)?)
    }
}

pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &Params, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: p.pp("fc1").linear(width, hidden, false)?,
            fc2: p.pp("fc2").linear(hidden, width, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

/// Pre-norm block: self-attention with rotary positions, optional cross-attention, MLP.
pub(crate) struct Block {
    attn: Attention,
    cross: Option<Attention>,
    mlp: Mlp,
}

impl Block {
    pub fn new(
        p: &Params,
        width: usize,
        ctx_width: Option<usize>,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&p.pp("attn"), width, width, heads)?,
            cross: ctx_width
                .map(|cw| Attention::new(&p.pp("cross"), width, cw, heads))
                .transpose()?,
            mlp: Mlp::new(&p.pp("mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Option<&Tensor>, rope: Option<&Rope2d>) -> Result<Tensor> {
        let h = layer_norm(x)?;
        let mut x = (x + self.attn.forward(&h, &h, rope)?)?;
        if let (Some(cross), Some(ctx)) = (&self.cross, ctx) {
            x = (&x + cross.forward(&layer_norm(&x)?, ctx, None)?)?;
        }
        Ok((&x + self.mlp.forward(&layer_norm(&x)?)?)?)
    }
}

/// Sinusoidal embedding of `t * 1000` followed by a two-layer MLP.
pub(crate) struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
}

impl TimeEmbedding {
    pub fn new(p: &Params, freq_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            fc1: p.pp("fc1").linear(freq_dim, width, false)?,
            fc2: p.pp("fc2").linear(width, width, false)?,
            freq_dim,
        })
    }

    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let half = self.freq_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
        let args = (t.unsqueeze(1)? * 1000.0)?.broadcast_mul(&freqs)?;
        let emb = Tensor::cat(&[&args.cos()?, &args.sin()?], 1)?;
        Ok(self.fc2.forward(&candle_nn::ops::silu(&self.fc1.forward(&emb)?)?)?)
    }
}
