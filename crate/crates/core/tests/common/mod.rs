//! Shared fixtures: toy differentiable models, a finite-difference checker and
//! small model configurations.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use mstok::backbone::{Conditioning, LatentCode, ModelConfig, Precision, VelocityModel};
use mstok::distill::Critic;
use mstok::Result;
use rand::{Rng, SeedableRng};

pub fn var(values: &[f64], shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn random_var(seed: u64, shape: &[usize], scale: f64) -> Var {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    var(&v, shape)
}

/// `v = W x + a * tanh(x) + b t + c * cond`, per channel, where `cond` is the
/// latent mean on kept rows and a learned null value elsewhere. 22 parameters.
pub struct ToyVelocity {
    pub w: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub null: Var,
}

impl ToyVelocity {
    pub fn new(seed: u64) -> Self {
        Self {
            w: random_var(seed, &[3, 3], 0.5),
            a: random_var(seed + 1, &[3], 0.5),
            b: random_var(seed + 2, &[3], 0.5),
            c: random_var(seed + 3, &[3], 0.5),
            null: random_var(seed + 4, &[1], 0.5),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w.clone(), self.a.clone(), self.b.clone(), self.c.clone(), self.null.clone()]
    }
}

impl VelocityModel for ToyVelocity {
    fn velocity(&self, x: &Tensor, t: &Tensor, cond: Conditioning<'_>) -> Result<Tensor> {
        let (bsz, ch, h, w) = x.dims4()?;
        let flat = x.reshape((bsz, ch, h * w))?;
        let mixed = self.w.as_tensor().broadcast_matmul(&flat)?;
        let mixed = mixed.reshape((bsz, ch, h, w))?;
        let col = |v: &Var| v.as_tensor().reshape((1, 3, 1, 1));
        let nonlin = x.tanh()?.broadcast_mul(&col(&self.a)?)?;
        let time = t.reshape((bsz, 1, 1, 1))?.broadcast_mul(&col(&self.b)?)?;
        let null = self.null.as_tensor().reshape((1, 1))?.broadcast_as((bsz, 1))?;
        let cond = match cond {
            Conditioning::Latent(z) => z.tensor().flatten_from(1)?.mean_keepdim(1)?,
            Conditioning::Null => null,
            Conditioning::Masked { latent, keep } => {
                let zc = latent.tensor().flatten_from(1)?.mean_keepdim(1)?;
                let k = keep.reshape((bsz, 1))?;
                (zc.broadcast_mul(&k)? + null.broadcast_mul(&k.affine(-1.0, 1.0)?)?)?
            }
        };
        let cterm = cond.reshape((bsz, 1, 1, 1))?.broadcast_mul(&col(&self.c)?)?;
        Ok(mixed.broadcast_add(&nonlin)?.broadcast_add(&time)?.broadcast_add(&cterm)?)
    }
}

/// `D(x) = sigmoid(w . mean(x) + u . mean(x^2) + b)` per image. 7 parameters.
pub struct ToyCritic {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl ToyCritic {
    pub fn new(seed: u64) -> Self {
        Self {
            w: random_var(seed, &[3, 1], 0.8),
            u: random_var(seed + 1, &[3, 1], 0.8),
            b: random_var(seed + 2, &[1], 0.3),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w.clone(), self.u.clone(), self.b.clone()]
    }
}

impl Critic for ToyCritic {
    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, ch, h, w) = x.dims4()?;
        let f = x.reshape((bsz, ch, h * w))?;
        let m = f.mean(2)?;
        let m2 = f.sqr()?.mean(2)?;
        let l = (m.matmul(self.w.as_tensor())? + m2.matmul(self.u.as_tensor())?)?
            .broadcast_add(self.b.as_tensor())?
            .squeeze(1)?;
        Ok(candle_nn::ops::sigmoid(&l)?)
    }
}

pub fn latent(seed: u64, b: usize) -> LatentCode {
    let t = random_var(seed, &[b, 4, 4], 1.0).as_tensor().clone();
    LatentCode::new(t).unwrap()
}

pub fn image(seed: u64, shape: &[usize]) -> Tensor {
    random_var(seed, shape, 0.9).as_tensor().clone()
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` over all parameters (as vectors)
/// between autograd and central finite differences of `loss`.
pub fn gradient_check(vars: &[Var], loss: impl Fn() -> Result<Tensor>, h: f64) -> f64 {
    let l = loss().unwrap();
    let grads = l.backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for v in vars {
        let g = grads
            .get(v.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; v.as_tensor().elem_count()]);
        analytic.extend(g);
        let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = v.as_tensor().dims().to_vec();
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss().unwrap().to_scalar::<f64>().unwrap()
            };
            let d = (eval(h) - eval(-h)) / (2.0 * h);
            numeric.push(d);
        }
        v.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm_a.max(norm_n).max(1e-12)
}

/// Small transformer for fast end-to-end tests at 32x32.
pub fn tiny_model(precision: Precision) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 4,
        num_tokens: 8,
        token_dim: 8,
        width: 32,
        depth: 1,
        heads: 2,
        encoder_depth: 1,
        readout_depth: 1,
        mlp_ratio: 2,
        time_freq_dim: 32,
        precision,
        ..ModelConfig::default()
    }
}

/// Tiny end-to-end run configuration writing into `dir`.
#[allow(clippy::field_reassign_with_default)]
pub fn tiny_config(dir: &std::path::Path) -> mstok::pipeline::RunConfig {
    let mut c = mstok::pipeline::RunConfig::default();
    c.model = tiny_model(Precision::F32);
    c.schedule = mstok::schedules::ScheduleConfig {
        base_resolution: 8,
        num_stages: 3,
        steps_per_stage: vec![2, 2, 2],
    };
    c.dataset.resolution = 32;
    c.dataset.train_count = 16;
    c.dataset.val_count = 4;
    c.stage1.batch_size = 8;
    c.stage1.max_steps = Some(2);
    c.stage1.eval_every = 0;
    c.stage1.checkpoint_every = 0;
    c.distill.batch_size = 4;
    c.distill.max_steps = Some(1);
    c.distill.eval_every = 0;
    c.distill.checkpoint_every = 0;
    c.eval.batch_size = 4;
    c.eval.timed_batches = 1;
    c.eval.warmup_batches = 0;
    c.out_dir = dir.to_path_buf();
    c
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}
