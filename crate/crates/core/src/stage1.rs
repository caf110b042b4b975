//! Stage-1 training: encoder and multi-scale decoder trained jointly on the
//! per-stage velocity-regression objective.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, LatentCode, Tokenizer, VelocityModel};
use crate::error::invalid;
use crate::noise::NoiseSource;
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWParams};
use crate::pipeline::checkpoint::{Checkpoint, CheckpointKind};
use crate::pipeline::data::{BatchLoader, Dataset};
use crate::pipeline::logging::JsonlWriter;
use crate::resample::{downsample_area, upsample, UpsampleMode};
use crate::sampler::SamplerConfig;
use crate::schedules::ScaleSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageSampling {
    #[default]
    Uniform,
    /// Stage probability proportional to its pixel count.
    PixelProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Overrides the epoch-derived step budget when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub clip_norm: f64,
    pub cond_drop_prob: f64,
    pub stage_sampling: StageSampling,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            max_steps: None,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_epochs: 5.0,
            clip_norm: 1.0,
            cond_drop_prob: 0.1,
            stage_sampling: StageSampling::Uniform,
            log_every: 50,
            checkpoint_every: 1000,
            eval_every: 500,
            eval_images: 32,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid!("clip norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(invalid!("condition-drop probability must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(dataset_len))
    }

    pub fn warmup_steps(&self, dataset_len: usize) -> usize {
        let w = (self.warmup_epochs * self.steps_per_epoch(dataset_len) as f64).round() as usize;
        w.clamp(1, self.total_steps(dataset_len).max(1))
    }
}

/// Start and end states of stage `s` for clean images `x` (full resolution) and
/// shared noise `eps` at the stage resolution.
///
/// `x_t1 = t1 * Down(x, H_s) + (1 - t1) * eps` and
/// `x_t0 = t0 * Up(Down(x, H_{s-1}), H_s) + (1 - t0) * eps`; stage 1 starts from `eps`.
pub fn stage_endpoints(
    x: &Tensor,
    s: usize,
    eps: &Tensor,
    schedule: &ScaleSchedule,
    mode: UpsampleMode,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = schedule.resolution(s)?;
    let (t0, t1) = schedule.bounds(s)?;
    let (fh, fw) = schedule.final_resolution();
    let d = x.dims();
    if d.len() != 4 || (d[2], d[3]) != (fh, fw) {
        return Err(invalid!("clean images must be {fh}x{fw}, got {:?}", d));
    }
    if eps.dims() != [d[0], d[1], h, w] {
        return Err(invalid!("noise must be {:?}, got {:?}", [d[0], d[1], h, w], eps.dims()));
    }
    let target = downsample_area(x, h, w)?;
    let x_t1 = ((target * t1)? + (eps * (1.0 - t1))?)?;
    let x_t0 = if s == 1 {
        (eps * (1.0 - t0))?
    } else {
        let (ph, pw) = schedule.resolution(s - 1)?;
        let coarse = upsample(&downsample_area(x, ph, pw)?, h, w, mode)?;
        ((coarse * t0)? + (eps * (1.0 - t0))?)?
    };
    Ok((x_t0, x_t1))
}

/// `x_t0 + ((tau - t0) / (t1 - t0)) (x_t1 - x_t0)` for a single time.
pub fn interpolate_state(x_t0: &Tensor, x_t1: &Tensor, bounds: (f64, f64), tau: f64) -> Result<Tensor> {
    let (t0, t1) = bounds;
    if !(t0..=t1).contains(&tau) {
        return Err(invalid!("tau {tau} outside stage interval [{t0}, {t1}]"));
    }
    let frac = (tau - t0) / (t1 - t0);
    Ok((x_t0 + ((x_t1 - x_t0)? * frac)?)?)
}

/// Training examples of one stage, gathered from the batch elements that drew it.
#[derive(Debug, Clone)]
pub struct StageBatch {
    pub stage: usize,
    /// Batch rows of the examples.
    pub ids: Vec<u32>,
    pub x_t0: Tensor,
    pub x_t1: Tensor,
    pub taus: Vec<f64>,
    /// 1 where the latent condition is kept, 0 where it is replaced by the null embedding.
    pub keep: Vec<f64>,
    pub bounds: (f64, f64),
}

impl StageBatch {
    pub fn v_target(&self) -> Result<Tensor> {
        Ok((&self.x_t1 - &self.x_t0)?)
    }

    pub fn tau_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.taus.as_slice(), self.x_t0.device())?.to_dtype(self.x_t0.dtype())?)
    }

    pub fn keep_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.keep.as_slice(), self.x_t0.device())?.to_dtype(self.x_t0.dtype())?)
    }

    /// Per-row interpolated states.
    pub fn x_tau(&self) -> Result<Tensor> {
        let (t0, t1) = self.bounds;
        let fracs: Vec<f64> = self.taus.iter().map(|t| (t - t0) / (t1 - t0)).collect();
        let f = Tensor::new(fracs.as_slice(), self.x_t0.device())?
            .to_dtype(self.x_t0.dtype())?
            .reshape((self.ids.len(), 1, 1, 1))?;
        Ok((&self.x_t0 + (&self.x_t1 - &self.x_t0)?.broadcast_mul(&f)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub cond_drop_prob: f64,
    pub stage_sampling: StageSampling,
    pub upsample: UpsampleMode,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            cond_drop_prob: 0.1,
            stage_sampling: StageSampling::Uniform,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// Draws a stage, an in-stage time and a condition-drop decision per batch element,
/// then builds the stage endpoints with noise shared between the two endpoints.
pub fn sample_stage_batches(
    x: &Tensor,
    schedule: &ScaleSchedule,
    opts: &LossOptions,
    noise: &mut NoiseSource,
) -> Result<Vec<StageBatch>> {
    let b = x.dim(0)?;
    let n_stages = schedule.num_stages();
    let weights: Vec<f64> = match opts.stage_sampling {
        StageSampling::Uniform => vec![1.0; n_stages],
        StageSampling::PixelProportional => schedule
            .resolutions()
            .iter()
            .map(|(h, w)| (h * w) as f64)
            .collect(),
    };
    let total: f64 = weights.iter().sum();
    let mut rng = noise.scalar_rng();
    let mut per_stage: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = vec![Default::default(); n_stages];
    for i in 0..b {
        let mut u = rng.random::<f64>() * total;
        let mut s = n_stages - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                s = k;
                break;
            }
            u -= w;
        }
        let (t0, t1) = schedule.stage_bounds()[s];
        let tau = t0 + (t1 - t0) * rng.random::<f64>();
        let keep = if rng.random::<f64>() < opts.cond_drop_prob { 0.0 } else { 1.0 };
        per_stage[s].0.push(i as u32);
        per_stage[s].1.push(tau);
        per_stage[s].2.push(keep);
    }
    let mut out = Vec::new();
    for (k, (ids, taus, keep)) in per_stage.into_iter().enumerate() {
        let s = k + 1;
        // Advance the noise counter for every stage so draws are independent of
        // which stages happen to be populated.
        let (h, w) = schedule.resolution(s)?;
        let idx64: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
        let eps = noise.batch_with_ids(&idx64, &[x.dim(1)?, h, w], x.dtype(), x.device())?;
        if ids.is_empty() {
            continue;
        }
        let idx = Tensor::new(ids.as_slice(), x.device())?;
        let xs = x.index_select(&idx, 0)?;
        let (x_t0, x_t1) = stage_endpoints(&xs, s, &eps, schedule, opts.upsample)?;
        out.push(StageBatch {
            stage: s,
            ids,
            x_t0,
            x_t1,
            taus,
            keep,
            bounds: schedule.bounds(s)?,
        });
    }
    Ok(out)
}

/// Mean over batch elements of the per-pixel squared error between the model's
/// velocity and the stage target. `batch_size` is the number of elements across
/// all stage batches.
pub fn stage1_loss<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentCode,
    batches: &[StageBatch],
    batch_size: usize,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for sb in batches {
        let zs = z.select(&sb.ids)?;
        let keep = sb.keep_tensor()?;
        let pred = model.velocity(
            &sb.x_tau()?,
            &sb.tau_tensor()?,
            Conditioning::Masked {
                latent: &zs,
                keep: &keep,
            },
        )?;
        let err = (pred - sb.v_target()?)?
            .sqr()?
            .flatten_from(1)?
            .mean(1)?
            .sum_all()?;
        total = Some(match total {
            None => err,
            Some(t) => (t + err)?,
        });
    }
    let total = total.ok_or_else(|| invalid!("empty training batch"))?;
    Ok((total / batch_size as f64)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

/// Where a training run writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub out_dir: Option<PathBuf>,
    /// Resolved run configuration embedded in checkpoints.
    pub run_config: serde_json::Value,
    pub seed: u64,
}

pub struct Stage1Outcome {
    pub steps: usize,
    pub log: Vec<LogRecord>,
    /// `(step, mean PSNR)` of multi-scale reconstructions of the validation images.
    pub evals: Vec<(usize, f64)>,
    pub checkpoint: Checkpoint,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn stage1_checkpoint(
    tok: &Tokenizer,
    opt: &AdamW,
    step: usize,
    run: &RunContext,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Stage1, step as u64, &tok.config, run.run_config.clone());
    ck.insert_vars("encoder", tok.encoder.vars())?;
    ck.insert_vars("decoder", tok.decoder.vars())?;
    ck.insert_optimizer("optim", opt)?;
    Ok(ck)
}

/// Runs the Stage-1 optimizer loop: warm-up + cosine AdamW over encoder and
/// decoder, gradient clipping, periodic logging, validation PSNR and checkpoints.
pub fn train_stage1(
    tok: &Tokenizer,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &Stage1Config,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    run: &RunContext,
) -> Result<Stage1Outcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if schedule.final_resolution() != (train.resolution(), train.resolution()) {
        return Err(invalid!(
            "schedule ends at {:?} but images are {}x{}",
            schedule.final_resolution(),
            train.resolution(),
            train.resolution()
        ));
    }
    let device = tok.device().clone();
    let dtype = tok.config.dtype();
    let total = config.total_steps(train.len());
    let warmup = config.warmup_steps(train.len());
    let mut opt = AdamW::new(
        &[("encoder", tok.encoder.vars()), ("decoder", tok.decoder.vars())],
        AdamWParams {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: 1e-8,
            weight_decay: config.weight_decay,
        },
    )?;
    let vars: Vec<_> = opt.vars().cloned().collect();
    let opts = LossOptions {
        cond_drop_prob: config.cond_drop_prob,
        stage_sampling: config.stage_sampling,
        upsample: sampler.upsample,
    };
    let mut noise = NoiseSource::new(run.seed ^ 0x57a9e1);
    let mut log_writer = match &run.out_dir {
        Some(dir) => Some(JsonlWriter::create(dir.join("metrics.jsonl"))?),
        None => None,
    };
    let loader = BatchLoader::spawn(train, config.batch_size, run.seed, total, 4);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut step = 0;
    for batch in loader {
        let x = batch.to_tensor(dtype, &device)?;
        let lr = cosine_lr(config.lr, step, warmup, total);
        opt.set_lr(lr);
        let z = tok.encoder.encode(&crate::backbone::ImageBatch::new(x.clone())?)?;
        let groups = sample_stage_batches(&x, schedule, &opts, &mut noise)?;
        let loss = stage1_loss(&tok.decoder, &z, &groups, x.dim(0)?)?;
        let loss_value = scalar(&loss)?;
        if !loss_value.is_finite() {
            let detail = format!("loss={loss_value} lr={lr}");
            if let Some(dir) = &run.out_dir {
                let dump = serde_json::json!({
                    "step": step, "loss": loss_value.to_string(), "lr": lr,
                    "batch_indices": batch.indices,
                });
                let path = dir.join(format!("diagnostic_step{step}.json"));
                std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
                stage1_checkpoint(tok, &opt, step, run)?.save(dir.join("abort.ckpt"))?;
            }
            return Err(Error::NonFiniteLoss { step, detail });
        }
        let mut grads = loss.backward()?;
        let gnorm = clip_grad_norm(&mut grads, &vars, config.clip_norm)?;
        opt.step(&grads)?;
        step += 1;
        running += loss_value;
        running_n += 1;

        let do_eval = val.is_some() && config.eval_every > 0 && (step % config.eval_every == 0 || step == total);
        let val_psnr = if do_eval {
            let v = evaluate_psnr(tok, val.expect("checked"), config.eval_images, schedule, sampler)?;
            evals.push((step, v));
            Some(v)
        } else {
            None
        };
        if step % config.log_every.max(1) == 0 || step == total || val_psnr.is_some() {
            let rec = LogRecord {
                step,
                loss: running / running_n as f64,
                lr,
                grad_norm: gnorm,
                elapsed_s: start.elapsed().as_secs_f64(),
                val_psnr,
            };
            log::info!("stage1 step {step}/{total} loss {:.5} lr {:.2e}", rec.loss, lr);
            if let Some(w) = log_writer.as_mut() {
                w.write(&rec)?;
            }
            log.push(rec);
            running = 0.0;
            running_n = 0;
        }
        if let Some(dir) = &run.out_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != total {
                stage1_checkpoint(tok, &opt, step, run)?.save(dir.join(format!("stage1_step{step}.ckpt")))?;
            }
        }
    }
    let checkpoint = stage1_checkpoint(tok, &opt, step, run)?;
    if let Some(dir) = &run.out_dir {
        checkpoint.save(dir.join("stage1.ckpt"))?;
    }
    Ok(Stage1Outcome {
        steps: step,
        log,
        evals,
        checkpoint,
    })
}

/// Mean PSNR of multi-scale reconstructions of the first `limit` images of `data`,
/// with a fixed sampler seed.
pub fn evaluate_psnr(
    tok: &Tokenizer,
    data: &Dataset,
    limit: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
) -> Result<f64> {
    let n = limit.min(data.len()).max(1);
    let indices: Vec<usize> = (0..n).collect();
    let mut noise = NoiseSource::new(sampler.seed);
    let mut total = 0.0;
    for chunk in indices.chunks(16) {
        let x = data.batch_tensor(chunk, tok.config.dtype(), tok.device())?;
        let z = tok.encoder.encode(&crate::backbone::ImageBatch::new(x.clone())?)?.detach();
        let tr = crate::sampler::decode_multiscale(&tok.decoder, &z, schedule, sampler, &mut noise)?;
        let rec = tr.reconstruction()?;
        let p = crate::metrics::psnr_batch(&rec, &x, 2.0, crate::exec::Exec::default())?;
        total += p.iter().sum::<f64>();
    }
    Ok(total / n as f64)
}
