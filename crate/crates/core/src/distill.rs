//! Stage-2 distillation: a one-step-per-scale student learns to match the
//! frozen multi-scale teacher, with perceptual and adversarial terms.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    copy_vars, time_tensor, Discriminator, ImageBatch, LatentCode, PerceptualExtractor, Tokenizer,
    VelocityModel, VelocityTransformer,
};
use crate::error::invalid;
use crate::noise::NoiseSource;
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWParams};
use crate::pipeline::checkpoint::{Checkpoint, CheckpointKind};
use crate::pipeline::data::{BatchLoader, Dataset};
use crate::pipeline::logging::JsonlWriter;
use crate::resample::downsample_area;
use crate::sampler::{cfg_velocity, euler_step, init_stage, SamplerConfig};
use crate::schedules::{interpolant_coefficients, ScaleSchedule};
use crate::stage1::RunContext;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
    pub teacher_cfg_scale: f64,
    pub student_cfg_scale: f64,
    /// Candidate re-noising times. `None` uses the stage start times.
    pub teacher_times: Option<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub clip_norm: f64,
    pub disc_lr: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_perc: 0.5,
            lambda_adv: 0.1,
            teacher_cfg_scale: 2.0,
            student_cfg_scale: 1.0,
            teacher_times: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_epochs: 0.0,
            clip_norm: 1.0,
            disc_lr: 5e-5,
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            log_every: 50,
            checkpoint_every: 1000,
            eval_every: 500,
            eval_images: 32,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_perc", self.lambda_perc),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0) {
                return Err(invalid!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(invalid!("learning rates and clip norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if let Some(ts) = &self.teacher_times {
            if ts.is_empty() || ts.iter().any(|t| !(0.0..1.0).contains(t)) {
                return Err(invalid!("teacher times must be a non-empty subset of [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn teacher_times(&self, schedule: &ScaleSchedule) -> Vec<f64> {
        self.teacher_times
            .clone()
            .unwrap_or_else(|| schedule.stage_bounds().iter().map(|b| b.0).collect())
    }

    fn sampler(&self, base: &SamplerConfig, cfg_scale: f64) -> SamplerConfig {
        SamplerConfig {
            cfg_scale,
            record_steps: false,
            ..base.clone()
        }
    }

    pub fn student_sampler(&self, base: &SamplerConfig) -> SamplerConfig {
        self.sampler(base, self.student_cfg_scale)
    }

    pub fn teacher_sampler(&self, base: &SamplerConfig) -> SamplerConfig {
        self.sampler(base, self.teacher_cfg_scale)
    }
}

/// Scores in `(0, 1)` from a discriminator.
pub trait Critic {
    fn scores(&self, images: &Tensor) -> Result<Tensor>;
}

impl Critic for Discriminator {
    fn scores(&self, images: &Tensor) -> Result<Tensor> {
        Discriminator::scores(self, images)
    }
}

/// One Euler step per stage over the whole stage interval, starting from noise,
/// with gradients kept through every stage. Returns the output of every stage.
pub fn student_rollout<M: VelocityModel + ?Sized>(
    student: &M,
    z: &LatentCode,
    schedule: &ScaleSchedule,
    config: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    let like = z.tensor().narrow(1, 0, 1)?.detach();
    let b = z.batch_size();
    let mut outs: Vec<Tensor> = Vec::with_capacity(schedule.num_stages());
    for s in 1..=schedule.num_stages() {
        let x = init_stage(outs.last(), schedule, s, config, noise, &like)?;
        let (t0, t1) = schedule.bounds(s)?;
        let t = time_tensor(t0, b, like.dtype(), like.device())?;
        let v = cfg_velocity(student, &x, &t, z, config.cfg_scale)?;
        outs.push(euler_step(&x, t0, t1, &v)?);
    }
    Ok(outs)
}

/// `alpha_t x + sigma_t eps`, with `x` area-downsampled to the resolution of `eps` first.
pub fn renoise(x: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..1.0).contains(&t) {
        return Err(invalid!("re-noising time must be in [0, 1), got {t}"));
    }
    let (_, _, h, w) = eps.dims4()?;
    let x = if (x.dim(2)?, x.dim(3)?) != (h, w) {
        downsample_area(x, h, w)?
    } else {
        x.clone()
    };
    let (a, s) = interpolant_coefficients(t)?;
    Ok(((x * a)? + (eps * s)?)?)
}

/// Teacher decode from `x_t` at stage `s_t`: one Euler step from `t` to the end of
/// stage `s_t`, then one full-stage step for each later stage. All outputs are detached.
#[allow(clippy::too_many_arguments)]
pub fn teacher_rollout_from<M: VelocityModel + ?Sized>(
    teacher: &M,
    x_t: &Tensor,
    t: f64,
    s_t: usize,
    z: &LatentCode,
    schedule: &ScaleSchedule,
    config: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<Vec<Tensor>> {
    let expected = schedule.resolution(s_t)?;
    if (x_t.dim(2)?, x_t.dim(3)?) != expected {
        return Err(invalid!("x_t must be at stage {s_t} resolution {:?}", expected));
    }
    let (t0, t1) = schedule.bounds(s_t)?;
    if !(t0..t1).contains(&t) {
        return Err(invalid!("t = {t} is not in stage {s_t} interval [{t0}, {t1})"));
    }
    let z = z.detach();
    let b = x_t.dim(0)?;
    let like = x_t.detach();
    let mut outs: Vec<Tensor> = Vec::new();
    for s in s_t..=schedule.num_stages() {
        let (x, start) = if s == s_t {
            (x_t.detach(), t)
        } else {
            (init_stage(outs.last(), schedule, s, config, noise, &like)?, schedule.bounds(s)?.0)
        };
        let end = schedule.bounds(s)?.1;
        let tt = time_tensor(start, b, like.dtype(), like.device())?;
        let v = cfg_velocity(teacher, &x, &tt, &z, config.cfg_scale)?;
        outs.push(euler_step(&x, start, end, &v)?.detach());
    }
    Ok(outs)
}

/// Sum over stages `s_t..=S` of the per-pixel mean squared error.
/// `student` holds all `S` outputs; `teacher` holds the outputs from `s_t` on.
pub fn rec_loss(student: &[Tensor], teacher: &[Tensor], s_t: usize) -> Result<Tensor> {
    if s_t == 0 || s_t > student.len() || teacher.len() != student.len() - s_t + 1 {
        return Err(invalid!(
            "need {} teacher outputs for s_t = {s_t} and {} stages, got {}",
            student.len().saturating_sub(s_t) + 1,
            student.len(),
            teacher.len()
        ));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in student[s_t - 1..].iter().zip(teacher) {
        if a.dims() != b.dims() {
            return Err(invalid!("stage shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
        }
        let term = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

pub fn perc_loss(extractor: &PerceptualExtractor, x_hat: &Tensor, x0: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x0.dims() {
        return Err(invalid!("shape mismatch: {:?} vs {:?}", x_hat.dims(), x0.dims()));
    }
    extractor.distance(x_hat, x0)
}

/// `(-log D(x_hat), -log D(x0) - log(1 - D(x_hat)))`, batch means. The second term
/// sees `x_hat` detached so it only trains the critic.
pub fn adv_losses<C: Critic + ?Sized>(critic: &C, x_hat: &Tensor, x0: &Tensor) -> Result<(Tensor, Tensor)> {
    let fake = critic.scores(x_hat)?;
    let l_adv = fake.log()?.neg()?.mean_all()?;
    let l_disc = disc_loss(critic, x_hat, x0)?;
    Ok((l_adv, l_disc))
}

pub fn disc_loss<C: Critic + ?Sized>(critic: &C, x_hat: &Tensor, x0: &Tensor) -> Result<Tensor> {
    let real = critic.scores(x0)?;
    let fake = critic.scores(&x_hat.detach())?;
    let l = (real.log()?.neg()? - fake.neg()?.affine(1.0, 1.0)?.log()?)?;
    Ok(l.mean_all()?)
}

/// Student, frozen teacher and encoder, discriminator and their optimizers.
pub struct DistillState {
    pub tokenizer: Tokenizer,
    pub teacher: VelocityTransformer,
    pub discriminator: Discriminator,
    pub perceptual: PerceptualExtractor,
    pub student_opt: AdamW,
    pub disc_opt: AdamW,
    pub step: usize,
}

impl DistillState {
    /// Builds a state from a trained Stage-1 tokenizer; the student starts as a copy of the teacher.
    pub fn from_teacher(teacher_tok: Tokenizer, config: &DistillConfig) -> Result<Self> {
        config.validate()?;
        let mc = teacher_tok.config.clone();
        let device = teacher_tok.device().clone();
        let student = VelocityTransformer::new(&mc, &device)?;
        copy_vars(teacher_tok.decoder.vars(), student.vars())?;
        let Tokenizer { encoder, decoder: teacher, .. } = teacher_tok;
        let tokenizer = Tokenizer::from_parts(mc.clone(), encoder, student, device.clone());
        let discriminator = Discriminator::new(&mc, &device)?;
        let perceptual = PerceptualExtractor::random_pyramid(mc.feature_seed, mc.dtype(), &device)?;
        let student_opt = AdamW::new(
            &[("decoder", tokenizer.decoder.vars())],
            AdamWParams {
                lr: config.lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
                weight_decay: config.weight_decay,
            },
        )?;
        let disc_opt = AdamW::new(
            &[("discriminator", discriminator.vars())],
            AdamWParams {
                lr: config.disc_lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            tokenizer,
            teacher,
            discriminator,
            perceptual,
            student_opt,
            disc_opt,
            step: 0,
        })
    }

    pub fn checkpoint(&self, run: &RunContext) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            CheckpointKind::Student,
            self.step as u64,
            &self.tokenizer.config,
            run.run_config.clone(),
        );
        ck.insert_vars("encoder", self.tokenizer.encoder.vars())?;
        ck.insert_vars("decoder", self.tokenizer.decoder.vars())?;
        ck.insert_vars("discriminator", self.discriminator.vars())?;
        ck.insert_optimizer("optim", &self.student_opt)?;
        ck.insert_optimizer("disc_optim", &self.disc_opt)?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub rec: f64,
    pub perc: f64,
    pub adv: f64,
    pub disc: f64,
    pub total: f64,
    pub t: f64,
    pub s_t: usize,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator-side objective for one batch: returns the weighted total and the
/// unweighted components `(rec, perc, adv)`, plus the sampled `(t, s_t)`.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn student_objective<S, T, C>(
    student: &S,
    teacher: &T,
    critic: &C,
    perceptual: &PerceptualExtractor,
    z: &LatentCode,
    x0: &Tensor,
    schedule: &ScaleSchedule,
    config: &DistillConfig,
    sampler: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<(Tensor, [Tensor; 3], Tensor, (f64, usize))>
where
    S: VelocityModel + ?Sized,
    T: VelocityModel + ?Sized,
    C: Critic + ?Sized,
{
    let outs = student_rollout(student, z, schedule, &config.student_sampler(sampler), noise)?;
    let x_hat = outs.last().expect("at least one stage").clone();
    let times = config.teacher_times(schedule);
    let t = times[noise.scalar_rng().random_range(0..times.len())];
    let s_t = schedule.scale_for_timestep(t)?;
    let (h, w) = schedule.resolution(s_t)?;
    let eps = noise.batch(x0.dim(0)?, &[3, h, w], x0.dtype(), x0.device())?;
    let x_t = renoise(&x_hat.detach(), t, &eps)?;
    let targets = teacher_rollout_from(teacher, &x_t, t, s_t, z, schedule, &config.teacher_sampler(sampler), noise)?;
    let rec = rec_loss(&outs, &targets, s_t)?;
    let perc = perc_loss(perceptual, &x_hat, x0)?;
    let (adv, disc) = adv_losses(critic, &x_hat, x0)?;
    let mut total = (&rec * config.lambda_rec)?;
    if config.lambda_perc > 0.0 {
        total = (total + (&perc * config.lambda_perc)?)?;
    }
    if config.lambda_adv > 0.0 {
        total = (total + (&adv * config.lambda_adv)?)?;
    }
    Ok((total, [rec, perc, adv], disc, (t, s_t)))
}

/// One alternating update: a student step on the weighted objective, then a
/// discriminator step on its own loss.
pub fn distill_step(
    state: &mut DistillState,
    x0: &Tensor,
    schedule: &ScaleSchedule,
    config: &DistillConfig,
    sampler: &SamplerConfig,
    noise: &mut NoiseSource,
) -> Result<LossReport> {
    let z = state.tokenizer.encoder.encode(&ImageBatch::new(x0.clone())?)?.detach();
    let (total, [rec, perc, adv], l_disc, (t, s_t)) = student_objective(
        &state.tokenizer.decoder,
        &state.teacher,
        &state.discriminator,
        &state.perceptual,
        &z,
        x0,
        schedule,
        config,
        sampler,
        noise,
    )?;
    let total_v = scalar(&total)?;
    let [rec_v, perc_v, adv_v] = [scalar(&rec)?, scalar(&perc)?, scalar(&adv)?];
    if !total_v.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("rec={rec_v} perc={perc_v} adv={adv_v} t={t}"),
        });
    }
    let student_vars: Vec<_> = state.student_opt.vars().cloned().collect();
    let mut grads = total.backward()?;
    let grad_norm = clip_grad_norm(&mut grads, &student_vars, config.clip_norm)?;
    state.student_opt.step(&grads)?;
    drop(grads);

    // The critic loss was built on the detached pre-update sample; the student
    // step does not touch critic weights, so it is still the current loss.
    let disc_v = scalar(&l_disc)?;
    if !disc_v.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("discriminator loss {disc_v}"),
        });
    }
    let dgrads = l_disc.backward()?;
    state.disc_opt.step(&dgrads)?;
    state.discriminator.refresh_spectral()?;
    state.step += 1;
    Ok(LossReport {
        step: state.step,
        rec: rec_v,
        perc: perc_v,
        adv: adv_v,
        disc: disc_v,
        total: total_v,
        t,
        s_t,
        grad_norm,
        lr: state.student_opt.params().lr,
        elapsed_s: None,
        val_psnr: None,
    })
}

pub struct DistillOutcome {
    pub state: DistillState,
    pub log: Vec<LossReport>,
    pub evals: Vec<(usize, f64)>,
    pub checkpoint: Checkpoint,
}

/// Stage-2 loop over `train`, logging every loss component.
pub fn distill(
    teacher: Tokenizer,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &DistillConfig,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    run: &RunContext,
) -> Result<DistillOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    let mut state = DistillState::from_teacher(teacher, config)?;
    let dtype = state.tokenizer.config.dtype();
    let device = state.tokenizer.device().clone();
    let steps_per_epoch = train.len().div_ceil(config.batch_size).max(1);
    let total = config.max_steps.unwrap_or(config.epochs * steps_per_epoch);
    let warmup = ((config.warmup_epochs * steps_per_epoch as f64).round() as usize).clamp(1, total.max(1));
    let mut noise = NoiseSource::new(run.seed ^ 0xd157);
    let mut writer = match &run.out_dir {
        Some(dir) => Some(JsonlWriter::create(dir.join("distill_metrics.jsonl"))?),
        None => None,
    };
    let student_schedule = schedule.one_step();
    let eval_sampler = config.student_sampler(sampler);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut evals = Vec::new();
    for batch in BatchLoader::spawn(train, config.batch_size, run.seed ^ 0xd157, total, 4) {
        let x0 = batch.to_tensor(dtype, &device)?;
        let lr = cosine_lr(config.lr, state.step, warmup, total);
        state.student_opt.set_lr(lr);
        let mut report = match distill_step(&mut state, &x0, schedule, config, sampler, &mut noise) {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(dir) = &run.out_dir {
                    state.checkpoint(run)?.save(dir.join("distill_abort.ckpt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = state.step;
        if let Some(v) = val {
            if config.eval_every > 0 && (step % config.eval_every == 0 || step == total) {
                let p = crate::stage1::evaluate_psnr(
                    &state.tokenizer,
                    v,
                    config.eval_images,
                    &student_schedule,
                    &eval_sampler,
                )?;
                evals.push((step, p));
                report.val_psnr = Some(p);
            }
        }
        if step % config.log_every.max(1) == 0 || step == total || report.val_psnr.is_some() {
            report.elapsed_s = Some(start.elapsed().as_secs_f64());
            log::info!(
                "distill step {step}/{total} rec {:.5} perc {:.4} adv {:.4} disc {:.4}",
                report.rec,
                report.perc,
                report.adv,
                report.disc
            );
            if let Some(w) = writer.as_mut() {
                w.write(&report)?;
            }
            log.push(report);
        }
        if let Some(dir) = &run.out_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step != total {
                state.checkpoint(run)?.save(dir.join(format!("student_step{step}.ckpt")))?;
            }
        }
    }
    let checkpoint = state.checkpoint(run)?;
    if let Some(dir) = &run.out_dir {
        checkpoint.save(dir.join("student.ckpt"))?;
    }
    Ok(DistillOutcome {
        state,
        log,
        evals,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Conditioning;
    use crate::resample::{upsample, UpsampleMode};
    use crate::schedules::make_scale_schedule;
    use candle_core::Device;
    use std::cell::Cell;

    struct Counting {
        value: f64,
        calls: Cell<usize>,
    }

    impl VelocityModel for Counting {
        fn velocity(&self, x: &Tensor, _t: &Tensor, _c: Conditioning<'_>) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            Ok((x.zeros_like()? + self.value)?)
        }
    }

    struct Half;

    impl Critic for Half {
        fn scores(&self, x: &Tensor) -> Result<Tensor> {
            Ok((Tensor::ones(x.dim(0)?, x.dtype(), x.device())? * 0.5)?)
        }
    }

    fn z(b: usize) -> LatentCode {
        LatentCode::new(Tensor::zeros((b, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn student_makes_one_call_per_stage() {
        let s = make_scale_schedule(8, 4, &[30; 4]).unwrap();
        let m = Counting { value: 0.0, calls: Cell::new(0) };
        let cfg = SamplerConfig { cfg_scale: 1.0, ..Default::default() };
        let outs = student_rollout(&m, &z(2), &s, &cfg, &mut NoiseSource::new(0)).unwrap();
        assert_eq!(m.calls.get(), 4);
        assert_eq!(outs.len(), 4);
        assert_eq!(outs[3].dims(), &[2, 3, 64, 64]);
    }

    #[test]
    fn zero_student_with_noise_free_transitions_upsamples_noise() {
        let s = make_scale_schedule(8, 3, &[1; 3]).unwrap();
        let m = Counting { value: 0.0, calls: Cell::new(0) };
        let cfg = SamplerConfig {
            cfg_scale: 1.0,
            alpha: Some(1.0),
            beta: Some(0.0),
            ..Default::default()
        };
        let outs = student_rollout(&m, &z(1), &s, &cfg, &mut NoiseSource::new(4)).unwrap();
        let up = upsample(&outs[0], 16, 16, UpsampleMode::Bilinear).unwrap();
        assert_eq!(max_abs(&(up - &outs[1]).unwrap()), 0.0);
        let again = student_rollout(&m, &z(1), &s, &cfg, &mut NoiseSource::new(4)).unwrap();
        assert_eq!(max_abs(&(&again[2] - &outs[2]).unwrap()), 0.0);
    }

    #[test]
    fn renoise_coefficients() {
        let x = Tensor::full(0.8f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let eps = Tensor::full(-0.4f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let r = renoise(&x, 0.5, &eps).unwrap();
        assert!(max_abs(&(r - 0.2).unwrap()) < 1e-15);
        let near = renoise(&x, 1.0 - 1e-9, &eps).unwrap();
        assert!(max_abs(&(near - &x).unwrap()) < 1e-8);
        let small = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(renoise(&x, 0.25, &small).unwrap().dims(), &[1, 3, 4, 4]);
        assert!(renoise(&x, 1.0, &eps).is_err());
    }

    #[test]
    fn teacher_rollout_lengths_and_calls() {
        let s = make_scale_schedule(8, 4, &[30; 4]).unwrap();
        let m = Counting { value: 1.0, calls: Cell::new(0) };
        let cfg = SamplerConfig { cfg_scale: 1.0, ..Default::default() };
        let x = Tensor::zeros((1, 3, 64, 64), DType::F64, &Device::Cpu).unwrap();
        let outs = teacher_rollout_from(&m, &x, 0.75, 4, &z(1), &s, &cfg, &mut NoiseSource::new(0)).unwrap();
        assert_eq!((outs.len(), m.calls.get()), (1, 1));
        let x = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let outs = teacher_rollout_from(&m, &x, 0.0, 1, &z(1), &s, &cfg, &mut NoiseSource::new(0)).unwrap();
        let res: Vec<usize> = outs.iter().map(|o| o.dim(2).unwrap()).collect();
        assert_eq!(res, vec![8, 16, 32, 64]);
        assert!(teacher_rollout_from(&m, &x, 0.3, 1, &z(1), &s, &cfg, &mut NoiseSource::new(0)).is_err());
    }

    #[test]
    fn rec_loss_closed_form() {
        let dev = Device::Cpu;
        let student: Vec<Tensor> = [4, 8, 16]
            .iter()
            .map(|&r| Tensor::rand(0f64, 1.0, (2, 3, r, r), &dev).unwrap())
            .collect();
        let same = rec_loss(&student, &student, 1).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(same, 0.0);
        let c = 0.3;
        let shifted: Vec<Tensor> = student[1..].iter().map(|t| (t + c).unwrap()).collect();
        let l = rec_loss(&student, &shifted, 2).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 2.0 * c * c).abs() < 1e-12);
        assert!(rec_loss(&student, &shifted[..1], 2).is_err());
        let last = rec_loss(&student, &shifted[1..], 3).unwrap().to_scalar::<f64>().unwrap();
        assert!((last - c * c).abs() < 1e-12);
    }

    #[test]
    fn adversarial_closed_forms() {
        let x = Tensor::zeros((3, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let (adv, disc) = adv_losses(&Half, &x, &x).unwrap();
        assert!((adv.to_scalar::<f64>().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((disc.to_scalar::<f64>().unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { lambda_adv: -1.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { teacher_times: Some(vec![]), ..Default::default() }.validate().is_err());
        assert!(DistillConfig { teacher_times: Some(vec![1.0]), ..Default::default() }.validate().is_err());
        let s = make_scale_schedule(8, 3, &[1; 3]).unwrap();
        let t = DistillConfig::default().teacher_times(&s);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0], 0.0);
    }
}
