//! Subcommand implementations shared by the binary and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{ConvPyramid, ImageBatch, ModelConfig, Tokenizer};
use crate::distill::distill;
use crate::exec::Exec;
use crate::metrics::{self, measure_throughput, MetricsReport, Throughput};
use crate::noise::NoiseSource;
use crate::pipeline::checkpoint::{Checkpoint, CheckpointKind};
use crate::pipeline::config::RunConfig;
use crate::pipeline::data::{Dataset, Split};
use crate::sampler::{decode_multiscale, SamplerConfig, Trajectory};
use crate::schedules::{ScaleSchedule, ScheduleConfig};
use crate::stage1::train_stage1;
use crate::{Error, Result};

/// Rebuilds encoder and decoder from a checkpoint without modifying it.
pub fn load_tokenizer(ck: &Checkpoint, device: &Device) -> Result<Tokenizer> {
    if !ck.has_group("encoder") || !ck.has_group("decoder") {
        return Err(Error::Incompatible("checkpoint lacks encoder or decoder weights".into()));
    }
    let tok = Tokenizer::new(&ck.model, device)?;
    ck.load_vars("encoder", tok.encoder.vars())?;
    ck.load_vars("decoder", tok.decoder.vars())?;
    Ok(tok)
}

/// How a checkpoint's decoder is sampled: teachers run the full schedule with the
/// configured guidance, students one step per stage with the student guidance.
pub fn decode_plan(kind: CheckpointKind, config: &RunConfig) -> Result<(ScaleSchedule, SamplerConfig)> {
    let schedule = config.schedule.build()?;
    Ok(match kind {
        CheckpointKind::Stage1 => (schedule, config.sampler.clone()),
        CheckpointKind::Student => (schedule.one_step(), config.distill.student_sampler(&config.sampler)),
    })
}

fn load_split(config: &RunConfig, split: Split) -> Result<Dataset> {
    config.dataset.load(split, Exec::default())
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub evals: Vec<(usize, f64)>,
    pub final_loss: Option<f64>,
}

pub fn run_train(config: &RunConfig, device: &Device) -> Result<TrainSummary> {
    config.validate()?;
    config.write_resolved()?;
    let train = load_split(config, Split::Train)?;
    let val = load_split(config, Split::Val).ok().filter(|d| !d.is_empty());
    let tok = Tokenizer::new(&config.model, device)?;
    let schedule = config.schedule.build()?;
    let out = train_stage1(
        &tok,
        &train,
        val.as_ref(),
        &config.stage1,
        &schedule,
        &config.sampler,
        &config.run_context()?,
    )?;
    Ok(TrainSummary {
        checkpoint: config.out_dir.join("stage1.ckpt"),
        steps: out.steps,
        evals: out.evals,
        final_loss: out.log.last().map(|r| r.loss),
    })
}

fn check_model(ck: &Checkpoint, config: &RunConfig) {
    if ck.model != config.model {
        log::warn!("using the checkpoint's model configuration; it differs from the run config");
    }
}

pub fn run_distill(config: &RunConfig, teacher: &Path, device: &Device) -> Result<TrainSummary> {
    config.validate()?;
    let ck = Checkpoint::load(teacher, device)?;
    if ck.kind != CheckpointKind::Stage1 {
        return Err(Error::Incompatible(format!("{} is not a Stage-1 checkpoint", teacher.display())));
    }
    check_model(&ck, config);
    config.write_resolved()?;
    let tok = load_tokenizer(&ck, device)?;
    let train = load_split(config, Split::Train)?;
    let val = load_split(config, Split::Val).ok().filter(|d| !d.is_empty());
    let schedule = config.schedule.build()?;
    let out = distill(
        tok,
        &train,
        val.as_ref(),
        &config.distill,
        &schedule,
        &config.sampler,
        &config.run_context()?,
    )?;
    Ok(TrainSummary {
        checkpoint: config.out_dir.join("student.ckpt"),
        steps: out.state.step,
        evals: out.evals,
        final_loss: out.log.last().map(|r| r.total),
    })
}

/// Encodes and decodes `images` in chunks, returning the clamped reconstructions
/// and the per-image forward-pass count of one decode.
pub fn reconstruct_images(
    tok: &Tokenizer,
    images: &Tensor,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    batch: usize,
) -> Result<(Tensor, Vec<Trajectory>)> {
    let n = images.dim(0)?;
    let mut noise = NoiseSource::new(sampler.seed);
    let mut outs = Vec::new();
    let mut trajs = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let x = images.narrow(0, start, len)?;
        let z = tok.encode(&ImageBatch::new(x)?)?.detach();
        let tr = decode_multiscale(&tok.decoder, &z, schedule, sampler, &mut noise)?;
        outs.push(tr.reconstruction()?);
        trajs.push(tr);
        start += len;
    }
    Ok((Tensor::cat(&outs, 0)?, trajs))
}

/// Two-row grid: originals on top, reconstructions below.
pub fn write_grid(path: &Path, top: &Tensor, bottom: &Tensor) -> Result<()> {
    let (b, _, h, w) = top.dims4()?;
    let (a, shape) = metrics::tensor_images(top)?;
    let (r, _) = metrics::tensor_images(bottom)?;
    let plane = h * w;
    let mut img = image::RgbImage::new((b * w) as u32, (2 * h) as u32);
    for (row, set) in [&a, &r].into_iter().enumerate() {
        for (i, im) in set.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2].map(|c| ((im[c * plane + y * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
                    img.put_pixel((i * w + x) as u32, (row * h + y) as u32, image::Rgb(px));
                }
            }
        }
    }
    debug_assert_eq!(shape.0, 3);
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructSidecar {
    pub checkpoint: PathBuf,
    pub kind: CheckpointKind,
    pub images: usize,
    pub forward_passes_per_image: usize,
    pub stage_seconds: Vec<f64>,
    pub resolutions: Vec<(usize, usize)>,
    pub psnr: Vec<f64>,
}

pub fn run_reconstruct(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    count: usize,
    device: &Device,
) -> Result<ReconstructSidecar> {
    let ck = Checkpoint::load(checkpoint, device)?;
    check_model(&ck, config);
    let tok = load_tokenizer(&ck, device)?;
    let (schedule, sampler) = decode_plan(ck.kind, config)?;
    let val = load_split(config, Split::Val)?;
    let x = val.head_tensor(count.max(1), ck.model.dtype(), device)?;
    let (rec, trajs) = reconstruct_images(&tok, &x, &schedule, &sampler, config.eval.batch_size)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_grid(out, &x, &rec)?;
    let mut stage_seconds = vec![0.0; schedule.num_stages()];
    for t in &trajs {
        for (acc, s) in stage_seconds.iter_mut().zip(&t.stage_seconds) {
            *acc += s;
        }
    }
    let sidecar = ReconstructSidecar {
        checkpoint: checkpoint.to_path_buf(),
        kind: ck.kind,
        images: x.dim(0)?,
        forward_passes_per_image: trajs[0].forward_passes,
        stage_seconds,
        resolutions: schedule.resolutions().to_vec(),
        psnr: metrics::psnr_batch(&x, &rec, metrics::IMAGE_RANGE, Exec::default())?,
    };
    let json_path = out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(sidecar)
}

fn rfid_extractor(model: &ModelConfig, device: &Device) -> Result<ConvPyramid> {
    ConvPyramid::new(model.feature_seed ^ 0xf1d, &[16, 32, 64], model.dtype(), device)
}

/// Throughput of encode + decode over batches of the given images.
pub fn decode_throughput(
    tok: &Tokenizer,
    images: &Tensor,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    eval: &crate::pipeline::config::EvalConfig,
) -> Result<Throughput> {
    let n = images.dim(0)?;
    let bs = eval.batch_size.max(1).min(n);
    let batches: Vec<Tensor> = (0..n / bs).map(|i| images.narrow(0, i * bs, bs)).collect::<candle_core::Result<_>>()?;
    let mut noise = NoiseSource::new(sampler.seed);
    measure_throughput(
        |x: &Tensor| {
            let z = tok.encode(&ImageBatch::new(x.clone())?)?.detach();
            let tr = decode_multiscale(&tok.decoder, &z, schedule, sampler, &mut noise)?;
            Ok(tr.forward_passes)
        },
        &batches,
        |x| x.dim(0).unwrap_or(0),
        eval.warmup_batches,
        eval.timed_batches.max(1),
    )
}

/// Scores a checkpoint on the validation split. With `identity`, the reference set
/// is scored against itself as a harness sanity check.
pub fn run_eval(config: &RunConfig, checkpoint: Option<&Path>, identity: bool, device: &Device) -> Result<MetricsReport> {
    let val = load_split(config, Split::Val)?;
    let n = if config.eval.images == 0 { val.len() } else { config.eval.images.min(val.len()) };
    if identity {
        let x = val.head_tensor(n, config.model.dtype(), device)?;
        let ext = rfid_extractor(&config.model, device)?;
        let q = metrics::score_reconstructions(&x, &x, &ext, Exec::default())?;
        return Ok(q.report(None, config.model.fingerprint()));
    }
    let path = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint or --identity".into()))?;
    let ck = Checkpoint::load(path, device)?;
    check_model(&ck, config);
    let tok = load_tokenizer(&ck, device)?;
    let (schedule, sampler) = decode_plan(ck.kind, config)?;
    let x = val.head_tensor(n, ck.model.dtype(), device)?;
    let (rec, _) = reconstruct_images(&tok, &x, &schedule, &sampler, config.eval.batch_size)?;
    let ext = rfid_extractor(&ck.model, device)?;
    let q = metrics::score_reconstructions(&x, &rec, &ext, Exec::default())?;
    let tp = decode_throughput(&tok, &x, &schedule, &sampler, &config.eval)?;
    Ok(q.report(Some(&tp), ck.model.fingerprint()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub teacher_forward_passes: usize,
    pub student_forward_passes: usize,
    pub forward_pass_ratio: f64,
    pub teacher_images_per_second: f64,
    pub student_images_per_second: f64,
    pub speedup: f64,
    pub teacher_steps: Vec<usize>,
    pub teacher_cfg_scale: f64,
    pub student_cfg_scale: f64,
    pub hardware: String,
}

/// Throughput of the teacher (full schedule) and student (one step per stage).
/// Without a student checkpoint the teacher weights are timed in one-step mode,
/// which has the same cost.
pub fn run_bench(config: &RunConfig, teacher: &Path, student: Option<&Path>, device: &Device) -> Result<BenchReport> {
    let tck = Checkpoint::load(teacher, device)?;
    let teacher_tok = load_tokenizer(&tck, device)?;
    let student_tok = match student {
        Some(p) => {
            let sck = Checkpoint::load(p, device)?;
            sck.ensure_compatible(&tck.model)?;
            Some(load_tokenizer(&sck, device)?)
        }
        None => None,
    };
    let schedule = config.schedule.build()?;
    let (t_sched, t_sampler) = (schedule.clone(), config.sampler.clone());
    let (s_sched, s_sampler) = (schedule.one_step(), config.distill.student_sampler(&config.sampler));
    let n = config.eval.batch_size.max(1) * (config.eval.timed_batches.max(1) + config.eval.warmup_batches).max(1);
    let images = crate::pipeline::data::synthetic_dataset(n, schedule.final_resolution().0, config.dataset.seed ^ 0xbe4c, Exec::default())?
        .head_tensor(n, tck.model.dtype(), device)?;
    let t = decode_throughput(&teacher_tok, &images, &t_sched, &t_sampler, &config.eval)?;
    let s = decode_throughput(student_tok.as_ref().unwrap_or(&teacher_tok), &images, &s_sched, &s_sampler, &config.eval)?;
    // Trajectory counts are per image, summed here over the timed batches.
    let tf = t.forward_passes / t.batches.max(1);
    let sf = s.forward_passes / s.batches.max(1);
    Ok(BenchReport {
        teacher_forward_passes: tf,
        student_forward_passes: sf,
        forward_pass_ratio: tf as f64 / sf.max(1) as f64,
        teacher_images_per_second: t.images_per_second,
        student_images_per_second: s.images_per_second,
        speedup: s.images_per_second / t.images_per_second,
        teacher_steps: schedule.steps_per_stage().to_vec(),
        teacher_cfg_scale: t_sampler.cfg_scale,
        student_cfg_scale: s_sampler.cfg_scale,
        hardware: metrics::hardware_fingerprint(),
    })
}

/// One sweep axis: `scales`, `cfg` or `lambda_perc`, with its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis {s:?} is not name=v1,v2,...")))?;
        let name = name.trim().to_string();
        if !matches!(name.as_str(), "scales" | "cfg" | "lambda_perc") {
            return Err(Error::Config(format!("unknown sweep axis {name:?}; expected scales, cfg or lambda_perc")));
        }
        let values = vals
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("axis {name}: {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config(format!("axis {name} has no values")));
        }
        Ok(Self { name, values })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub scales: usize,
    pub cfg: f64,
    pub lambda_perc: f64,
    pub teacher_steps: usize,
    pub rfid: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub throughput: f64,
    pub forward_passes: usize,
}

/// Schedule with `scales` stages ending at `resolution` and the total step budget
/// split as evenly as possible, later stages taking the remainder.
pub fn schedule_for_scales(resolution: usize, scales: usize, total_steps: usize) -> Result<ScheduleConfig> {
    if scales == 0 || total_steps < scales {
        return Err(Error::Config(format!("cannot split {total_steps} steps over {scales} stages")));
    }
    let base = resolution >> (scales - 1);
    let mut steps = vec![total_steps / scales; scales];
    for s in steps.iter_mut().rev().take(total_steps % scales) {
        *s += 1;
    }
    Ok(ScheduleConfig {
        base_resolution: base,
        num_stages: scales,
        steps_per_stage: steps,
    })
}

/// Grid over scale count x student cfg x perceptual weight. Each scale count
/// trains one teacher; each cell distills and scores a student. Missing axes use
/// the run configuration's values.
pub fn run_sweep(config: &RunConfig, axes: &[SweepAxis], device: &Device) -> Result<Vec<SweepRow>> {
    let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for a in axes {
        if by_name.insert(a.name.as_str(), a.values.clone()).is_some() {
            return Err(Error::Config(format!("axis {} given twice", a.name)));
        }
    }
    let scales: Vec<usize> = by_name
        .get("scales")
        .map(|v| v.iter().map(|s| *s as usize).collect())
        .unwrap_or_else(|| vec![config.schedule.num_stages]);
    let cfgs = by_name.get("cfg").cloned().unwrap_or_else(|| vec![config.distill.student_cfg_scale]);
    let lambdas = by_name.get("lambda_perc").cloned().unwrap_or_else(|| vec![config.distill.lambda_perc]);
    let total_steps: usize = config.schedule.steps_per_stage.iter().sum();
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let csv_path = config.out_dir.join("sweep.csv");
    let mut csv = csv::Writer::from_path(&csv_path)?;
    let mut rows = Vec::new();
    for &s in &scales {
        let mut cell = config.clone();
        cell.schedule = schedule_for_scales(config.model.image_size, s, total_steps)?;
        cell.out_dir = config.out_dir.join(format!("scales{s}"));
        log::info!("sweep: training teacher with {s} scales");
        let teacher = run_train(&cell, device)?;
        for &cfg in &cfgs {
            for &lp in &lambdas {
                let mut c = cell.clone();
                c.distill.student_cfg_scale = cfg;
                c.distill.lambda_perc = lp;
                c.out_dir = cell.out_dir.join(format!("cfg{cfg}_lp{lp}"));
                let student = run_distill(&c, &teacher.checkpoint, device)?;
                let report = run_eval(&c, Some(&student.checkpoint), false, device)?;
                let row = SweepRow {
                    scales: s,
                    cfg,
                    lambda_perc: lp,
                    teacher_steps: total_steps,
                    rfid: report.rfid,
                    psnr: report.psnr_mean,
                    ssim: report.ssim_mean,
                    throughput: report.throughput,
                    forward_passes: report.forward_pass_count,
                };
                csv.serialize(&row)?;
                csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
