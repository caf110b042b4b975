//! Evaluation: PSNR, SSIM, reconstruction Fréchet distance and throughput.

mod frechet;
mod quality;
mod throughput;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use frechet::{feature_stats, frechet_distance, FeatureStats};
pub use quality::{
    mse, psnr, psnr_batch, psnr_capped, ssim, ssim_batch, ssim_images, tensor_images, SsimWindow, PSNR_CAP_DB,
};
pub use throughput::{hardware_fingerprint, measure_throughput, Throughput};

use crate::backbone::FeatureExtractor;
use crate::exec::Exec;
use crate::Result;

/// Pixel range of images in `[-1, 1]`.
pub const IMAGE_RANGE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rfid: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Images per second; zero when not measured.
    pub throughput: f64,
    pub forward_pass_count: usize,
    pub config_fingerprint: String,
    pub hardware: String,
    pub images: usize,
    /// Set when every pair was identical and PSNR is the cap value.
    pub psnr_capped: bool,
}

/// Quality half of a report: PSNR, SSIM and rFID between references and reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub rfid: f64,
}

impl QualityScores {
    pub fn psnr_mean(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }

    pub fn ssim_mean(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len().max(1) as f64
    }

    pub fn report(&self, throughput: Option<&Throughput>, config_fingerprint: String) -> MetricsReport {
        MetricsReport {
            rfid: self.rfid,
            psnr_mean: self.psnr_mean(),
            ssim_mean: self.ssim_mean(),
            throughput: throughput.map_or(0.0, |t| t.images_per_second),
            forward_pass_count: throughput.map_or(0, |t| t.forward_passes),
            config_fingerprint,
            hardware: hardware_fingerprint(),
            images: self.psnr.len(),
            psnr_capped: self.psnr.iter().all(|p| *p >= PSNR_CAP_DB),
        }
    }
}

/// Scores `(B, 3, H, W)` reconstructions against references, both in `[-1, 1]`.
pub fn score_reconstructions(
    reference: &Tensor,
    reconstruction: &Tensor,
    extractor: &dyn FeatureExtractor,
    exec: Exec,
) -> Result<QualityScores> {
    let psnr = psnr_batch(reference, reconstruction, IMAGE_RANGE, exec)?;
    let ssim = ssim_batch(reference, reconstruction, SsimWindow::default(), IMAGE_RANGE, exec)?;
    let a = feature_stats(extractor, reference, 32)?;
    let b = feature_stats(extractor, reconstruction, 32)?;
    Ok(QualityScores {
        psnr,
        ssim,
        rfid: frechet_distance(&a, &b)?,
    })
}
