//! Full-reference image quality: PSNR and SSIM on planar `(C, H, W)` buffers.

use candle_core::{DType, Tensor};

use crate::error::invalid;
use crate::exec::{map_range, Exec};
use crate::Result;

/// Value reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid!("shape mismatch: {} vs {} elements", x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(invalid!("empty image"));
    }
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

/// `10 log10(range^2 / mse)`, or `cap` when the inputs are identical.
pub fn psnr_capped(x: &[f64], y: &[f64], data_range: f64, cap: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(invalid!("data range must be positive, got {data_range}"));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(cap))
}

pub fn psnr(x: &[f64], y: &[f64], data_range: f64) -> Result<f64> {
    psnr_capped(x, y, data_range, PSNR_CAP_DB)
}

/// Gaussian SSIM window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    fn kernel(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let k: Vec<f64> = (0..self.size)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable valid-mode filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all valid window positions and channels.
///
/// `shape` is `(C, H, W)` and both buffers are planar in that order.
pub fn ssim(
    x: &[f64],
    y: &[f64],
    shape: (usize, usize, usize),
    window: SsimWindow,
    data_range: f64,
) -> Result<f64> {
    let (c, h, w) = shape;
    if x.len() != c * h * w || y.len() != x.len() {
        return Err(invalid!(
            "shape mismatch: {:?} needs {} elements, got {} and {}",
            shape,
            c * h * w,
            x.len(),
            y.len()
        ));
    }
    if window.size == 0 || h < window.size || w < window.size {
        return Err(invalid!("image {h}x{w} smaller than the {}x{} window", window.size, window.size));
    }
    if !(data_range > 0.0) {
        return Err(invalid!("data range must be positive"));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = window.kernel();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let xp = &x[ch * plane..(ch + 1) * plane];
        let yp = &y[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = xp.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = yp.iter().map(|a| a * a).collect();
        let xy: Vec<f64> = xp.iter().zip(yp).map(|(a, b)| a * b).collect();
        let mx = filter_valid(xp, h, w, &k);
        let my = filter_valid(yp, h, w, &k);
        let exx = filter_valid(&xx, h, w, &k);
        let eyy = filter_valid(&yy, h, w, &k);
        let exy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-image `f64` buffers with their shared `(C, H, W)` shape.
pub type ImageBuffers = (Vec<Vec<f64>>, (usize, usize, usize));

/// Splits a `(B, C, H, W)` tensor into per-image `f64` buffers.
pub fn tensor_images(t: &Tensor) -> Result<ImageBuffers> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let n = c * h * w;
    let imgs = (0..b).map(|i| flat[i * n..(i + 1) * n].to_vec()).collect();
    Ok((imgs, (c, h, w)))
}

#[allow(clippy::type_complexity)]
fn paired(a: &Tensor, b: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, (usize, usize, usize))> {
    if a.dims() != b.dims() {
        return Err(invalid!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (xa, shape) = tensor_images(a)?;
    let (xb, _) = tensor_images(b)?;
    Ok((xa, xb, shape))
}

/// Per-image PSNR of two `(B, C, H, W)` batches.
pub fn psnr_batch(a: &Tensor, b: &Tensor, data_range: f64, exec: Exec) -> Result<Vec<f64>> {
    let (xa, xb, _) = paired(a, b)?;
    map_range(exec, xa.len(), |i| psnr(&xa[i], &xb[i], data_range))
        .into_iter()
        .collect()
}

/// Per-image SSIM of two `(B, C, H, W)` batches.
pub fn ssim_batch(a: &Tensor, b: &Tensor, window: SsimWindow, data_range: f64, exec: Exec) -> Result<Vec<f64>> {
    let (xa, xb, shape) = paired(a, b)?;
    ssim_images(&xa, &xb, shape, window, data_range, exec)
}

pub fn ssim_images(
    xa: &[Vec<f64>],
    xb: &[Vec<f64>],
    shape: (usize, usize, usize),
    window: SsimWindow,
    data_range: f64,
    exec: Exec,
) -> Result<Vec<f64>> {
    if xa.len() != xb.len() {
        return Err(invalid!("batch sizes differ: {} vs {}", xa.len(), xb.len()));
    }
    map_range(exec, xa.len(), |i| ssim(&xa[i], &xb[i], shape, window, data_range))
        .into_iter()
        .collect()
}
