//! Differentiable resampling between stage resolutions.

use candle_core::{Device, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(invalid!("expected a (B, C, H, W) tensor, got shape {:?}", dims));
    }
    Ok((dims[2], dims[3]))
}

/// Area-averaging downsample to `(h, w)`. The source size must be an integer multiple.
pub fn downsample_area(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (sh, sw) = spatial(x)?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    if h == 0 || w == 0 || sh % h != 0 || sw % w != 0 || sh / h != sw / w {
        return Err(invalid!("cannot area-downsample {sh}x{sw} to {h}x{w}"));
    }
    Ok(x.avg_pool2d(sh / h)?)
}

/// Half-pixel-centred linear interpolation weights as an `(out, in)` matrix.
pub(crate) fn bilinear_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Upsample to `(h, w)`. Bilinear is built from two interpolation matmuls so it
/// stays differentiable.
pub fn upsample(x: &Tensor, h: usize, w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (sh, sw) = spatial(x)?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    if h < sh || w < sw {
        return Err(invalid!("cannot upsample {sh}x{sw} to smaller {h}x{w}"));
    }
    match mode {
        UpsampleMode::Nearest => {
            if !h.is_multiple_of(sh) || !w.is_multiple_of(sw) {
                return Err(invalid!("nearest upsampling needs an integer factor ({sh}x{sw} -> {h}x{w})"));
            }
            Ok(x.upsample_nearest2d(h, w)?)
        }
        UpsampleMode::Bilinear => {
            let aw = bilinear_matrix(sw, w, x.dtype(), x.device())?;
            let ah = bilinear_matrix(sh, h, x.dtype(), x.device())?;
            let x = x.contiguous()?.broadcast_matmul(&aw.t()?)?;
            Ok(ah.broadcast_matmul(&x)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn area_down_by_four_equals_two_halvings() {
        let x = t((0..64).map(|v| (v as f64).sin()).collect(), &[1, 1, 8, 8]);
        let direct = downsample_area(&x, 2, 2).unwrap();
        let twice = downsample_area(&downsample_area(&x, 4, 4).unwrap(), 2, 2).unwrap();
        let d = (direct - twice).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants_and_rows_sum_to_one() {
        let m = bilinear_matrix(4, 8, DType::F64, &Device::Cpu).unwrap();
        let sums: Vec<f64> = m.sum(1).unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let x = t(vec![0.25; 16], &[1, 1, 4, 4]);
        let y = upsample(&x, 8, 8, UpsampleMode::Bilinear).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn area_down_inverts_nearest_up() {
        let x = t((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let up = upsample(&x, 8, 8, UpsampleMode::Nearest).unwrap();
        let back = downsample_area(&up, 4, 4).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn rejects_non_integer_factor() {
        let x = t(vec![0.0; 36], &[1, 1, 6, 6]);
        assert!(downsample_area(&x, 4, 4).is_err());
    }
}
