//! Wall-clock throughput of a decode function.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub images_per_second: f64,
    pub seconds: f64,
    pub images: usize,
    /// Velocity-model evaluations reported by the decode function over the timed batches.
    pub forward_passes: usize,
    pub batches: usize,
}

/// Times `decode` over `timed` batches after `warmup` untimed ones, cycling
/// through `batches`. Only the decode call is timed. `decode` returns the
/// number of forward passes it issued.
pub fn measure_throughput<B>(
    mut decode: impl FnMut(&B) -> Result<usize>,
    batches: &[B],
    images_per_batch: impl Fn(&B) -> usize,
    warmup: usize,
    timed: usize,
) -> Result<Throughput> {
    if timed == 0 {
        return Err(invalid!("at least one timed batch is required"));
    }
    if batches.is_empty() {
        return Err(invalid!("no batches to decode"));
    }
    for i in 0..warmup {
        decode(&batches[i % batches.len()])?;
    }
    let mut seconds = 0.0;
    let mut images = 0;
    let mut forward_passes = 0;
    for i in 0..timed {
        let b = &batches[(warmup + i) % batches.len()];
        let t = Instant::now();
        forward_passes += decode(b)?;
        seconds += t.elapsed().as_secs_f64();
        images += images_per_batch(b);
    }
    Ok(Throughput {
        images_per_second: images as f64 / seconds.max(f64::MIN_POSITIVE),
        seconds,
        images,
        forward_passes,
        batches: timed,
    })
}

/// Coarse description of the host, recorded next to machine-relative timings.
pub fn hardware_fingerprint() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {}; {cpu}; {threads} threads; parallel={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cfg!(feature = "parallel")
    )
}
