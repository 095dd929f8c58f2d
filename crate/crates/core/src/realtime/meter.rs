use super::RealtimeError;
use crate::boost::LatencyStats;
use crate::dsp::WINDOW_LEN;
use crate::pipeline::Pipeline;

/// Power draw assumed for the embedded target.
pub const DEFAULT_DEVICE_WATTS: f64 = 10.0;

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Summary of per-decision latencies (ms) and CPU times (ms).
pub fn measure(
    latency_ms: &[f64],
    cpu_ms: &[f64],
    watts: f64,
    memory_peak_bytes: usize,
) -> Result<LatencyStats, RealtimeError> {
    if latency_ms.is_empty() {
        return Err(RealtimeError::EmptyTrace);
    }
    let n = latency_ms.len();
    let mut sorted = latency_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let cpu_mean = if cpu_ms.is_empty() { 0.0 } else { cpu_ms.iter().sum::<f64>() / cpu_ms.len() as f64 };
    Ok(LatencyStats {
        n_decisions: n,
        mean_ms: latency_ms.iter().sum::<f64>() / n as f64,
        p95_ms: sorted[rank - 1],
        max_ms: sorted[n - 1],
        energy_j_per_decision: cpu_mean * 1e-3 * watts,
        memory_peak_bytes,
    })
}

/// Resident bytes touched by one decision: model weights, the sample ring,
/// filter state and the largest per-window activation buffers.
pub fn decode_path_bytes(pipe: &Pipeline) -> usize {
    let a = &pipe.cae.arch;
    let weights: usize = pipe.cae.tensors().iter().map(|t| t.len() * 8).sum();
    let ensemble = pipe.ensemble.stumps.len() * 32;
    let ring = a.in_channels * WINDOW_LEN * 8 * 2;
    let filters = a.in_channels * 9 * 8 * 3;
    let mut cin = a.in_channels;
    let mut len = a.in_len;
    let mut scratch = 0;
    for (&f, &k) in a.filters.iter().zip(&a.kernels) {
        scratch = scratch.max((cin * k * len + 2 * f * len) * 8);
        cin = f;
        len /= a.pool;
    }
    weights + ensemble + ring + filters + scratch
}
