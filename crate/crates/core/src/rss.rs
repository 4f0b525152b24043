//! Resident-set-size sampling from the process status file.
//!
//! Sampling at a fixed interval can miss spikes shorter than the interval; the kernel's own
//! high-water mark (`VmHWM`) is read alongside for comparison.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

fn status_field_bytes(field: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with(field))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<u64>().ok())
        .map(|kb| kb * 1024)
}

/// Current resident set size, or `None` where the status file is unavailable.
pub fn current_rss_bytes() -> Option<u64> {
    status_field_bytes("VmRSS:")
}

/// Kernel-tracked peak resident set size since process start.
pub fn kernel_peak_rss_bytes() -> Option<u64> {
    status_field_bytes("VmHWM:")
}

/// Background thread that records the largest RSS observed until stopped.
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl RssSampler {
    pub fn start(interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(current_rss_bytes().unwrap_or(0)));
        let handle = {
            let (stop, peak) = (Arc::clone(&stop), Arc::clone(&peak));
            std::thread::Builder::new()
                .name("rss-sampler".into())
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        if let Some(rss) = current_rss_bytes() {
                            peak.fetch_max(rss, Ordering::Relaxed);
                        }
                        std::thread::park_timeout(interval);
                    }
                })
                .expect("spawn rss sampler")
        };
        RssSampler {
            stop,
            peak,
            handle: Some(handle),
        }
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.load(Ordering::Relaxed)
    }

    /// Stops the sampler after one final sample and returns the observed peak.
    pub fn finish(mut self) -> u64 {
        self.shutdown();
        if let Some(rss) = current_rss_bytes() {
            self.peak.fetch_max(rss, Ordering::Relaxed);
        }
        self.peak_bytes()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

impl Drop for RssSampler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_status_on_linux() {
        if cfg!(target_os = "linux") {
            let rss = current_rss_bytes().unwrap();
            assert!(rss > 0);
            assert!(kernel_peak_rss_bytes().unwrap() >= rss / 2);
        }
    }

    #[test]
    fn sampler_sees_a_large_allocation() {
        if !cfg!(target_os = "linux") {
            return;
        }
        let sampler = RssSampler::start(Duration::from_millis(5));
        let before = sampler.peak_bytes();
        let block = vec![1u8; 64 << 20];
        std::thread::sleep(Duration::from_millis(60));
        let peak = sampler.finish();
        assert!(block.iter().step_by(4096).all(|&b| b == 1));
        assert!(peak >= before + (48 << 20), "before {before} peak {peak}");
    }
}
