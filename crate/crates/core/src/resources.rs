//! Wall-time and peak-memory metering for pipeline phases.
//!
//! Peak main memory is sampled by a background poller at 50 ms from
//! /proc/self/status, so the figure is approximate. Accelerator memory is
//! reported when available; this build is CPU-only and always reports None.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResourceReport {
    pub phase: String,
    pub wall_time_s: f64,
    pub peak_main_memory_bytes: u64,
    pub peak_accel_memory_bytes: Option<u64>,
}

/// Read a kB-valued key ("VmRSS", "VmHWM") from a /proc status file.
pub fn read_proc_status_kb(path: &str, key: &str) -> Option<u64> {
    let content = std::fs::read_to_string(path).ok()?;
    for line in content.lines() {
        if let Some(rest) = line.strip_prefix(key) {
            let rest = rest.trim_start_matches(':').trim();
            let kb: u64 = rest.split_whitespace().next()?.parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

pub fn current_rss_bytes() -> Option<u64> {
    read_proc_status_kb("/proc/self/status", "VmRSS")
}

/// Run `f`, polling resident memory every 50 ms; returns the result and a
/// report with wall time and observed peak RSS.
pub fn measure_phase<T>(phase: &str, f: impl FnOnce() -> T) -> (T, ResourceReport) {
    let stop = Arc::new(AtomicBool::new(false));
    let peak = Arc::new(AtomicU64::new(current_rss_bytes().unwrap_or(0)));
    let poller = {
        let stop = Arc::clone(&stop);
        let peak = Arc::clone(&peak);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if let Some(rss) = current_rss_bytes() {
                    peak.fetch_max(rss, Ordering::Relaxed);
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        })
    };
    let started = Instant::now();
    let result = f();
    let wall_time_s = started.elapsed().as_secs_f64();
    stop.store(true, Ordering::Relaxed);
    let _ = poller.join();
    if let Some(rss) = current_rss_bytes() {
        peak.fetch_max(rss, Ordering::Relaxed);
    }
    (
        result,
        ResourceReport {
            phase: phase.to_string(),
            wall_time_s,
            peak_main_memory_bytes: peak.load(Ordering::Relaxed),
            peak_accel_memory_bytes: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_phase_reports_time_and_memory() {
        let (value, report) = measure_phase("sleepy", || {
            std::thread::sleep(Duration::from_millis(120));
            41 + 1
        });
        assert_eq!(value, 42);
        assert!(report.wall_time_s >= 0.1);
        assert_eq!(report.phase, "sleepy");
        // On Linux the poller sees a nonzero RSS.
        if current_rss_bytes().is_some() {
            assert!(report.peak_main_memory_bytes > 0);
        }
        assert!(report.peak_accel_memory_bytes.is_none());
    }

    #[test]
    fn proc_parser_handles_missing_key() {
        assert_eq!(read_proc_status_kb("/definitely/not/here", "VmRSS"), None);
    }
}
