use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Fixed delay between depth capture and the latent reaching the policy.
pub const DEPTH_LATENCY: f64 = 0.08;
/// Fixed proprioception delay.
pub const PROPRIO_LATENCY: f64 = 0.016;

/// FIFO that releases each payload exactly `latency` seconds after it was pushed.
#[derive(Clone, Debug)]
pub struct LatencyQueue<T> {
    entries: VecDeque<(T, f64)>,
    latency: f64,
    last_time: f64,
}

impl<T> LatencyQueue<T> {
    pub fn new(latency: f64) -> Self {
        assert!(latency >= 0.0 && latency.is_finite(), "latency must be a finite non-negative number");
        Self { entries: VecDeque::new(), latency, last_time: f64::NEG_INFINITY }
    }

    pub fn latency(&self) -> f64 {
        self.latency
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn advance(&mut self, now: f64) -> Result<()> {
        if !now.is_finite() || now < self.last_time {
            return Err(Error::contract(format!("time went backwards: {now} after {}", self.last_time)));
        }
        self.last_time = now;
        Ok(())
    }

    pub fn push(&mut self, payload: T, now: f64) -> Result<()> {
        self.advance(now)?;
        self.entries.push_back((payload, now + self.latency));
        Ok(())
    }

    /// Newest payload released by `now`; older released payloads are dropped.
    pub fn poll(&mut self, now: f64) -> Result<Option<T>> {
        self.advance(now)?;
        let mut newest = None;
        while self.entries.front().is_some_and(|(_, release)| *release <= now) {
            newest = self.entries.pop_front().map(|(p, _)| p);
        }
        Ok(newest)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.last_time = f64::NEG_INFINITY;
    }
}

/// Capture timestamps with uniformly jittered frame intervals.
#[derive(Clone, Debug)]
pub struct CaptureClock {
    rng: SimRng,
    min_interval: f64,
    max_interval: f64,
    next: f64,
}

impl CaptureClock {
    /// `rate_hz +/- jitter_hz`; the first capture happens at `start`.
    pub fn new(rate_hz: f64, jitter_hz: f64, seed: u64, start: f64) -> Result<Self> {
        if !(rate_hz > jitter_hz && jitter_hz >= 0.0) {
            return Err(Error::config(format!("need rate > jitter >= 0, got {rate_hz} +/- {jitter_hz}")));
        }
        Ok(Self {
            rng: rng::stream(seed, 0xca77),
            min_interval: 1.0 / (rate_hz + jitter_hz),
            max_interval: 1.0 / (rate_hz - jitter_hz),
            next: start,
        })
    }

    /// Time of the next capture, without consuming it.
    pub fn peek(&self) -> f64 {
        self.next
    }

    fn interval(&mut self) -> f64 {
        if self.max_interval > self.min_interval {
            self.rng.random_range(self.min_interval..=self.max_interval)
        } else {
            self.min_interval
        }
    }
}

impl Iterator for CaptureClock {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let t = self.next;
        self.next = t + self.interval();
        Some(t)
    }
}

pub fn jittered_capture_times(rate_hz: f64, jitter_hz: f64, seed: u64) -> Result<CaptureClock> {
    CaptureClock::new(rate_hz, jitter_hz, seed, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn released_after_latency() {
        let mut q = LatencyQueue::new(0.08);
        q.push("a", 0.0).unwrap();
        assert_eq!(q.poll(0.079).unwrap(), None);
        assert_eq!(q.poll(0.080).unwrap(), Some("a"));
        assert_eq!(q.poll(0.2).unwrap(), None);
    }

    #[test]
    fn newest_wins() {
        let mut q = LatencyQueue::new(0.08);
        q.push(1, 0.0).unwrap();
        q.push(2, 0.02).unwrap();
        assert_eq!(q.poll(0.12).unwrap(), Some(2));
        assert!(q.is_empty());
    }

    #[test]
    fn zero_latency_is_identity() {
        let mut q = LatencyQueue::new(0.0);
        q.push(7, 1.5).unwrap();
        assert_eq!(q.poll(1.5).unwrap(), Some(7));
    }

    #[test]
    fn time_regression_rejected() {
        let mut q = LatencyQueue::new(0.016);
        q.push((), 1.0).unwrap();
        assert!(matches!(q.poll(0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_intervals_without_jitter() {
        let times: Vec<f64> = jittered_capture_times(10.0, 0.0, 1).unwrap().take(5).collect();
        for w in times.windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn jittered_intervals_in_range_and_reproducible() {
        let a: Vec<f64> = jittered_capture_times(10.0, 2.0, 9).unwrap().take(1000).collect();
        let b: Vec<f64> = jittered_capture_times(10.0, 2.0, 9).unwrap().take(1000).collect();
        assert_eq!(a, b);
        for w in a.windows(2) {
            let dt = w[1] - w[0];
            assert!((1.0 / 12.0 - 1e-12..=1.0 / 8.0 + 1e-12).contains(&dt), "{dt}");
        }
        assert!(jittered_capture_times(2.0, 2.0, 0).is_err());
    }
}
