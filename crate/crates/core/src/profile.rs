//! Wall-clock accounting of decoding time per component.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Encoder,
    Decoder,
    SelfAttnOrRnn,
    CrossAttn,
    Softmax,
    BeamTopk,
}

const BUCKETS: usize = 6;

impl Bucket {
    pub const ALL: [Bucket; BUCKETS] =
        [Bucket::Encoder, Bucket::Decoder, Bucket::SelfAttnOrRnn, Bucket::CrossAttn, Bucket::Softmax, Bucket::BeamTopk];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Encoder => "encoder",
            Bucket::Decoder => "decoder",
            Bucket::SelfAttnOrRnn => "self_attn_or_rnn",
            Bucket::CrossAttn => "cross_attn",
            Bucket::Softmax => "softmax",
            Bucket::BeamTopk => "beam_topk",
        }
    }
}

/// Accumulates monotonic-clock durations per [`Bucket`]. A disabled profiler
/// never reads the clock.
#[derive(Debug, Clone, Default)]
pub struct Profiler {
    enabled: bool,
    totals: [Duration; BUCKETS],
    spans: [u64; BUCKETS],
}

impl Profiler {
    pub fn enabled() -> Self {
        Profiler { enabled: true, ..Default::default() }
    }

    pub fn disabled() -> Self {
        Profiler::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    #[inline]
    pub fn start(&self) -> Option<Instant> {
        self.enabled.then(Instant::now)
    }

    #[inline]
    pub fn stop(&mut self, bucket: Bucket, started: Option<Instant>) {
        if let Some(t) = started {
            self.totals[bucket.index()] += t.elapsed();
            self.spans[bucket.index()] += 1;
        }
    }

    pub fn total(&self, bucket: Bucket) -> Duration {
        self.totals[bucket.index()]
    }

    /// Number of timed spans recorded in `bucket`.
    pub fn spans(&self, bucket: Bucket) -> u64 {
        self.spans[bucket.index()]
    }

    pub fn span_count(&self) -> u64 {
        self.spans.iter().sum()
    }

    pub fn reset(&mut self) {
        self.totals = Default::default();
        self.spans = Default::default();
    }
}

/// Mean cost of one empty start/stop pair, for reporting instrumentation
/// overhead.
pub fn calibrate_null_span(iterations: u32) -> Duration {
    let mut p = Profiler::enabled();
    let t = Instant::now();
    for _ in 0..iterations {
        let s = p.start();
        p.stop(Bucket::Decoder, s);
    }
    t.elapsed() / iterations.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_records_nothing() {
        let mut p = Profiler::disabled();
        let s = p.start();
        assert!(s.is_none());
        p.stop(Bucket::Encoder, s);
        assert_eq!(p.total(Bucket::Encoder), Duration::ZERO);
        assert_eq!(p.span_count(), 0);
    }

    #[test]
    fn enabled_accumulates() {
        let mut p = Profiler::enabled();
        for _ in 0..3 {
            let s = p.start();
            std::thread::sleep(Duration::from_millis(1));
            p.stop(Bucket::Softmax, s);
        }
        assert!(p.total(Bucket::Softmax) >= Duration::from_millis(3));
        assert_eq!(p.spans(Bucket::Softmax), 3);
        assert!(calibrate_null_span(1000) < Duration::from_millis(1));
    }
}
