//! Force reference generators. Each returns `(f_r, f_r_dot)` analytically so
//! the controller never differentiates samples.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Reference: Send + Sync {
    fn eval(&self, t: f64) -> (f64, f64);
    /// Peak deviation from the offset, used for divergence thresholds.
    fn amplitude(&self) -> f64;
    fn offset(&self) -> f64;
}

/// Soft start: the deviation from the offset is scaled by a raised-cosine
/// envelope rising from 0 to 1 over `ramp_s` seconds.
pub struct Ramped {
    pub inner: Box<dyn Reference>,
    pub ramp_s: f64,
}

impl Reference for Ramped {
    fn eval(&self, t: f64) -> (f64, f64) {
        let (f, df) = self.inner.eval(t);
        if self.ramp_s <= 0.0 || t >= self.ramp_s {
            return (f, df);
        }
        let off = self.inner.offset();
        let t = t.max(0.0);
        let w = PI / self.ramp_s;
        let env = 0.5 * (1.0 - (w * t).cos());
        let denv = 0.5 * w * (w * t).sin();
        (off + env * (f - off), denv * (f - off) + env * df)
    }

    fn amplitude(&self) -> f64 {
        self.inner.amplitude()
    }

    fn offset(&self) -> f64 {
        self.inner.offset()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sine {
    pub offset: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    pub phase: f64,
}

impl Reference for Sine {
    fn eval(&self, t: f64) -> (f64, f64) {
        let w = 2.0 * PI * self.freq_hz;
        let arg = w * t + self.phase;
        (self.offset + self.amplitude * arg.sin(), self.amplitude * w * arg.cos())
    }

    fn amplitude(&self) -> f64 {
        self.amplitude.abs()
    }

    fn offset(&self) -> f64 {
        self.offset
    }
}

/// Sum of two sines; used to enrich collected data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTone {
    pub a: Sine,
    pub b: Sine,
}

impl Reference for TwoTone {
    fn eval(&self, t: f64) -> (f64, f64) {
        let (x, dx) = self.a.eval(t);
        let (y, dy) = self.b.eval(t);
        (x + y - self.b.offset, dx + dy)
    }

    fn amplitude(&self) -> f64 {
        self.a.amplitude() + self.b.amplitude()
    }

    fn offset(&self) -> f64 {
        self.a.offset
    }
}

/// Randomised reference family: amplitude and frequency ranges plus offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceProgram {
    /// Generator name in [`REFERENCE_KINDS`].
    pub kind: String,
    pub offset: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Soft-start duration (s); 0 disables the ramp.
    pub ramp_s: f64,
}

impl Default for ReferenceProgram {
    fn default() -> Self {
        Self {
            kind: "sine".into(),
            offset: 800.0,
            amp_min: 200.0,
            amp_max: 300.0,
            freq_min: 0.5,
            freq_max: 2.0,
            ramp_s: 0.25,
        }
    }
}

type Builder = fn(&ReferenceProgram, &mut dyn rand::RngCore) -> Box<dyn Reference>;

fn build_sine(p: &ReferenceProgram, rng: &mut dyn rand::RngCore) -> Box<dyn Reference> {
    Box::new(Sine {
        offset: p.offset,
        amplitude: uniform(rng, p.amp_min, p.amp_max),
        freq_hz: uniform(rng, p.freq_min, p.freq_max),
        phase: 0.0,
    })
}

fn build_two_tone(p: &ReferenceProgram, rng: &mut dyn rand::RngCore) -> Box<dyn Reference> {
    let total = uniform(rng, p.amp_min, p.amp_max);
    let split = uniform(rng, 0.5, 0.85);
    Box::new(TwoTone {
        a: Sine {
            offset: p.offset,
            amplitude: total * split,
            freq_hz: uniform(rng, p.freq_min, p.freq_max),
            phase: 0.0,
        },
        b: Sine {
            offset: p.offset,
            amplitude: total * (1.0 - split),
            freq_hz: uniform(rng, p.freq_min, 2.0 * p.freq_max),
            phase: uniform(rng, 0.0, 2.0 * PI),
        },
    })
}

/// Quarter-cycle sinusoid segments. Frequency is redrawn at every peak and
/// amplitude at every crossing of the offset (with `A·ω` held so the slope
/// stays continuous), so one episode visits many operating points while
/// `f_r` and `f_r_dot` stay continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct SineSegments {
    pub offset: f64,
    /// `(start time, amplitude, frequency, start phase)` per quarter cycle.
    segments: Vec<(f64, f64, f64, f64)>,
    max_amplitude: f64,
}

impl SineSegments {
    /// Draw segments covering `[0, horizon_s]`.
    pub fn sample(p: &ReferenceProgram, horizon_s: f64, rng: &mut dyn rand::RngCore) -> Self {
        let (f_lo, f_hi) = (p.freq_min.max(1e-3), p.freq_max.max(p.freq_min).max(1e-3));
        let mut amp = uniform(rng, p.amp_min, p.amp_max);
        let mut freq = uniform(rng, f_lo, f_hi);
        let mut segments = vec![];
        let (mut t, mut q) = (0.0, 0usize);
        while t <= horizon_s {
            if q > 0 && q % 2 == 0 {
                // crossing: keep the slope amp * freq
                let slope = amp * freq;
                let lo = p.amp_min.max(slope / f_hi);
                let hi = p.amp_max.min(slope / f_lo);
                amp = if lo < hi { uniform(rng, lo, hi) } else { amp };
                freq = slope / amp;
            } else if q % 2 == 1 {
                freq = uniform(rng, f_lo, f_hi);
            }
            segments.push((t, amp, freq, (q % 4) as f64 * PI / 2.0));
            t += 0.25 / freq;
            q += 1;
        }
        Self {
            offset: p.offset,
            max_amplitude: p.amp_min.max(p.amp_max),
            segments,
        }
    }
}

impl Reference for SineSegments {
    fn eval(&self, t: f64) -> (f64, f64) {
        let k = self.segments.partition_point(|s| s.0 <= t).saturating_sub(1);
        let (t0, a, f, phase) = self.segments[k];
        let w = 2.0 * PI * f;
        let arg = phase + w * (t - t0).max(0.0);
        (self.offset + a * arg.sin(), a * w * arg.cos())
    }

    fn amplitude(&self) -> f64 {
        self.max_amplitude
    }

    fn offset(&self) -> f64 {
        self.offset
    }
}

/// Segments are pre-drawn for this long; later times hold the last one.
const SEGMENT_HORIZON_S: f64 = 600.0;

fn build_segments(p: &ReferenceProgram, rng: &mut dyn rand::RngCore) -> Box<dyn Reference> {
    Box::new(SineSegments::sample(p, SEGMENT_HORIZON_S, rng))
}

fn uniform(rng: &mut dyn rand::RngCore, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Registered generator names.
pub const REFERENCE_KINDS: [(&str, Builder); 3] = [
    ("sine", build_sine),
    ("two_tone", build_two_tone),
    ("sine_segments", build_segments),
];

pub fn lookup(kind: &str) -> Option<Builder> {
    REFERENCE_KINDS.iter().find(|(n, _)| *n == kind).map(|(_, b)| *b)
}

impl ReferenceProgram {
    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> Box<dyn Reference> {
        let build = lookup(&self.kind).unwrap_or(build_sine);
        self.ramped(build(self, rng))
    }

    pub fn ramped(&self, inner: Box<dyn Reference>) -> Box<dyn Reference> {
        if self.ramp_s > 0.0 {
            Box::new(Ramped { inner, ramp_s: self.ramp_s })
        } else {
            inner
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_derivative_matches_difference() {
        let s = Sine {
            offset: 800.0,
            amplitude: 300.0,
            freq_hz: 1.5,
            phase: 0.3,
        };
        for t in [0.0, 0.17, 1.3] {
            let h = 1e-6;
            let fd = (s.eval(t + h).0 - s.eval(t - h).0) / (2.0 * h);
            assert!((fd - s.eval(t).1).abs() < 1e-4);
        }
        let tt = TwoTone { a: s, b: Sine { freq_hz: 3.0, ..s } };
        let fd = (tt.eval(0.2 + 1e-6).0 - tt.eval(0.2 - 1e-6).0) / 2e-6;
        assert!((fd - tt.eval(0.2).1).abs() < 1e-3);
        let r = Ramped { inner: Box::new(s), ramp_s: 0.25 };
        assert_eq!(r.eval(0.0), (800.0, 0.0));
        for t in [0.05, 0.2, 0.3] {
            let fd = (r.eval(t + 1e-6).0 - r.eval(t - 1e-6).0) / 2e-6;
            assert!((fd - r.eval(t).1).abs() < 1e-3, "{t}");
        }
        assert_eq!(r.eval(1.0), s.eval(1.0));
    }

    #[test]
    fn sampled_references_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ReferenceProgram::default();
        for _ in 0..100 {
            let r = p.sample(&mut rng);
            assert!((200.0..=300.0).contains(&r.amplitude()));
        }
        assert!(lookup("two_tone").is_some());
        assert!(lookup("square").is_none());
    }

    #[test]
    fn segments_are_smooth_and_bounded() {
        let p = ReferenceProgram::default();
        let r = SineSegments::sample(&p, 30.0, &mut ChaCha8Rng::seed_from_u64(9));
        let h = 1e-4;
        let mut prev = r.eval(0.0);
        for k in 1..300_000 {
            let t = k as f64 * h;
            let (f, fd) = r.eval(t);
            assert!((f - 800.0).abs() <= 300.0 + 1e-9);
            // a jump in either value or slope would exceed these
            assert!((f - prev.0).abs() <= 300.0 * 2.0 * PI * 2.0 * h * 1.001, "{t}");
            assert!((fd - prev.1).abs() <= 300.0 * (2.0 * PI * 2.0_f64).powi(2) * h * 1.001, "{t}");
            prev = (f, fd);
        }
        let freqs: Vec<f64> = r.segments.iter().map(|s| s.2).collect();
        assert!(freqs.iter().all(|f| (0.5..=2.0 + 1e-12).contains(f)));
        assert!(freqs.iter().any(|f| *f < 0.8) && freqs.iter().any(|f| *f > 1.7));
    }
}
