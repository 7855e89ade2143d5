//! Autocorrelation tempo estimation with octave disambiguation, followed by
//! dynamic-programming beat tracking.

use super::onset::OnsetEnvelope;
use super::{AudioError, Result};

pub const MIN_BPM: f64 = 40.0;
pub const MAX_BPM: f64 = 240.0;
/// Tempo band preferred when a half/double candidate is nearly as strong.
pub const PREFERRED_BAND: (f64, f64) = (70.0, 160.0);
/// A half/double candidate must reach this fraction of the peak score.
pub const OCTAVE_MARGIN: f64 = 0.9;
/// Peak score below this fraction of the envelope variance is treated as noise.
const NOISE_FLOOR: f64 = 0.1;
/// Penalty weight on log tempo deviation between consecutive beats.
const BEAT_TIGHTNESS: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TempoEstimate {
    pub bpm: f64,
    pub confidence: f64,
    pub beat_times: Vec<f64>,
}

struct Autocorrelation {
    values: Vec<f64>,
}

impl Autocorrelation {
    fn new(x: &[f64], max_lag: usize) -> Self {
        let n = x.len();
        let max_lag = max_lag.min(n.saturating_sub(1));
        let values = (0..=max_lag)
            .map(|lag| {
                x[..n - lag]
                    .iter()
                    .zip(&x[lag..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        Self { values }
    }

    fn max_lag(&self) -> f64 {
        (self.values.len() - 1) as f64
    }

    /// Linearly interpolated value at a fractional lag; zero past the end.
    fn at(&self, lag: f64) -> f64 {
        if lag < 0.0 || lag > self.max_lag() {
            return 0.0;
        }
        let i = lag.floor() as usize;
        let frac = lag - i as f64;
        if i + 1 >= self.values.len() {
            return self.values[i];
        }
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Periodicity score: the autocorrelation at `lag` minus half of the
    /// stronger autocorrelation at `lag / 2` or `lag / 3`. Pulses between
    /// candidate beats count against the candidate, so a track is not
    /// mistaken for its own half or third tempo.
    fn score(&self, lag: f64) -> f64 {
        self.at(lag) - 0.5 * self.at(lag / 2.0).max(self.at(lag / 3.0))
    }

    /// Parabolic peak location of `f` around integer `centre`.
    fn refine(&self, centre: usize, f: impl Fn(f64) -> f64) -> f64 {
        if centre == 0 {
            return 0.0;
        }
        let c = centre as f64;
        let (a, b, d) = (f(c - 1.0), f(c), f(c + 1.0));
        let denom = a - 2.0 * b + d;
        if denom.abs() < 1e-15 {
            return c;
        }
        let shift = 0.5 * (a - d) / denom;
        c + shift.clamp(-0.5, 0.5)
    }

    /// Integer lag maximising `f` in `[lo, hi]`.
    fn argmax(&self, lo: usize, hi: usize, f: impl Fn(f64) -> f64) -> usize {
        let mut best = lo;
        let mut best_val = f64::NEG_INFINITY;
        for lag in lo..=hi {
            let v = f(lag as f64);
            if v > best_val {
                best_val = v;
                best = lag;
            }
        }
        best
    }

    /// Sharpen a period estimate using the autocorrelation peaks at its
    /// multiples, which resolve fractional periods more finely.
    fn refine_period(&self, period: f64, limit: f64) -> f64 {
        let mut refined = period;
        for k in 2..=4 {
            let target = refined * k as f64;
            if target + 2.0 > limit.min(self.max_lag()) {
                break;
            }
            let lo = (target - 2.0).floor().max(1.0) as usize;
            let hi = (target + 2.0).ceil() as usize;
            let peak = self.argmax(lo, hi, |l| self.at(l));
            let at_peak = self.refine(peak, |l| self.at(l));
            refined = at_peak / k as f64;
        }
        refined
    }
}

fn lag_for_bpm(bpm: f64, frame_rate: f64) -> f64 {
    60.0 * frame_rate / bpm
}

/// Estimate tempo and beat positions from an onset envelope (at least 4 s).
pub fn estimate_tempo(env: &OnsetEnvelope) -> Result<TempoEstimate> {
    let fr = env.frame_rate();
    let needed = 4.0;
    if env.duration_sec() + 1e-9 < needed {
        return Err(AudioError::InsufficientAudio {
            needed_sec: needed,
            got_sec: env.duration_sec(),
        });
    }
    let values = env.values();
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = values.iter().map(|v| v - mean).collect();

    let min_lag = lag_for_bpm(MAX_BPM, fr).floor().max(1.0) as usize;
    let max_lag = lag_for_bpm(MIN_BPM, fr).ceil() as usize;
    let acf = Autocorrelation::new(&centred, 4 * max_lag + 4);
    let variance = acf.values[0];
    if variance <= 1e-12 || max_lag + 1 >= n {
        return Err(AudioError::NoPeriodicity);
    }
    let max_lag = max_lag.min(n - 2);

    let best = acf.argmax(min_lag, max_lag, |l| acf.score(l));
    let mut period = acf.refine(best, |l| acf.score(l));
    let peak = acf.score(period);
    if peak < NOISE_FLOOR * variance {
        return Err(AudioError::NoPeriodicity);
    }

    let bpm_of = |p: f64| 60.0 * fr / p;
    let bpm = bpm_of(period);
    if bpm < PREFERRED_BAND.0 || bpm > PREFERRED_BAND.1 {
        let mut chosen: Option<(f64, f64)> = None;
        for candidate in [bpm * 2.0, bpm / 2.0] {
            if candidate < PREFERRED_BAND.0 || candidate > PREFERRED_BAND.1 {
                continue;
            }
            let guess = lag_for_bpm(candidate, fr);
            let lo = (guess - 1.0).floor().max(min_lag as f64) as usize;
            let hi = ((guess + 1.0).ceil() as usize).min(max_lag);
            if lo > hi {
                continue;
            }
            let at = acf.argmax(lo, hi, |l| acf.score(l));
            let cand_period = acf.refine(at, |l| acf.score(l));
            let cand_score = acf.score(cand_period);
            if cand_score >= OCTAVE_MARGIN * peak
                && chosen.is_none_or(|(_, best_score)| cand_score > best_score)
            {
                chosen = Some((cand_period, cand_score));
            }
        }
        if let Some((p, _)) = chosen {
            period = p;
        }
    }

    let period = acf.refine_period(period, n as f64 / 2.0);
    let bpm = bpm_of(period).clamp(MIN_BPM, MAX_BPM);
    let confidence = (peak / variance).clamp(0.0, 1.0);
    let beat_frames = track_beats(values, period);
    let beat_times = beat_frames.into_iter().map(|f| env.frame_time(f)).collect();
    Ok(TempoEstimate {
        bpm,
        confidence,
        beat_times,
    })
}

/// Dynamic-programming beat tracker: maximise onset strength at beats minus a
/// penalty on the squared log ratio of each inter-beat interval to `period`.
fn track_beats(onsets: &[f64], period: f64) -> Vec<usize> {
    let n = onsets.len();
    let mean = onsets.iter().sum::<f64>() / n as f64;
    let std = (onsets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let norm: Vec<f64> = onsets.iter().map(|v| v / std.max(1e-12)).collect();

    let min_gap = (period / 2.0).round().max(1.0) as usize;
    let max_gap = (period * 2.0).round() as usize;
    let mut cumulative = vec![0.0; n];
    let mut backlink: Vec<Option<usize>> = vec![None; n];
    for t in 0..n {
        let mut best: Option<(f64, usize)> = None;
        if t >= min_gap {
            let lo = t.saturating_sub(max_gap);
            for prev in lo..=t - min_gap {
                let gap = (t - prev) as f64;
                let penalty = BEAT_TIGHTNESS * (gap / period).ln().powi(2);
                let cand = cumulative[prev] - penalty;
                if best.is_none_or(|(b, _)| cand > b) {
                    best = Some((cand, prev));
                }
            }
        }
        match best {
            Some((score, prev)) if score > 0.0 => {
                cumulative[t] = norm[t] + score;
                backlink[t] = Some(prev);
            }
            _ => cumulative[t] = norm[t],
        }
    }

    let tail = (period.round() as usize).clamp(1, n);
    let mut t = (n - tail..n)
        .max_by(|&a, &b| cumulative[a].total_cmp(&cumulative[b]).then(b.cmp(&a)))
        .unwrap_or(n - 1);
    let mut beats = vec![t];
    while let Some(prev) = backlink[t] {
        beats.push(prev);
        t = prev;
    }
    beats.reverse();
    beats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::onset_envelope;
    use crate::audio::synth::ClickTrack;

    fn tempo_of(track: &ClickTrack) -> TempoEstimate {
        estimate_tempo(&onset_envelope(&track.render()).unwrap()).unwrap()
    }

    #[test]
    fn click_track_120() {
        let est = tempo_of(&ClickTrack::new(120.0, 10.0));
        assert!((117.6..=122.4).contains(&est.bpm), "bpm {}", est.bpm);
    }

    #[test]
    fn click_track_60_beats_consistent() {
        let est = tempo_of(&ClickTrack::new(60.0, 12.0));
        let near = |target: f64| (est.bpm - target).abs() / target < 0.02;
        assert!(near(60.0) || near(120.0), "bpm {}", est.bpm);
        let gaps: Vec<f64> = est.beat_times.windows(2).map(|w| w[1] - w[0]).collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let expected = 60.0 / est.bpm;
        assert!((median - expected).abs() / expected < 0.05, "median gap {median}");
    }

    #[test]
    fn beat_times_increase_within_clip() {
        let track = ClickTrack::new(100.0, 8.0);
        let est = tempo_of(&track);
        assert!(est.beat_times.windows(2).all(|w| w[1] > w[0]));
        assert!(est.beat_times.iter().all(|&t| (0.0..=8.0).contains(&t)));
        assert!(est.beat_times.len() >= 10);
    }

    #[test]
    fn silence_has_no_periodicity() {
        let env = OnsetEnvelope::new(vec![0.0; 600], 86.0).unwrap();
        assert_eq!(estimate_tempo(&env), Err(AudioError::NoPeriodicity));
    }

    #[test]
    fn short_envelope_rejected() {
        let env = OnsetEnvelope::new(vec![1.0; 100], 86.0).unwrap();
        assert!(matches!(
            estimate_tempo(&env),
            Err(AudioError::InsufficientAudio { .. })
        ));
    }

    #[test]
    fn pitch_invariant() {
        let base = tempo_of(&ClickTrack::new(110.0, 10.0)).bpm;
        for semitones in [-7.0, -2.0, 3.0, 12.0] {
            let mut t = ClickTrack::new(110.0, 10.0);
            t.click_hz = 1000.0 * 2f64.powf(semitones / 12.0);
            let bpm = tempo_of(&t).bpm;
            assert!((bpm - base).abs() / base < 0.005, "{semitones}: {bpm} vs {base}");
        }
    }
}
