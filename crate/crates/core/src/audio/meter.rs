use std::fmt;

use super::onset::OnsetEnvelope;
use super::tempo::TempoEstimate;

const MIN_BEATS: usize = 8;
/// Triple grouping must beat duple grouping by this relative margin.
const TIE_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Meter {
    ThreeFour,
    FourFour,
}

impl fmt::Display for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Meter::ThreeFour => "3/4",
            Meter::FourFour => "4/4",
        })
    }
}

/// Only 3/4 and 4/4 are distinguished; `low_confidence` marks the fallback
/// taken when too few beats were tracked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeterEstimate {
    pub meter: Meter,
    pub low_confidence: bool,
}

fn accent_at(env: &OnsetEnvelope, time: f64) -> f64 {
    let values = env.values();
    let centre = (time * env.frame_rate()).round() as isize;
    (centre - 2..=centre + 2)
        .filter(|&i| i >= 0 && (i as usize) < values.len())
        .map(|i| values[i as usize])
        .fold(0.0, f64::max)
}

/// Strongest phase-group mean accent for a grouping period, relative to the
/// overall mean accent.
fn grouping_strength(accents: &[f64], period: usize) -> f64 {
    let overall = accents.iter().sum::<f64>() / accents.len() as f64;
    if overall <= 0.0 {
        return 0.0;
    }
    (0..period)
        .map(|phase| {
            let group: Vec<f64> = accents.iter().skip(phase).step_by(period).copied().collect();
            group.iter().sum::<f64>() / group.len().max(1) as f64
        })
        .fold(0.0, f64::max)
        / overall
}

pub fn estimate_meter(env: &OnsetEnvelope, tempo: &TempoEstimate) -> MeterEstimate {
    if tempo.beat_times.len() < MIN_BEATS {
        return MeterEstimate {
            meter: Meter::FourFour,
            low_confidence: true,
        };
    }
    let accents: Vec<f64> = tempo.beat_times.iter().map(|&t| accent_at(env, t)).collect();
    let triple = grouping_strength(&accents, 3);
    let duple = grouping_strength(&accents, 4);
    let meter = if triple > duple * (1.0 + TIE_MARGIN) {
        Meter::ThreeFour
    } else {
        Meter::FourFour
    };
    MeterEstimate {
        meter,
        low_confidence: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth::ClickTrack;
    use crate::audio::{estimate_tempo, onset_envelope};

    fn meter_of(track: ClickTrack) -> MeterEstimate {
        let env = onset_envelope(&track.render()).unwrap();
        let tempo = estimate_tempo(&env).unwrap();
        estimate_meter(&env, &tempo)
    }

    #[test]
    fn accented_fours() {
        let m = meter_of(ClickTrack::new(120.0, 12.0).accented(4, 6.0));
        assert_eq!(m.meter, Meter::FourFour);
        assert!(!m.low_confidence);
    }

    #[test]
    fn accented_threes() {
        let m = meter_of(ClickTrack::new(120.0, 12.0).accented(3, 6.0));
        assert_eq!(m.meter, Meter::ThreeFour);
    }

    #[test]
    fn unaccented_defaults_to_four() {
        assert_eq!(meter_of(ClickTrack::new(120.0, 12.0)).meter, Meter::FourFour);
    }

    #[test]
    fn few_beats_flagged() {
        let env = OnsetEnvelope::new(vec![0.0; 500], 86.0).unwrap();
        let tempo = TempoEstimate {
            bpm: 120.0,
            confidence: 0.5,
            beat_times: vec![0.5, 1.0, 1.5],
        };
        let m = estimate_meter(&env, &tempo);
        assert_eq!(m.meter, Meter::FourFour);
        assert!(m.low_confidence);
    }
}
