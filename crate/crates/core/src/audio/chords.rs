//! Template-matching chord recognition with Viterbi smoothing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::chroma::Chromagram;
use super::{AudioError, Result, PITCH_CLASS_NAMES};

/// One of the 24 major/minor triads, or no chord.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChordLabel {
    NoChord,
    Major(u8),
    Minor(u8),
}

impl ChordLabel {
    /// State order used by the decoder: 12 majors, 12 minors, then N.
    pub fn all() -> [ChordLabel; 25] {
        let mut out = [ChordLabel::NoChord; 25];
        for r in 0..12u8 {
            out[r as usize] = ChordLabel::Major(r);
            out[12 + r as usize] = ChordLabel::Minor(r);
        }
        out
    }

    fn template(self) -> [f64; 12] {
        let mut t = [0.0; 12];
        match self {
            ChordLabel::NoChord => t = [1.0; 12],
            ChordLabel::Major(r) => {
                for i in [0, 4, 7] {
                    t[(r as usize + i) % 12] = 1.0;
                }
            }
            ChordLabel::Minor(r) => {
                for i in [0, 3, 7] {
                    t[(r as usize + i) % 12] = 1.0;
                }
            }
        }
        t
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordLabel::NoChord => f.write_str("N"),
            ChordLabel::Major(r) => write!(f, "{}:maj", PITCH_CLASS_NAMES[*r as usize]),
            ChordLabel::Minor(r) => write!(f, "{}:min", PITCH_CLASS_NAMES[*r as usize]),
        }
    }
}

impl FromStr for ChordLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "N" {
            return Ok(ChordLabel::NoChord);
        }
        let (root, quality) = s
            .split_once(':')
            .ok_or_else(|| format!("bad chord label {s:?}"))?;
        let pc = PITCH_CLASS_NAMES
            .iter()
            .position(|n| *n == root)
            .ok_or_else(|| format!("bad chord root {root:?}"))? as u8;
        match quality {
            "maj" => Ok(ChordLabel::Major(pc)),
            "min" => Ok(ChordLabel::Minor(pc)),
            _ => Err(format!("bad chord quality {quality:?}")),
        }
    }
}

impl Serialize for ChordLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChordLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordSegment {
    pub label: ChordLabel,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordConfig {
    /// Log-score bonus for staying on the same chord between frames.
    pub self_transition_bonus: f64,
}

impl Default for ChordConfig {
    fn default() -> Self {
        Self {
            self_transition_bonus: 2.0,
        }
    }
}

fn cosine(frame: &[f64; 12], template: &[f64; 12]) -> Option<f64> {
    let dot: f64 = frame.iter().zip(template).map(|(a, b)| a * b).sum();
    let nf = frame.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = template.iter().map(|v| v * v).sum::<f64>().sqrt();
    (nf > 0.0).then(|| dot / (nf * nt))
}

/// Decode the most likely chord per frame and merge runs into segments that
/// tile `[0, duration]`.
pub fn recognize_chords(chroma: &Chromagram, config: &ChordConfig) -> Result<Vec<ChordSegment>> {
    let frames = chroma.frames();
    if frames.len() < 10 {
        return Err(AudioError::InsufficientAudio {
            needed_sec: 10.0 / chroma.frame_rate(),
            got_sec: frames.len() as f64 / chroma.frame_rate(),
        });
    }
    let duration = chroma.duration_sec();
    if chroma.is_silent() {
        return Ok(vec![ChordSegment {
            label: ChordLabel::NoChord,
            start: 0.0,
            end: duration,
        }]);
    }

    let states = ChordLabel::all();
    let templates: Vec<[f64; 12]> = states.iter().map(|s| s.template()).collect();
    let no_chord = states.len() - 1;
    let emission = |frame: &[f64; 12], s: usize| match cosine(frame, &templates[s]) {
        Some(v) => v,
        None if s == no_chord => 1.0,
        None => 0.0,
    };

    let n_states = states.len();
    let mut score: Vec<f64> = (0..n_states).map(|s| emission(&frames[0], s)).collect();
    let mut back = vec![vec![0u8; n_states]; frames.len()];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        // best predecessor when switching; ties go to the lowest state index
        let (switch_from, switch_score) = score
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let mut next = vec![0.0; n_states];
        for s in 0..n_states {
            let stay = score[s] + config.self_transition_bonus;
            let (from, best) = if stay >= switch_score {
                (s, stay)
            } else {
                (switch_from, switch_score)
            };
            next[s] = best + emission(frame, s);
            back[t][s] = from as u8;
        }
        score = next;
    }

    let mut state = score
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    let mut path = vec![0usize; frames.len()];
    for t in (0..frames.len()).rev() {
        path[t] = state;
        state = back[t][state] as usize;
    }

    let fr = chroma.frame_rate();
    let boundary = |t: usize| ((t as f64 - 0.5) / fr).clamp(0.0, duration);
    let mut segments: Vec<ChordSegment> = Vec::new();
    let mut run_start = 0usize;
    for t in 1..=path.len() {
        if t == path.len() || path[t] != path[run_start] {
            let start = if run_start == 0 { 0.0 } else { boundary(run_start) };
            let end = if t == path.len() { duration } else { boundary(t) };
            let label = states[path[run_start]];
            if end > start {
                match segments.last_mut() {
                    Some(last) if last.label == label => last.end = end,
                    _ => segments.push(ChordSegment { label, start, end }),
                }
            }
            run_start = t;
        }
    }
    Ok(segments)
}

/// Label active at time `t` (seconds), if any segment covers it.
pub fn label_at(segments: &[ChordSegment], t: f64) -> Option<ChordLabel> {
    segments
        .iter()
        .find(|s| s.start <= t && t < s.end)
        .or_else(|| segments.last().filter(|s| t == s.end))
        .map(|s| s.label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{chromagram, synth, AudioClip};

    fn assert_tiles(segs: &[ChordSegment], duration: f64) {
        assert!(!segs.is_empty());
        assert_eq!(segs[0].start, 0.0);
        assert!((segs.last().unwrap().end - duration).abs() < 1e-12);
        for w in segs.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert!(segs.iter().all(|s| s.start < s.end));
    }

    #[test]
    fn label_round_trip() {
        for l in ChordLabel::all() {
            assert_eq!(l.to_string().parse::<ChordLabel>().unwrap(), l);
        }
        assert!("H:maj".parse::<ChordLabel>().is_err());
    }

    #[test]
    fn two_chords() {
        let clip = synth::progression(44100, &[ChordLabel::Major(0), ChordLabel::Minor(9)], 4.0);
        let segs = recognize_chords(&chromagram(&clip).unwrap(), &ChordConfig::default()).unwrap();
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert_eq!(segs[0].label, ChordLabel::Major(0));
        assert_eq!(segs[1].label, ChordLabel::Minor(9));
        assert!((segs[0].end - 4.0).abs() <= 0.5);
        assert_tiles(&segs, 8.0);
    }

    #[test]
    fn silence_is_single_no_chord() {
        let clip = AudioClip::new(vec![0.0; 44100 * 2], 44100).unwrap();
        let segs = recognize_chords(&chromagram(&clip).unwrap(), &ChordConfig::default()).unwrap();
        assert_eq!(
            segs,
            vec![ChordSegment {
                label: ChordLabel::NoChord,
                start: 0.0,
                end: 2.0
            }]
        );
    }

    #[test]
    fn noise_tiles_clip() {
        let clip = synth::white_noise(22050, 3.0, 0.4, 99);
        let segs = recognize_chords(&chromagram(&clip).unwrap(), &ChordConfig::default()).unwrap();
        assert_tiles(&segs, 3.0);
    }

    #[test]
    fn label_lookup() {
        let segs = vec![
            ChordSegment { label: ChordLabel::Major(0), start: 0.0, end: 1.0 },
            ChordSegment { label: ChordLabel::Minor(2), start: 1.0, end: 2.0 },
        ];
        assert_eq!(label_at(&segs, 0.5), Some(ChordLabel::Major(0)));
        assert_eq!(label_at(&segs, 1.0), Some(ChordLabel::Minor(2)));
        assert_eq!(label_at(&segs, 2.0), Some(ChordLabel::Minor(2)));
        assert_eq!(label_at(&segs, 3.0), None);
    }
}
