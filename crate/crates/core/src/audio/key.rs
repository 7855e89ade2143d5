//! Key finding by correlating averaged chroma with Krumhansl–Kessler profiles.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::chroma::Chromagram;
use super::{AudioError, Result, PITCH_CLASS_NAMES};

const KK_MAJOR: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
const KK_MINOR: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

const MIN_FRAMES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Major => "major",
            Mode::Minor => "minor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyEstimate {
    /// Pitch class of the tonic, C = 0.
    pub tonic: u8,
    pub mode: Mode,
    pub correlation: f64,
}

impl fmt::Display for KeyEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", PITCH_CLASS_NAMES[self.tonic as usize], self.mode)
    }
}

fn pearson(a: &[f64; 12], b: &[f64; 12]) -> Option<f64> {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 1e-18 || vb <= 1e-18 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

fn rotated(profile: &[f64; 12], tonic: usize) -> [f64; 12] {
    let mut out = [0.0; 12];
    for (i, v) in profile.iter().enumerate() {
        out[(i + tonic) % 12] = *v;
    }
    out
}

/// Correlations against all 24 keys, indexed `[tonic][0 = major, 1 = minor]`.
pub fn key_correlations(chroma: &Chromagram) -> Result<[[f64; 2]; 12]> {
    let frames = chroma.frames();
    if frames.len() < MIN_FRAMES {
        return Err(AudioError::InsufficientAudio {
            needed_sec: MIN_FRAMES as f64 / chroma.frame_rate(),
            got_sec: frames.len() as f64 / chroma.frame_rate(),
        });
    }
    let mut mean = [0.0; 12];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
    if mean.iter().all(|&m| m == 0.0) {
        return Err(AudioError::NoTonalContent);
    }
    let mut out = [[0.0; 2]; 12];
    for (tonic, row) in out.iter_mut().enumerate() {
        row[0] = pearson(&mean, &rotated(&KK_MAJOR, tonic)).ok_or(AudioError::NoTonalContent)?;
        row[1] = pearson(&mean, &rotated(&KK_MINOR, tonic)).ok_or(AudioError::NoTonalContent)?;
    }
    Ok(out)
}

/// Best-correlating key. Ties go to the lower tonic, then to major.
pub fn estimate_key(chroma: &Chromagram) -> Result<KeyEstimate> {
    let table = key_correlations(chroma)?;
    let mut best = KeyEstimate {
        tonic: 0,
        mode: Mode::Major,
        correlation: f64::NEG_INFINITY,
    };
    for (tonic, row) in table.iter().enumerate() {
        for (mode, &r) in [Mode::Major, Mode::Minor].into_iter().zip(row) {
            if r > best.correlation {
                best = KeyEstimate {
                    tonic: tonic as u8,
                    mode,
                    correlation: r,
                };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{chromagram, synth};

    fn key_of_scale(tonic_midi: i32, mode: Mode) -> KeyEstimate {
        estimate_key(&chromagram(&synth::scale(44100, tonic_midi, mode, 0.4)).unwrap()).unwrap()
    }

    #[test]
    fn c_major_scale() {
        let k = key_of_scale(60, Mode::Major);
        assert_eq!((k.tonic, k.mode), (0, Mode::Major), "{k}");
    }

    #[test]
    fn a_minor_scale() {
        let k = key_of_scale(69, Mode::Minor);
        assert_eq!((k.tonic, k.mode), (9, Mode::Minor), "{k}");
    }

    #[test]
    fn amplitude_invariant() {
        let clip = synth::scale(44100, 62, Mode::Major, 0.4);
        let base = estimate_key(&chromagram(&clip).unwrap()).unwrap();
        for g in [1.0, 0.5, 0.1, 0.01] {
            let k = estimate_key(&chromagram(&synth::gain(&clip, g)).unwrap()).unwrap();
            assert_eq!((k.tonic, k.mode), (base.tonic, base.mode));
        }
    }

    #[test]
    fn all_zero_has_no_tonal_content() {
        let chroma = Chromagram::new(vec![[0.0; 12]; 20], 86.0, 0.3).unwrap();
        assert_eq!(estimate_key(&chroma), Err(AudioError::NoTonalContent));
    }

    #[test]
    fn profile_itself_is_recovered() {
        for tonic in 0..12 {
            let frames = vec![rotated(&KK_MINOR, tonic); 12];
            let chroma = Chromagram::new(frames, 10.0, 1.2).unwrap();
            let k = estimate_key(&chroma).unwrap();
            assert_eq!((k.tonic as usize, k.mode), (tonic, Mode::Minor));
            assert!((k.correlation - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_frames() {
        let chroma = Chromagram::new(vec![[1.0; 12]; 5], 86.0, 0.1).unwrap();
        assert!(matches!(
            estimate_key(&chroma),
            Err(AudioError::InsufficientAudio { .. })
        ));
    }
}
