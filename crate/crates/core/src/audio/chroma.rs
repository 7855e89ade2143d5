use super::stft::Spectrogram;
use super::{AudioClip, AudioError, Result};

const MIN_FREQ_HZ: f64 = 55.0;
const MAX_FREQ_HZ: f64 = 2100.0;
const SILENT_FRAME_ENERGY: f64 = 1e-10;
/// Chroma uses a window this many times the base STFT length, so that
/// adjacent semitones around middle C fall in distinct bins.
const WINDOW_FACTOR: usize = 4;

/// Sequence of 12-bin pitch-class frames (C..B), each max-normalised or all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Chromagram {
    frames: Vec<[f64; 12]>,
    frame_rate: f64,
    duration_sec: f64,
}

impl Chromagram {
    pub fn new(frames: Vec<[f64; 12]>, frame_rate: f64, duration_sec: f64) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(AudioError::InvalidArgument("frame rate must be positive".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(AudioError::InvalidArgument(format!(
                    "chroma frame {i} has negative or non-finite energy"
                )));
            }
        }
        Ok(Self {
            frames,
            frame_rate,
            duration_sec,
        })
    }

    pub fn frames(&self) -> &[[f64; 12]] {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn duration_sec(&self) -> f64 {
        self.duration_sec
    }

    pub fn is_silent(&self) -> bool {
        self.frames.iter().all(|f| f.iter().all(|&v| v == 0.0))
    }
}

/// Nearest equal-tempered pitch class (A4 = 440 Hz) for a frequency.
pub(crate) fn pitch_class_of(freq_hz: f64) -> usize {
    let semis_from_a4 = 12.0 * (freq_hz / 440.0).log2();
    ((semis_from_a4.round() as i64 + 9).rem_euclid(12)) as usize
}

/// Per-frame pitch-class power before normalisation.
pub fn pitch_class_energy(clip: &AudioClip) -> Result<Vec<[f64; 12]>> {
    clip.require_duration(0.5)?;
    let params = super::StftParams::for_rate(clip.sample_rate()).widened(WINDOW_FACTOR);
    let spec = Spectrogram::with_params(clip, params);
    let bins: Vec<(usize, usize)> = (1..params.n_bins())
        .filter_map(|b| {
            let f = params.bin_frequency(b);
            (MIN_FREQ_HZ..=MAX_FREQ_HZ)
                .contains(&f)
                .then(|| (b, pitch_class_of(f)))
        })
        .collect();
    Ok(spec
        .frames
        .iter()
        .map(|frame| {
            let mut pcs = [0.0; 12];
            for &(b, pc) in &bins {
                pcs[pc] += frame[b] * frame[b];
            }
            pcs
        })
        .collect())
}

/// STFT chromagram folded to the nearest pitch class and max-normalised per frame.
pub fn chromagram(clip: &AudioClip) -> Result<Chromagram> {
    let raw = pitch_class_energy(clip)?;
    let frames = raw
        .into_iter()
        .map(|mut f| {
            let max = f.iter().cloned().fold(0.0, f64::max);
            if max <= SILENT_FRAME_ENERGY {
                [0.0; 12]
            } else {
                f.iter_mut().for_each(|v| *v /= max);
                f
            }
        })
        .collect();
    let params = super::StftParams::for_rate(clip.sample_rate());
    Chromagram::new(frames, params.frame_rate(), clip.duration_sec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth;

    fn top3(frame: &[f64; 12]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| frame[b].total_cmp(&frame[a]));
        let mut top = idx[..3].to_vec();
        top.sort();
        top
    }

    #[test]
    fn pitch_class_folding() {
        assert_eq!(pitch_class_of(440.0), 9);
        assert_eq!(pitch_class_of(261.63), 0);
        assert_eq!(pitch_class_of(880.0), 9);
        assert_eq!(pitch_class_of(466.16), 10);
    }

    #[test]
    fn a440_concentrates_on_a() {
        let chroma = chromagram(&synth::sine(44100, 440.0, 2.0, 0.5)).unwrap();
        let frames = chroma.frames();
        let good = frames.iter().filter(|f| f[9] >= 0.9).count();
        assert!(good as f64 >= 0.95 * frames.len() as f64, "{good}/{}", frames.len());
    }

    #[test]
    fn silence_is_zero() {
        let clip = AudioClip::new(vec![0.0; 44100], 44100).unwrap();
        let chroma = chromagram(&clip).unwrap();
        assert!(chroma.is_silent());
    }

    #[test]
    fn c_major_triad_top3() {
        let clip = synth::progression(44100, &[crate::audio::ChordLabel::Major(0)], 2.0);
        let chroma = chromagram(&clip).unwrap();
        let hits = chroma
            .frames()
            .iter()
            .filter(|f| top3(f) == vec![0, 4, 7])
            .count();
        let n = chroma.frames().len();
        assert!(hits as f64 >= 0.9 * n as f64, "{hits}/{n}");
    }

    #[test]
    fn normalised_frames() {
        let chroma = chromagram(&synth::white_noise(22050, 1.0, 0.2, 3)).unwrap();
        for f in chroma.frames() {
            let max = f.iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_energy_not_below_components() {
        let a = synth::sine(44100, 440.0, 1.0, 0.3);
        let b = synth::sine(44100, 659.26, 1.0, 0.3);
        let mix = synth::mix(&a, &b);
        let ea = pitch_class_energy(&a).unwrap();
        let eb = pitch_class_energy(&b).unwrap();
        let em = pitch_class_energy(&mix).unwrap();
        for t in 0..em.len() {
            let total = |f: &[f64; 12]| f.iter().sum::<f64>();
            assert!(total(&em[t]) + 1e-9 >= total(&ea[t]));
            assert!(total(&em[t]) + 1e-9 >= total(&eb[t]));
        }
    }

    #[test]
    fn too_short() {
        let clip = AudioClip::new(vec![0.1; 1000], 44100).unwrap();
        assert!(matches!(
            chromagram(&clip),
            Err(AudioError::InsufficientAudio { .. })
        ));
    }
}
