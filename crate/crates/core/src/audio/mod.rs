//! Signal-processing extractors for low-level music metadata.
//!
//! Everything here operates at the clip's native sample rate. STFT sizes are
//! 2048/512 samples at 44.1 kHz and scale proportionally for other rates, so
//! frame rates stay comparable across inputs without resampling.
//!
//! All functions are pure; the same clip always yields bit-identical output.

mod chords;
mod chroma;
mod key;
mod meter;
mod onset;
mod stft;
pub mod synth;
mod tempo;
mod wav;

pub use chords::{label_at, recognize_chords, ChordConfig, ChordLabel, ChordSegment};
pub use chroma::{chromagram, pitch_class_energy, Chromagram};
pub use key::{estimate_key, key_correlations, KeyEstimate, Mode};
pub use meter::{estimate_meter, Meter, MeterEstimate};
pub use onset::{onset_envelope, OnsetEnvelope};
pub use stft::{Spectrogram, StftParams};
pub use tempo::{estimate_tempo, TempoEstimate};
pub use wav::{decode_wav, encode_wav_pcm16};

use thiserror::Error;

/// Errors raised by the extractors.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("malformed WAV data: {0}")]
    Decode(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient audio: need {needed_sec:.2} s, got {got_sec:.2} s")]
    InsufficientAudio { needed_sec: f64, got_sec: f64 },
    #[error("no periodicity found in onset envelope")]
    NoPeriodicity,
    #[error("no tonal content in chromagram")]
    NoTonalContent,
}

impl AudioError {
    /// Short class name, used in audit notes and CLI diagnostics.
    pub fn class_name(&self) -> &'static str {
        match self {
            AudioError::Decode(_) => "DecodeError",
            AudioError::UnsupportedFormat(_) => "UnsupportedFormat",
            AudioError::InvalidArgument(_) => "InvalidArgument",
            AudioError::InsufficientAudio { .. } => "InsufficientAudio",
            AudioError::NoPeriodicity => "NoPeriodicity",
            AudioError::NoTonalContent => "NoTonalContent",
        }
    }
}

pub type Result<T> = std::result::Result<T, AudioError>;

pub const MIN_SAMPLE_RATE: u32 = 8_000;
pub const MAX_SAMPLE_RATE: u32 = 192_000;

/// Pitch-class names, sharps only, indexed C = 0.
pub const PITCH_CLASS_NAMES: [&str; 12] =
    ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// A decoded mono waveform.
///
/// `offset_sec` is the position of the first sample within the source
/// recording; it is zero for whole files and set by [`segment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    offset_sec: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::InvalidArgument("clip has no samples".into()));
        }
        if !(MIN_SAMPLE_RATE..=MAX_SAMPLE_RATE).contains(&sample_rate) {
            return Err(AudioError::InvalidArgument(format!(
                "sample rate {sample_rate} outside {MIN_SAMPLE_RATE}..={MAX_SAMPLE_RATE}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            offset_sec: 0.0,
        })
    }

    pub fn with_offset(mut self, offset_sec: f64) -> Self {
        self.offset_sec = offset_sec;
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn offset_sec(&self) -> f64 {
        self.offset_sec
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of the samples in `[start, end)` as a new clip, offset accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.samples.len());
        if start >= end {
            return Err(AudioError::InvalidArgument(format!(
                "empty slice {start}..{end}"
            )));
        }
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
            offset_sec: self.offset_sec + start as f64 / self.sample_rate as f64,
        })
    }

    pub(crate) fn require_duration(&self, needed_sec: f64) -> Result<()> {
        let got_sec = self.duration_sec();
        if got_sec + 1e-9 < needed_sec {
            return Err(AudioError::InsufficientAudio { needed_sec, got_sec });
        }
        Ok(())
    }
}

/// Split a clip into fixed windows.
///
/// Windows start every `hop_sec`. A trailing window shorter than
/// `window_sec` is kept only if it is longer than half a window.
pub fn segment(clip: &AudioClip, window_sec: f64, hop_sec: f64) -> Result<Vec<AudioClip>> {
    if !(window_sec > 0.0) || !window_sec.is_finite() {
        return Err(AudioError::InvalidArgument(format!(
            "window must be positive, got {window_sec}"
        )));
    }
    if !(hop_sec > 0.0) || hop_sec > window_sec {
        return Err(AudioError::InvalidArgument(format!(
            "hop must satisfy 0 < hop <= window, got hop {hop_sec} window {window_sec}"
        )));
    }
    let sr = clip.sample_rate as f64;
    let window = (window_sec * sr).round() as usize;
    let hop = ((hop_sec * sr).round() as usize).max(1);
    let n = clip.len();

    let mut out = Vec::new();
    let mut start = 0usize;
    while start < n {
        let remaining = n - start;
        if remaining >= window {
            out.push(clip.slice(start, start + window)?);
        } else {
            if 2 * remaining > window {
                out.push(clip.slice(start, n)?);
            }
            break;
        }
        if start + window >= n {
            break;
        }
        start += hop;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silent(sec: f64) -> AudioClip {
        AudioClip::new(vec![0.0; (sec * 8000.0) as usize], 8000).unwrap()
    }

    fn offsets(segs: &[AudioClip]) -> Vec<f64> {
        segs.iter().map(|s| s.offset_sec()).collect()
    }

    #[test]
    fn exact_tiling() {
        let segs = segment(&silent(90.0), 30.0, 30.0).unwrap();
        assert_eq!(offsets(&segs), vec![0.0, 30.0, 60.0]);
    }

    #[test]
    fn short_tail_dropped() {
        let segs = segment(&silent(75.0), 30.0, 30.0).unwrap();
        assert_eq!(offsets(&segs), vec![0.0, 30.0]);
    }

    #[test]
    fn long_tail_kept() {
        let segs = segment(&silent(80.0), 30.0, 30.0).unwrap();
        assert_eq!(offsets(&segs), vec![0.0, 30.0, 60.0]);
        assert!((segs[2].duration_sec() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn overlapping_windows() {
        let segs = segment(&silent(60.0), 30.0, 15.0).unwrap();
        assert_eq!(offsets(&segs), vec![0.0, 15.0, 30.0]);
    }

    #[test]
    fn rejects_bad_windows() {
        let clip = silent(10.0);
        assert!(matches!(
            segment(&clip, 0.0, 1.0),
            Err(AudioError::InvalidArgument(_))
        ));
        assert!(matches!(
            segment(&clip, -3.0, 1.0),
            Err(AudioError::InvalidArgument(_))
        ));
        assert!(matches!(
            segment(&clip, 5.0, 6.0),
            Err(AudioError::InvalidArgument(_))
        ));
    }

    #[test]
    fn clip_validation() {
        assert!(AudioClip::new(vec![], 44100).is_err());
        assert!(AudioClip::new(vec![0.0], 4000).is_err());
        assert!(AudioClip::new(vec![f32::NAN], 44100).is_err());
    }
}
