//! Deterministic test-signal generators.
//!
//! These back the demo corpus and the extractor oracles: every generator
//! knows the tempo, key or chord sequence it rendered.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioClip, ChordLabel, Mode};

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

fn clip(samples: Vec<f64>, sample_rate: u32) -> AudioClip {
    let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(samples, sample_rate).expect("generator output is a valid clip")
}

pub fn sine(sample_rate: u32, freq_hz: f64, duration_sec: f64, amplitude: f64) -> AudioClip {
    let n = (duration_sec * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    clip(
        (0..n)
            .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / sr).sin())
            .collect(),
        sample_rate,
    )
}

pub fn white_noise(sample_rate: u32, duration_sec: f64, amplitude: f64, seed: u64) -> AudioClip {
    let n = (duration_sec * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clip(
        (0..n).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect(),
        sample_rate,
    )
}

/// Click track: damped-sine clicks at a fixed tempo.
#[derive(Debug, Clone)]
pub struct ClickTrack {
    pub bpm: f64,
    pub duration_sec: f64,
    pub sample_rate: u32,
    /// Pitch of each click. Transposing this must not move the tempo.
    pub click_hz: f64,
    /// Accent every n-th click (first click of each group), if any.
    pub accent_every: Option<usize>,
    pub accent_db: f64,
}

impl ClickTrack {
    pub fn new(bpm: f64, duration_sec: f64) -> Self {
        Self {
            bpm,
            duration_sec,
            sample_rate: 44_100,
            click_hz: 1000.0,
            accent_every: None,
            accent_db: 6.0,
        }
    }

    pub fn accented(mut self, every: usize, db: f64) -> Self {
        self.accent_every = Some(every);
        self.accent_db = db;
        self
    }

    pub fn render(&self) -> AudioClip {
        let sr = self.sample_rate as f64;
        let n = (self.duration_sec * sr).round() as usize;
        let mut out = vec![0.0f64; n];
        let period = 60.0 / self.bpm;
        let click_len = (0.06 * sr) as usize;
        let base_amp = 0.4;
        let accent_gain = 10f64.powf(self.accent_db / 20.0);
        let mut k = 0usize;
        loop {
            let onset = (k as f64 * period * sr).round() as usize;
            if onset >= n {
                break;
            }
            let amp = match self.accent_every {
                Some(every) if every > 0 && k % every == 0 => base_amp * accent_gain,
                _ => base_amp,
            };
            for i in 0..click_len.min(n - onset) {
                let t = i as f64 / sr;
                out[onset + i] += amp * (-t / 0.012).exp() * (2.0 * PI * self.click_hz * t).sin();
            }
            k += 1;
        }
        clip(out, self.sample_rate)
    }
}

/// Sum of sines at the given MIDI pitches, with short fades to avoid clicks.
pub fn tone(sample_rate: u32, midi_pitches: &[f64], duration_sec: f64, amplitude: f64) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = (duration_sec * sr).round() as usize;
    let fade = ((0.01 * sr) as usize).min(n / 2).max(1);
    let per_voice = amplitude / midi_pitches.len().max(1) as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = if i < fade {
                i as f64 / fade as f64
            } else if i >= n - fade {
                (n - i) as f64 / fade as f64
            } else {
                1.0
            };
            let s: f64 = midi_pitches
                .iter()
                .map(|&m| (2.0 * PI * midi_to_hz(m) * t).sin())
                .sum();
            env * per_voice * s
        })
        .collect()
}

/// Ascending one-octave scale starting at `tonic_midi`, tonic repeated at the top.
pub fn scale(sample_rate: u32, tonic_midi: i32, mode: Mode, note_sec: f64) -> AudioClip {
    let steps: [i32; 8] = match mode {
        Mode::Major => [0, 2, 4, 5, 7, 9, 11, 12],
        Mode::Minor => [0, 2, 3, 5, 7, 8, 10, 12],
    };
    let mut out = Vec::new();
    for s in steps {
        out.extend(tone(sample_rate, &[(tonic_midi + s) as f64], note_sec, 0.5));
    }
    clip(out, sample_rate)
}

/// Root-position triad voiced from octave 4 (MIDI 60..71 root).
pub fn triad_pitches(label: ChordLabel) -> Vec<f64> {
    match label {
        ChordLabel::NoChord => vec![],
        ChordLabel::Major(root) => {
            let r = 60 + root as i32;
            vec![r as f64, (r + 4) as f64, (r + 7) as f64]
        }
        ChordLabel::Minor(root) => {
            let r = 60 + root as i32;
            vec![r as f64, (r + 3) as f64, (r + 7) as f64]
        }
    }
}

/// Chords played back to back, each for `chord_sec`.
pub fn progression(sample_rate: u32, chords: &[ChordLabel], chord_sec: f64) -> AudioClip {
    let mut out = Vec::new();
    for &c in chords {
        let pitches = triad_pitches(c);
        if pitches.is_empty() {
            out.extend(vec![0.0; (chord_sec * sample_rate as f64).round() as usize]);
        } else {
            out.extend(tone(sample_rate, &pitches, chord_sec, 0.6));
        }
    }
    clip(out, sample_rate)
}

/// Mix two clips of equal rate sample-by-sample (length of the shorter).
pub fn mix(a: &AudioClip, b: &AudioClip) -> AudioClip {
    assert_eq!(a.sample_rate(), b.sample_rate());
    let samples = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| *x as f64 + *y as f64)
        .collect();
    clip(samples, a.sample_rate())
}

/// Scale every sample by `gain`.
pub fn gain(a: &AudioClip, gain: f64) -> AudioClip {
    clip(
        a.samples().iter().map(|&s| s as f64 * gain).collect(),
        a.sample_rate(),
    )
}
