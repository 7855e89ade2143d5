use super::stft::Spectrogram;
use super::{AudioClip, AudioError, Result};

/// Per-frame onset strength (spectral flux).
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetEnvelope {
    values: Vec<f64>,
    frame_rate: f64,
}

impl OnsetEnvelope {
    pub fn new(values: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(AudioError::InvalidArgument("frame rate must be positive".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(AudioError::InvalidArgument(
                "onset values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values, frame_rate })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn duration_sec(&self) -> f64 {
        self.values.len() as f64 / self.frame_rate
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }
}

/// Half-wave rectified spectral flux of the log-compressed magnitude spectrum.
pub fn onset_envelope(clip: &AudioClip) -> Result<OnsetEnvelope> {
    clip.require_duration(1.0)?;
    let spec = Spectrogram::compute(clip);
    let log_frames: Vec<Vec<f64>> = spec
        .frames
        .iter()
        .map(|f| f.iter().map(|m| m.ln_1p()).collect())
        .collect();
    let mut values = Vec::with_capacity(log_frames.len());
    values.push(0.0);
    for pair in log_frames.windows(2) {
        let flux: f64 = pair[1]
            .iter()
            .zip(&pair[0])
            .map(|(cur, prev)| (cur - prev).max(0.0))
            .sum();
        values.push(flux);
    }
    OnsetEnvelope::new(values, spec.params.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth;

    #[test]
    fn silence_gives_zero_envelope() {
        let clip = AudioClip::new(vec![0.0; 44100 * 2], 44100).unwrap();
        let env = onset_envelope(&clip).unwrap();
        assert!(env.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_peak_located() {
        let mut samples = vec![0.0f32; 44100 * 2];
        samples[44100] = 1.0;
        let env = onset_envelope(&AudioClip::new(samples, 44100).unwrap()).unwrap();
        let argmax = env
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let expected = 1.0 * env.frame_rate();
        assert!(
            (argmax as f64 - expected).abs() <= 1.0,
            "argmax {argmax} expected {expected}"
        );
    }

    #[test]
    fn stationary_noise_is_flat() {
        let clip = synth::white_noise(44100, 3.0, 0.3, 11);
        let env = onset_envelope(&clip).unwrap();
        let tail = &env.values()[10..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        let cv = var.sqrt() / mean;
        assert!(cv < 0.5, "coefficient of variation {cv}");
    }

    #[test]
    fn too_short() {
        let clip = AudioClip::new(vec![0.0; 22050], 44100).unwrap();
        assert!(matches!(
            onset_envelope(&clip),
            Err(AudioError::InsufficientAudio { .. })
        ));
    }
}
