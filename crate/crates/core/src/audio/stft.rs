use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::AudioClip;

const REFERENCE_RATE: f64 = 44_100.0;
const REFERENCE_FFT: f64 = 2048.0;
const REFERENCE_HOP: f64 = 512.0;

/// STFT geometry for a given sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl StftParams {
    /// 2048/512 at 44.1 kHz, scaled to the clip's rate.
    pub fn for_rate(sample_rate: u32) -> Self {
        let scale = sample_rate as f64 / REFERENCE_RATE;
        // even FFT length keeps the bin layout symmetric
        let n_fft = ((REFERENCE_FFT * scale / 2.0).round() as usize * 2).max(16);
        let hop = ((REFERENCE_HOP * scale).round() as usize).max(1);
        Self {
            n_fft,
            hop,
            sample_rate,
        }
    }

    /// Same hop as [`StftParams::for_rate`] with a window `factor` times
    /// longer, for finer frequency resolution at the same frame rate.
    pub fn widened(self, factor: usize) -> Self {
        Self { n_fft: self.n_fft * factor.max(1), ..self }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.n_fft as f64
    }
}

/// Magnitude spectrogram. Frame `t` is centred on sample `t * hop`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub params: StftParams,
    pub frames: Vec<Vec<f64>>,
}

impl Spectrogram {
    pub fn compute(clip: &AudioClip) -> Self {
        Self::with_params(clip, StftParams::for_rate(clip.sample_rate()))
    }

    pub fn with_params(clip: &AudioClip, params: StftParams) -> Self {
        let n_fft = params.n_fft;
        let hop = params.hop;
        let samples = clip.samples();
        let half = n_fft / 2;
        let n_frames = 1 + samples.len() / hop;

        let window: Vec<f64> = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
            .collect();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let centre = (t * hop) as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = centre - half as isize + i as isize;
                let x = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize] as f64
                } else {
                    0.0
                };
                *slot = Complex::new(x * window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            frames.push(buf[..params.n_bins()].iter().map(|c| c.norm()).collect());
        }
        Self { params, frames }
    }
}
