use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, DspError};
use crate::Scalar;

/// STFT and mel-filterbank settings. Defaults: 16 kHz, 2048-point Hann
/// window, hop 160 (100 frames/s), 229 bins over 30 Hz to 8 kHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub mel_bins: usize,
    pub power_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            hop: 160,
            f_min: 30.0,
            f_max: 8000.0,
            mel_bins: 229,
            power_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn frames_per_second(&self) -> f64 {
        f64::from(self.sample_rate) / self.hop as f64
    }

    /// One frame per hop-spaced center inside the clip: `ceil(len / hop)`.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    fn validate(&self) -> Result<(), DspError> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.n_fft < 2 || self.hop == 0 || self.mel_bins == 0 {
            return Err(DspError::Config(format!("{self:?}")));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(DspError::Config(format!(
                "mel range {}..{} Hz outside 0..{nyquist} Hz",
                self.f_min, self.f_max
            )));
        }
        if !(self.power_floor > 0.0) {
            return Err(DspError::Config("power floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T> {
    /// Frames by mel bins, natural-log power.
    pub values: Array2<T>,
    pub frames_per_second: f64,
    pub mel_bins: usize,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = 15.0;
// ln(6.4) / 27
const LOGSTEP: f64 = 0.068_751_777_420_949_12;

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / LOGSTEP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * LOGSTEP).exp()
    }
}

/// Triangular, area-normalized filters stored sparsely as
/// `(first FFT bin, weights)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub filters: Vec<(usize, Vec<f64>)>,
    pub centers_hz: Vec<f64>,
    pub fft_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let fft_bins = cfg.n_fft / 2 + 1;
        let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.f_max);
        let points: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.mel_bins);
        for m in 0..cfg.mel_bins {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (right - left);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..fft_bins {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                let w = rise.min(fall).max(0.0) * norm;
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Self {
            filters,
            centers_hz: points[1..=cfg.mel_bins].to_vec(),
            fft_bins,
        }
    }

    /// Dense `mel_bins x fft_bins` matrix.
    pub fn dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.filters.len(), self.fft_bins));
        for (m, (start, w)) in self.filters.iter().enumerate() {
            for (i, &v) in w.iter().enumerate() {
                out[[m, start + i]] = v;
            }
        }
        out
    }
}

struct Stft<T: Scalar> {
    fft: Arc<dyn Fft<T>>,
    window: Vec<T>,
}

impl<T: Scalar> Stft<T> {
    fn new(n_fft: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        // periodic Hann
        let window = (0..n_fft)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / n_fft as f64;
                T::lit(0.5 - 0.5 * phase.cos())
            })
            .collect();
        Self { fft, window }
    }
}

/// Centered STFT with reflect padding, power spectrum, mel projection and
/// `ln(max(power, floor))`. Frame `t` is centered on sample `t * hop`, so a
/// 10.01 s clip at hop 160 gives 1001 frames aligned with the piano-roll
/// grid.
pub fn log_mel<T: Scalar>(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram<T>, DspError> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(DspError::SampleRate {
            expected: cfg.sample_rate,
            found: clip.sample_rate,
        });
    }
    let n = clip.samples.len();
    if n < cfg.n_fft {
        return Err(DspError::TooShort {
            samples: n,
            window: cfg.n_fft,
        });
    }
    let pad = cfg.n_fft / 2;
    let mut padded: Vec<T> = Vec::with_capacity(n + 2 * pad);
    padded.extend((1..=pad).rev().map(|i| T::lit(f64::from(clip.samples[i]))));
    padded.extend(clip.samples.iter().map(|&s| T::lit(f64::from(s))));
    padded.extend((1..=pad).map(|i| T::lit(f64::from(clip.samples[n - 1 - i]))));

    let bank = MelFilterbank::new(cfg);
    let weights: Vec<(usize, Vec<T>)> = bank
        .filters
        .iter()
        .map(|(s, w)| (*s, w.iter().map(|&v| T::lit(v)).collect()))
        .collect();
    let stft = Stft::<T>::new(cfg.n_fft);
    let frames = cfg.frame_count(n);
    let floor = T::lit(cfg.power_floor);
    let mut values = Array2::zeros((frames, cfg.mel_bins));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.n_fft];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); stft.fft.get_inplace_scratch_len()];
    let mut power = vec![T::zero(); bank.fft_bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(padded[start + i] * stft.window[i], T::zero());
        }
        stft.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, (s, w)) in weights.iter().enumerate() {
            let e: T = w.iter().zip(&power[*s..]).map(|(&a, &b)| a * b).sum();
            values[[t, m]] = e.max(floor).ln();
        }
    }
    Ok(MelSpectrogram {
        values,
        frames_per_second: cfg.frames_per_second(),
        mel_bins: cfg.mel_bins,
    })
}
