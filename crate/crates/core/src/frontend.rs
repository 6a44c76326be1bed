//! Log-magnitude STFT features, feature normalization, and inter-channel
//! correlation.
//!
//! Frame `f` covers samples `[f·hop, f·hop + n_fft)`; there is no centering,
//! so a frame never looks past its last sample and appending samples never
//! changes earlier frames.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dataio::{CHANNELS, CHANNELS_PER_BAND};
use crate::error::{Error, Result};
use crate::tensor::{batch_norm2d, BatchNormStats, NormMode, Tensor};

pub const N_FFT: usize = 64;
pub const HOP: usize = 16;
pub const LOG_EPS: f64 = 1e-6;
pub const BINS: usize = N_FFT / 2 + 1;
/// Flattened features per band: 16 channels × 33 bins.
pub const BAND_FEATURES: usize = CHANNELS_PER_BAND * BINS;
pub const FEATURES: usize = CHANNELS * BINS;

/// Frames × (band, channel, bin) log-magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * FEATURES {
            return Err(Error::dim("spectrogram", &[frames, FEATURES], &[values.len()]));
        }
        Ok(Spectrogram { frames, values })
    }

    #[inline]
    pub fn get(&self, frame: usize, channel: usize, bin: usize) -> f64 {
        self.values[(frame * CHANNELS + channel) * BINS + bin]
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * FEATURES..(f + 1) * FEATURES]
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Spectrogram {
        Spectrogram {
            frames: end - start,
            values: self.values[start * FEATURES..end * FEATURES].to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, FEATURES], self.values.clone()).expect("shape")
    }
}

/// Number of frames produced for `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < N_FFT {
        0
    } else {
        (len - N_FFT) / HOP + 1
    }
}

/// Reusable STFT with a cached FFT plan and window.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Stft {
            fft,
            window: hann(N_FFT),
        }
    }

    /// Features for interleaved `len × 32` samples.
    pub fn log_spectrogram(&self, samples: &[i16]) -> Result<Spectrogram> {
        let len = samples.len() / CHANNELS;
        if len < N_FFT {
            return Err(Error::Input(format!("window of {len} samples is shorter than n_fft {N_FFT}")));
        }
        let frames = frame_count(len);
        let mut values = vec![0.0; frames * FEATURES];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            for c in 0..CHANNELS {
                for (n, b) in buf.iter_mut().enumerate() {
                    let x = samples[(f * HOP + n) * CHANNELS + c] as f64;
                    *b = Complex::new(x * self.window[n], 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                let out = &mut values[(f * CHANNELS + c) * BINS..(f * CHANNELS + c + 1) * BINS];
                for (o, b) in out.iter_mut().zip(&buf) {
                    *o = (LOG_EPS + b.norm()).ln();
                }
            }
        }
        Spectrogram::new(frames, values)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn log_spectrogram(samples: &[i16]) -> Result<Spectrogram> {
    Stft::new().log_spectrogram(samples)
}

/// Batch-normalizes spectrograms with one statistic per (band, channel).
///
/// Train mode normalizes by the statistics of the whole batch and updates
/// `stats`; eval mode uses the running statistics. Returns the normalized
/// spectrograms and whether eval ran on untouched initial statistics.
pub fn normalize(specs: &[&Spectrogram], stats: &mut BatchNormStats, mode: NormMode) -> Result<(Vec<Spectrogram>, bool)> {
    if stats.channels() != CHANNELS {
        return Err(Error::Config(format!("stats have {} channels, expected {CHANNELS}", stats.channels())));
    }
    if mode == NormMode::Eval {
        // Per-element affine map: each frame is normalized independently.
        let out = specs
            .iter()
            .map(|s| {
                let mut v = s.values.clone();
                for (i, x) in v.iter_mut().enumerate() {
                    *x = stats.apply((i / BINS) % CHANNELS, *x);
                }
                Spectrogram { frames: s.frames, values: v }
            })
            .collect();
        return Ok((out, stats.updates == 0));
    }
    let frames = specs.first().map_or(0, |s| s.frames);
    if specs.iter().any(|s| s.frames != frames) {
        return Err(Error::Input("train-mode normalization needs equal-length spectrograms".into()));
    }
    // [N, C, T, F] for the shared batch-norm routine.
    let n = specs.len();
    let mut data = vec![0.0; n * FEATURES * frames];
    for (b, s) in specs.iter().enumerate() {
        for t in 0..frames {
            for c in 0..CHANNELS {
                let dst = ((b * CHANNELS + c) * frames + t) * BINS;
                data[dst..dst + BINS].copy_from_slice(&s.values[(t * CHANNELS + c) * BINS..(t * CHANNELS + c + 1) * BINS]);
            }
        }
    }
    let x = Tensor::new(vec![n, CHANNELS, frames, BINS], data)?;
    let out = batch_norm2d(&x, stats, mode)?;
    let y = out.output.data();
    let specs = (0..n)
        .map(|b| {
            let mut v = vec![0.0; frames * FEATURES];
            for t in 0..frames {
                for c in 0..CHANNELS {
                    let src = ((b * CHANNELS + c) * frames + t) * BINS;
                    v[(t * CHANNELS + c) * BINS..(t * CHANNELS + c + 1) * BINS].copy_from_slice(&y[src..src + BINS]);
                }
            }
            Spectrogram { frames, values: v }
        })
        .collect();
    Ok((specs, out.used_initial_stats))
}

/// Pearson correlation between every pair of the 32 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Vec<f64>,
    /// Channels with zero variance; their off-diagonal entries are 0.
    pub constant: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * CHANNELS + j]
    }

    /// Mean |corr| over same-band pairs at cyclic distance `d`.
    pub fn mean_abs_at_distance(&self, d: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for band in 0..2 {
            for i in 0..CHANNELS_PER_BAND {
                let j = (i + d) % CHANNELS_PER_BAND;
                sum += self.get(band * 16 + i, band * 16 + j).abs();
                n += 1;
            }
        }
        sum / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..CHANNELS {
            let row: Vec<String> = (0..CHANNELS).map(|j| format!("{:.6}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn channel_correlation(samples: &[i16]) -> Result<CorrelationMatrix> {
    let len = samples.len() / CHANNELS;
    if len < 2 {
        return Err(Error::Input("correlation needs at least 2 samples".into()));
    }
    let mut mean = [0.0; CHANNELS];
    for frame in samples.chunks_exact(CHANNELS) {
        for (m, &v) in mean.iter_mut().zip(frame) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    let mut cov = vec![0.0; CHANNELS * CHANNELS];
    let mut centered = [0.0; CHANNELS];
    for frame in samples.chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            centered[c] = frame[c] as f64 - mean[c];
        }
        for i in 0..CHANNELS {
            for j in i..CHANNELS {
                cov[i * CHANNELS + j] += centered[i] * centered[j];
            }
        }
    }
    let constant: Vec<usize> = (0..CHANNELS).filter(|&c| cov[c * CHANNELS + c] == 0.0).collect();
    let mut values = vec![0.0; CHANNELS * CHANNELS];
    for i in 0..CHANNELS {
        values[i * CHANNELS + i] = 1.0;
        for j in i + 1..CHANNELS {
            let denom = (cov[i * CHANNELS + i] * cov[j * CHANNELS + j]).sqrt();
            let r = if denom > 0.0 {
                (cov[i * CHANNELS + j] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            values[i * CHANNELS + j] = r;
            values[j * CHANNELS + i] = r;
        }
    }
    Ok(CorrelationMatrix { values, constant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_session, GenConfig};

    fn tone(len: usize, bin: usize, amp: f64) -> Vec<i16> {
        let mut s = vec![0i16; len * CHANNELS];
        for t in 0..len {
            let v = amp * (2.0 * std::f64::consts::PI * bin as f64 * t as f64 / N_FFT as f64).sin();
            for c in 0..CHANNELS {
                s[t * CHANNELS + c] = v.round() as i16;
            }
        }
        s
    }

    #[test]
    fn zero_signal_is_log_eps() {
        let s = log_spectrogram(&vec![0; 200 * CHANNELS]).unwrap();
        assert!(s.values.iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn four_second_window_frame_count() {
        assert_eq!(frame_count(8000), 497);
        assert_eq!(log_spectrogram(&vec![0; 8000 * CHANNELS]).unwrap().frames, 497);
    }

    #[test]
    fn too_short_is_input_error() {
        assert!(matches!(log_spectrogram(&vec![0; 63 * CHANNELS]), Err(Error::Input(_))));
    }

    #[test]
    fn matches_direct_dft() {
        let sig: Vec<i16> = (0..100 * CHANNELS).map(|i| ((i * 7919) % 2001) as i16 - 1000).collect();
        let spec = log_spectrogram(&sig).unwrap();
        let w = hann(N_FFT);
        for &(f, c) in &[(0usize, 0usize), (2, 5), (frame_count(100) - 1, 31)] {
            for k in 0..BINS {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..N_FFT {
                    let x = sig[(f * HOP + n) * CHANNELS + c] as f64 * w[n];
                    let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / N_FFT as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                // Compare magnitudes: near-empty bins make log differences
                // meaningless.
                let expected = (re * re + im * im).sqrt();
                let got = spec.get(f, c, k).exp() - LOG_EPS;
                assert!((got - expected).abs() < 1e-7, "f{f} c{c} k{k}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn bin_centre_tone_peaks_at_its_bin() {
        for bin in [3, 8, 20] {
            let spec = log_spectrogram(&tone(400, bin, 1000.0)).unwrap();
            for f in 0..spec.frames {
                let row: Vec<f64> = (0..BINS).map(|k| spec.get(f, 4, k)).collect();
                let arg = (0..BINS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, bin);
            }
        }
    }

    #[test]
    fn appending_samples_keeps_earlier_frames() {
        let cfg = GenConfig {
            duration_s: 2.0,
            ..GenConfig::default()
        };
        let s = generate_session(&cfg, 1, 1).unwrap();
        let full = log_spectrogram(&s.samples).unwrap();
        let part = log_spectrogram(&s.samples[..1000 * CHANNELS]).unwrap();
        assert_eq!(part.values[..], full.values[..part.values.len()]);
    }

    #[test]
    fn correlation_basics() {
        let mut s = vec![0i16; 50 * CHANNELS];
        for t in 0..50 {
            let v = ((t * 37) % 23) as i16 - 11;
            s[t * CHANNELS] = v;
            s[t * CHANNELS + 1] = -v;
            s[t * CHANNELS + 2] = v;
        }
        let m = channel_correlation(&s).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert!((m.get(0, 1) + 1.0).abs() < 1e-12);
        assert!((m.get(0, 2) - 1.0).abs() < 1e-12);
        assert_eq!(m.get(0, 5), 0.0);
        assert!(m.constant.contains(&5));
        for i in 0..CHANNELS {
            for j in 0..CHANNELS {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn leakage_makes_neighbours_correlate() {
        for seed in 0..3 {
            let s = generate_session(&GenConfig::default(), seed, seed + 100).unwrap();
            let m = channel_correlation(&s.samples).unwrap();
            let (near, far) = (m.mean_abs_at_distance(1), m.mean_abs_at_distance(3));
            assert!(near - far >= 0.1, "seed {seed}: d1 {near:.3} d3 {far:.3}");
        }
    }

    #[test]
    fn train_normalization_zeroes_channel_means() {
        let cfg = GenConfig {
            duration_s: 2.0,
            ..GenConfig::default()
        };
        let a = log_spectrogram(&generate_session(&cfg, 1, 1).unwrap().samples).unwrap();
        let b = log_spectrogram(&generate_session(&cfg, 2, 2).unwrap().samples).unwrap();
        let mut stats = BatchNormStats::new(CHANNELS);
        let (out, _) = normalize(&[&a, &b], &mut stats, NormMode::Train).unwrap();
        for c in 0..CHANNELS {
            let mut sum = 0.0;
            let mut n = 0;
            for s in &out {
                for f in 0..s.frames {
                    for k in 0..BINS {
                        sum += s.get(f, c, k);
                        n += 1;
                    }
                }
            }
            assert!((sum / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_normalization_with_identity_stats() {
        let a = log_spectrogram(&tone(300, 5, 100.0)).unwrap();
        let mut stats = BatchNormStats::new(CHANNELS);
        stats.eps = 0.0;
        let (out, initial) = normalize(&[&a], &mut stats, NormMode::Eval).unwrap();
        assert!(initial);
        assert_eq!(out[0], a);
    }
}
