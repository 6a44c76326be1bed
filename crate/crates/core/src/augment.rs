//! Training-time augmentations: inter-hand alignment jitter, cyclic electrode
//! rotation, and spectrogram frequency/time masking.

use rand::Rng;

use crate::dataio::{CHANNELS, CHANNELS_PER_BAND};
use crate::error::{Error, Result};
use crate::frontend::{Spectrogram, BINS, FEATURES};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Largest inter-hand delay in samples.
    pub jitter_max: usize,
    pub rotation_offsets: Vec<i32>,
    pub freq_masks: usize,
    pub freq_mask_max: usize,
    pub time_masks: usize,
    pub time_mask_max: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_max: 120,
            rotation_offsets: vec![-1, 0, 1],
            freq_masks: 2,
            freq_mask_max: 4,
            time_masks: 2,
            time_mask_max: 25,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentConfig {
            jitter_max: 0,
            rotation_offsets: vec![0],
            freq_masks: 0,
            freq_mask_max: 0,
            time_masks: 0,
            time_mask_max: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_offsets.iter().any(|o| o.abs() >= 16) {
            return Err(Error::Config(format!("rotation offsets {:?} must satisfy |o| < 16", self.rotation_offsets)));
        }
        if self.rotation_offsets.is_empty() {
            return Err(Error::Config("rotation offsets are empty".into()));
        }
        if self.freq_masks > 2 || self.time_masks > 2 {
            return Err(Error::Config("at most 2 frequency and 2 time masks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Left,
    Right,
}

impl Band {
    fn offset(self) -> usize {
        match self {
            Band::Left => 0,
            Band::Right => CHANNELS_PER_BAND,
        }
    }
}

/// Delays one band's 16 channels by `jitter` samples (zero-filled at the
/// start, truncated at the end).
pub fn temporal_alignment_jitter(samples: &[i16], jitter: usize, band: Band) -> Result<Vec<i16>> {
    let len = samples.len() / CHANNELS;
    if jitter > len {
        return Err(Error::Input(format!("jitter {jitter} exceeds window length {len}")));
    }
    let mut out = samples.to_vec();
    let b = band.offset();
    for t in 0..len {
        for c in b..b + CHANNELS_PER_BAND {
            out[t * CHANNELS + c] = if t >= jitter {
                samples[(t - jitter) * CHANNELS + c]
            } else {
                0
            };
        }
    }
    Ok(out)
}

/// Source channel for output channel `c` under a cyclic within-band
/// rotation by `offset`.
#[inline]
pub fn rotated_source(c: usize, offset: i32) -> usize {
    let band = c / CHANNELS_PER_BAND * CHANNELS_PER_BAND;
    let i = (c % CHANNELS_PER_BAND) as i32;
    band + (i - offset).rem_euclid(CHANNELS_PER_BAND as i32) as usize
}

/// Channel `i` takes the old channel `i − offset` (mod 16) of its band.
pub fn rotate_signal(samples: &[i16], offset: i32) -> Vec<i16> {
    let mut out = vec![0; samples.len()];
    for (dst, src) in out.chunks_exact_mut(CHANNELS).zip(samples.chunks_exact(CHANNELS)) {
        for (c, d) in dst.iter_mut().enumerate() {
            *d = src[rotated_source(c, offset)];
        }
    }
    out
}

/// Spectrogram version of [`rotate_signal`].
pub fn rotate_spectrogram(spec: &Spectrogram, offset: i32) -> Spectrogram {
    let mut values = vec![0.0; spec.values.len()];
    for (dst, src) in values.chunks_exact_mut(FEATURES).zip(spec.values.chunks_exact(FEATURES)) {
        for c in 0..CHANNELS {
            let s = rotated_source(c, offset);
            dst[c * BINS..(c + 1) * BINS].copy_from_slice(&src[s * BINS..(s + 1) * BINS]);
        }
    }
    Spectrogram {
        frames: spec.frames,
        values,
    }
}

/// Column permutation realizing a rotation on flattened `(channel, bin)`
/// features: `out[j] = in[perm[j]]`.
pub fn rotation_permutation(offset: i32) -> Vec<usize> {
    (0..FEATURES)
        .map(|j| rotated_source(j / BINS, offset) * BINS + j % BINS)
        .collect()
}

/// Where the masks of one [`spec_augment`] call landed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlacement {
    /// (channel, first bin, width)
    pub freq: Vec<(usize, usize, usize)>,
    /// (first frame, width)
    pub time: Vec<(usize, usize)>,
}

/// Frequency and time masking. Masked cells take their channel's mean over
/// the spectrogram; everything else is left bit-identical.
pub fn spec_augment<R: Rng>(spec: &Spectrogram, cfg: &AugmentConfig, rng: &mut R) -> (Spectrogram, MaskPlacement) {
    let mut out = spec.clone();
    let mut placement = MaskPlacement::default();
    if spec.frames == 0 {
        return (out, placement);
    }
    let mut means = [0.0; CHANNELS];
    for f in 0..spec.frames {
        for (c, m) in means.iter_mut().enumerate() {
            *m += spec.frame(f)[c * BINS..(c + 1) * BINS].iter().sum::<f64>();
        }
    }
    means.iter_mut().for_each(|m| *m /= (spec.frames * BINS) as f64);

    for _ in 0..cfg.freq_masks {
        let width = rng.random_range(0..=cfg.freq_mask_max.min(BINS));
        let c = rng.random_range(0..CHANNELS);
        let start = rng.random_range(0..=BINS - width);
        placement.freq.push((c, start, width));
        for f in 0..spec.frames {
            let row = &mut out.values[f * FEATURES + c * BINS..f * FEATURES + (c + 1) * BINS];
            row[start..start + width].fill(means[c]);
        }
    }
    for _ in 0..cfg.time_masks {
        let width = rng.random_range(0..=cfg.time_mask_max.min(spec.frames));
        let start = rng.random_range(0..=spec.frames - width);
        placement.time.push((start, width));
        for f in start..start + width {
            for c in 0..CHANNELS {
                out.values[f * FEATURES + c * BINS..f * FEATURES + (c + 1) * BINS].fill(means[c]);
            }
        }
    }
    (out, placement)
}
