use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running per-channel statistics for 2-D batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of train-mode updates applied so far.
    pub updates: u64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Eval-mode normalization of a single value from channel `c`.
    #[inline]
    pub fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.running_mean[c]) / (self.running_var[c] + self.eps).sqrt()
    }

    /// Folds one batch's (biased mean, unbiased variance) into the running
    /// estimates.
    pub fn update(&mut self, mean: &[f64], unbiased_var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub output: Tensor,
    /// Set when eval mode ran before any train step, i.e. on the initial
    /// mean-0 / var-1 statistics.
    pub used_initial_stats: bool,
}

/// Per-channel mean and biased variance of `[N×C×T×F]`.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("batch_norm2d", s, &[0, 0, 0, 0]));
    }
    let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
    let count = n * inner;
    let xv = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|b| {
            let o = (b * c + ch) * inner;
            xv[o..o + inner].iter()
        });
        let mu = vals.clone().sum::<f64>() / count as f64;
        var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
        mean[ch] = mu;
    }
    Ok((mean, var, count))
}

/// Batch normalization over `[N×C×T×F]` (no affine).
///
/// Train mode normalizes with batch statistics and folds them into `stats`
/// with its momentum; eval mode uses the running statistics.
pub fn batch_norm2d(x: &Tensor, stats: &mut BatchNormStats, mode: NormMode) -> Result<BatchNormOutput> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[1] != stats.channels() {
        return Err(Error::dim("batch_norm2d", &s, &[stats.channels()]));
    }
    let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
    let (mean, rstd, used_initial) = match mode {
        NormMode::Train => {
            let (mean, var, count) = channel_moments(x)?;
            if count < 2 {
                return Err(Error::Input("batch norm needs at least 2 values per channel".into()));
            }
            let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
            let unbiased: Vec<f64> = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
            stats.update(&mean, &unbiased);
            (mean, rstd, false)
        }
        NormMode::Eval => {
            let rstd = stats.running_var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
            (stats.running_mean.clone(), rstd, stats.updates == 0)
        }
    };
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * inner;
            for i in o..o + inner {
                out[i] = (xv[i] - mean[ch]) * rstd[ch];
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::new(s, out)?,
        used_initial_stats: used_initial,
    })
}
