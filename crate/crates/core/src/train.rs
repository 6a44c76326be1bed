//! CTC training and CER evaluation.
//!
//! A training step jitters and rotates raw windows, computes batch-normalized
//! log spectrograms with frequency/time masking, runs the encoder on one tape
//! for the whole batch, and applies a clipped Adam update. Everything is
//! driven by seeded generators, so a run is bit-reproducible.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alphabet::emission_index;
use crate::augment::{rotate_spectrogram, spec_augment, temporal_alignment_jitter, AugmentConfig, Band};
use crate::ctc::{ctc_loss_on_tape, min_frames};
use crate::dataio::{generate_session, GenConfig, Session, Window};
use crate::decode::{apply_correction, beam_decode, greedy_decode, Corrector, DecodeConfig, LiteralGuard};
use crate::encoders::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::frontend::{frame_count, log_spectrogram, normalize, Spectrogram};
use crate::lm::NgramModel;
use crate::metrics::{align_text, AlignmentReport, CerTotals};
use crate::stream::{stream_session, StreamConfig};
use crate::tensor::{NormMode, Tape};

/// Which sessions train and which evaluate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Split {
    /// Sessions of `eval_users` evaluate; every other user trains.
    Generic { eval_users: Vec<u64> },
    /// Only `user`'s sessions; those in `eval_sessions` evaluate.
    Personalized { user: u64, eval_sessions: Vec<u64> },
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Generic { .. } => "generic",
            Split::Personalized { .. } => "personalized",
        }
    }

    /// Divides `sessions` into (train, eval). Both sides must be non-empty.
    pub fn partition<'s>(&self, sessions: &'s [Session]) -> Result<(Vec<&'s Session>, Vec<&'s Session>)> {
        let (train, eval): (Vec<&Session>, Vec<&Session>) = match self {
            Split::Generic { eval_users } => sessions.iter().partition(|s| !eval_users.contains(&s.user_seed)),
            Split::Personalized { user, eval_sessions } => sessions
                .iter()
                .filter(|s| s.user_seed == *user)
                .partition(|s| !eval_sessions.contains(&s.session_seed)),
        };
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Config(format!(
                "{} split leaves {} training and {} evaluation sessions",
                self.name(),
                train.len(),
                eval.len()
            )));
        }
        let overlap = match self {
            Split::Generic { .. } => {
                let users: BTreeSet<u64> = train.iter().map(|s| s.user_seed).collect();
                eval.iter().any(|s| users.contains(&s.user_seed))
            }
            Split::Personalized { .. } => {
                let ids: BTreeSet<u64> = train.iter().map(|s| s.session_seed).collect();
                eval.iter().any(|s| ids.contains(&s.session_seed))
            }
        };
        if overlap {
            return Err(Error::Config(format!("{} split has overlapping train and eval data", self.name())));
        }
        Ok((train, eval))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub split: Split,
    pub window_s: f64,
    pub hop_s: f64,
    /// Upper bound on optimizer steps per epoch; `None` runs every batch.
    pub max_steps_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig, split: Split) -> Self {
        TrainConfig {
            arch,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
            split,
            window_s: 4.0,
            hop_s: 2.0,
            max_steps_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.augment.validate()?;
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} and grad_clip {} must be positive",
                self.learning_rate, self.grad_clip
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.window_s > 0.0 && self.hop_s > 0.0) {
            return Err(Error::Config("window_s and hop_s must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// CTC target of a window: one column per raw key, backspaces included.
pub fn window_target(w: &Window) -> Vec<usize> {
    w.keys.iter().map(|&k| emission_index(k).expect("session keys are validated")).collect()
}

/// Windows a CTC loss can be computed on: at least one key, and enough
/// frames to emit them.
pub fn trainable(w: &Window) -> bool {
    !w.keys.is_empty() && min_frames(&window_target(w)) <= frame_count(w.len())
}

/// Cuts sessions into windows and drops the untrainable ones.
pub fn training_windows(sessions: &[&Session], window_s: f64, hop_s: f64) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(s.windows(window_s, hop_s)?.filter(trainable));
    }
    Ok(out)
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub augment: AugmentConfig,
    pub grad_clip: f64,
    /// Run each window through one randomly drawn rotation offset of the
    /// model instead of averaging over all of them.
    pub sample_offsets: bool,
    optimizer: Adam,
    rng: ChaCha8Rng,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: Model, learning_rate: f64, grad_clip: f64, augment: AugmentConfig, seed: u64) -> Result<Self> {
        augment.validate()?;
        if !(learning_rate > 0.0) || !(grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        let optimizer = Adam::new(learning_rate, model.params().iter().map(|p| p.numel()));
        Ok(Trainer {
            model,
            augment,
            grad_clip,
            sample_offsets: true,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
        })
    }

    fn features(&mut self, batch: &[&Window]) -> Result<Vec<Spectrogram>> {
        let aug = &self.augment;
        let mut specs = Vec::with_capacity(batch.len());
        for w in batch {
            let samples = if aug.jitter_max > 0 {
                let band = if self.rng.random_bool(0.5) { Band::Left } else { Band::Right };
                let shift = self.rng.random_range(0..=aug.jitter_max);
                temporal_alignment_jitter(&w.samples, shift, band)?
            } else {
                w.samples.clone()
            };
            let spec = log_spectrogram(&samples)?;
            let offset = aug.rotation_offsets[self.rng.random_range(0..aug.rotation_offsets.len())];
            specs.push(if offset == 0 { spec } else { rotate_spectrogram(&spec, offset) });
        }
        let refs: Vec<&Spectrogram> = specs.iter().collect();
        let (normed, _) = normalize(&refs, &mut self.model.norm, NormMode::Train)?;
        if aug.freq_masks + aug.time_masks == 0 {
            return Ok(normed);
        }
        Ok(normed.iter().map(|s| spec_augment(s, aug, &mut self.rng).0).collect())
    }

    /// One optimizer step on `batch` (equal-length windows). Returns the mean
    /// CTC loss before the update.
    pub fn step(&mut self, batch: &[&Window]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let specs = self.features(batch)?;
        let mut tape = Tape::new();
        let mut total = None;
        for (w, spec) in batch.iter().zip(&specs) {
            let all = &self.model.rotation_offsets;
            let offsets = if self.sample_offsets {
                vec![all[self.rng.random_range(0..all.len())]]
            } else {
                all.clone()
            };
            let logp = self.model.forward_tape(&mut tape, &spec.to_tensor(), &offsets, 0)?;
            let loss = ctc_loss_on_tape(&mut tape, logp, &window_target(w))?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step: self.steps });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = self.model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        for (id, g) in tape.param_grads() {
            grads[id].copy_from_slice(g);
        }
        if !grads.iter().flatten().all(|g| g.is_finite()) {
            return Err(Error::Diverged { step: self.steps });
        }
        clip_grad_norm(&mut grads, self.grad_clip);
        let mut params: Vec<&mut [f64]> = self.model.params_mut().iter_mut().map(|p| p.data_mut()).collect();
        self.optimizer.update(&mut params, &grads);
        self.steps += 1;
        Ok(value)
    }
}

/// Greedy CER of `model` on windows against their labels.
pub fn window_cer(model: &Model, windows: &[Window]) -> Result<CerTotals> {
    let mut totals = CerTotals::default();
    for w in windows {
        let lattice = model.forward(&log_spectrogram(&w.samples)?)?;
        totals.add(&align_text(&w.label, &greedy_decode(&lattice)));
    }
    Ok(totals)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: CerTotals,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_cer,S,D,I,N";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.eval.cer(),
            self.eval.substitutions,
            self.eval.deletions,
            self.eval.insertions,
            self.eval.ref_len
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model with the lowest evaluation CER seen.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
    /// Greedy CER of `best` on the training windows.
    pub train_cer: CerTotals,
    /// Set when a non-finite loss stopped training; `best` is the last good
    /// model.
    pub diverged_at: Option<usize>,
}

/// Full training run over `sessions` split per `cfg.split`.
pub fn train(cfg: &TrainConfig, sessions: &[Session]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_sessions, eval_sessions) = cfg.split.partition(sessions)?;
    let windows = training_windows(&train_sessions, cfg.window_s, cfg.hop_s)?;
    if windows.is_empty() {
        return Err(Error::Input("no training window contains a keystroke".into()));
    }
    let model = Model::new(cfg.arch.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.learning_rate, cfg.grad_clip, cfg.augment.clone(), cfg.seed ^ 0x7472_6169_6e)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f72_6465_72);
    let eval_owned: Vec<Session> = eval_sessions.iter().map(|s| (*s).clone()).collect();
    let eval_cfg = EvalConfig::default();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut diverged_at = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut order_rng);
        let mut losses = Vec::new();
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps_per_epoch.is_some_and(|m| i >= m) {
                break;
            }
            let batch: Vec<&Window> = chunk.iter().map(|&j| &windows[j]).collect();
            match trainer.step(&batch) {
                Ok(l) => losses.push(l),
                Err(Error::Diverged { step }) => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let report = evaluate(&trainer.model, &eval_owned, &eval_cfg)?;
        let row = EpochMetrics {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            eval: report.totals,
        };
        let cer = row.eval.cer();
        if best.as_ref().is_none_or(|(b, _, _)| cer < *b) {
            best = Some((cer, epoch, trainer.model.clone()));
        }
        log.push(row);
    }
    let (best, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (trainer.model, 0),
    };
    let train_cer = window_cer(&best, &windows)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        train_cer,
        diverged_at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// One forward pass over each whole session.
    Offline,
    /// The streaming engine.
    Online,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Offline => "offline",
            EvalMode::Online => "online",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(EvalMode::Offline),
            "online" => Ok(EvalMode::Online),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

/// How sessions are decoded during evaluation.
#[derive(Default)]
pub struct EvalConfig<'a> {
    /// Beam settings; `None` decodes greedily.
    pub beam: Option<DecodeConfig>,
    pub lm: Option<&'a NgramModel>,
    /// Streaming settings; `None` evaluates offline.
    pub online: Option<StreamConfig>,
    pub corrector: Option<&'a dyn Corrector>,
    pub guard: LiteralGuard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub user_seed: u64,
    pub session_seed: u64,
    pub hypothesis: String,
    pub report: AlignmentReport<char>,
    /// Corrector calls made for this session.
    pub correction_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub sessions: Vec<SessionResult>,
    /// Micro-average over sessions.
    pub totals: CerTotals,
    pub warnings: Vec<String>,
}

pub const EVAL_HEADER: &str = "user,session,mode,ref_len,S,D,I,cer";

impl EvalReport {
    pub fn cer(&self) -> f64 {
        self.totals.cer()
    }

    /// One row per session plus a final `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.sessions {
            s.push_str(&format!("{},{},{},{}\n", r.user_seed, r.session_seed, self.mode, r.report.csv_row()));
        }
        s.push_str(&format!("all,all,{},{}\n", self.mode, self.totals));
        s
    }
}

/// Decodes every session and scores it against its prompt.
pub fn evaluate(model: &Model, sessions: &[Session], cfg: &EvalConfig) -> Result<EvalReport> {
    if model.arch.alphabet_size != crate::alphabet::EMISSION_SIZE {
        return Err(Error::Config(format!(
            "checkpoint alphabet has {} columns, expected {}",
            model.arch.alphabet_size,
            crate::alphabet::EMISSION_SIZE
        )));
    }
    let mode = if cfg.online.is_some() { EvalMode::Online } else { EvalMode::Offline };
    let mut results = Vec::with_capacity(sessions.len());
    let mut totals = CerTotals::default();
    let mut warnings = Vec::new();
    for s in sessions {
        let mut text = match &cfg.online {
            Some(sc) => {
                let out = stream_session(s, model, sc, cfg.beam.as_ref(), cfg.lm, 400, false)?;
                out.events.last().map(|e| e.text.clone()).unwrap_or_default()
            }
            None => {
                let lattice = model.forward(&log_spectrogram(&s.samples)?)?;
                match &cfg.beam {
                    None => greedy_decode(&lattice),
                    Some(b) => beam_decode(&lattice, b, cfg.lm)?.text,
                }
            }
        };
        let mut calls = 0;
        if let (Some(c), Some(b)) = (cfg.corrector, &cfg.beam) {
            let out = apply_correction(&text, c, b.correction_mode, &cfg.guard);
            text = out.text;
            calls = out.calls;
            warnings.extend(out.warning);
        }
        let report = align_text(&s.prompt, &text);
        totals.add(&report);
        results.push(SessionResult {
            user_seed: s.user_seed,
            session_seed: s.session_seed,
            hypothesis: text,
            report,
            correction_calls: calls,
        });
    }
    Ok(EvalReport {
        mode,
        sessions: results,
        totals,
        warnings,
    })
}

/// `users × sessions_per_user` sessions with seeds derived from `seed`.
pub fn generate_dataset(cfg: &GenConfig, users: usize, sessions_per_user: usize, seed: u64) -> Result<Vec<Session>> {
    let mut out = Vec::with_capacity(users * sessions_per_user);
    for u in 0..users as u64 {
        let user_seed = seed.wrapping_mul(1000).wrapping_add(u);
        for k in 0..sessions_per_user as u64 {
            out.push(generate_session(cfg, user_seed, user_seed.wrapping_mul(1000).wrapping_add(k))?);
        }
    }
    Ok(out)
}
