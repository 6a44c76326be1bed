//! Synthetic sEMG sessions: generation, the `EMGS` container, and windowing.

mod format;
mod generator;

pub use format::{decode_session, encode_session, read_session, write_session, SESSION_MAGIC};
pub use generator::{generate_session, render, GenConfig, KeyProfile, UserProfile, WORDS};

use crate::alphabet::apply_backspace;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 2000;
pub const CHANNELS: usize = 32;
pub const CHANNELS_PER_BAND: usize = 16;

/// A keystroke at a sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEvent {
    pub timestamp: u64,
    pub key: char,
}

/// A recording: 32 channels of 16-bit samples, interleaved frame-major
/// (`samples[t * 32 + c]`), plus the keystrokes typed during it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
    pub events: Vec<KeyEvent>,
    pub prompt: String,
    pub user_seed: u64,
    pub session_seed: u64,
}

impl Session {
    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn frame(&self, t: usize) -> &[i16] {
        &self.samples[t * CHANNELS..(t + 1) * CHANNELS]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect()
    }

    /// Checks the structural invariants a session must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() % CHANNELS != 0 {
            return Err(Error::Input(format!("{} samples is not a multiple of {CHANNELS} channels", self.samples.len())));
        }
        for w in self.events.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::Input(format!("event timestamps not increasing at {}", w[1].timestamp)));
            }
        }
        if let Some(e) = self.events.iter().find(|e| !crate::alphabet::is_key(e.key)) {
            return Err(Error::Input(format!("event key {:?} outside the alphabet", e.key)));
        }
        if apply_backspace(self.events.iter().map(|e| e.key)) != self.prompt {
            return Err(Error::Input("events do not reproduce the prompt".into()));
        }
        Ok(())
    }

    /// Sliding windows of `window_s` seconds every `hop_s` seconds; the final
    /// partial window is dropped.
    pub fn windows(&self, window_s: f64, hop_s: f64) -> Result<WindowIter<'_>> {
        let sr = self.sample_rate as f64;
        let width = (window_s * sr).round() as usize;
        let hop = (hop_s * sr).round() as usize;
        if width == 0 || hop == 0 {
            return Err(Error::Config(format!("window {window_s} s / hop {hop_s} s round to zero samples")));
        }
        if width > self.len() {
            return Err(Error::Config(format!(
                "window {window_s} s exceeds session duration {} s",
                self.duration_s()
            )));
        }
        Ok(WindowIter {
            session: self,
            width,
            hop,
            start: 0,
        })
    }
}

/// One training/evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    /// `len × 32` interleaved samples.
    pub samples: Vec<i16>,
    /// Raw keys (including backspaces) whose timestamps fall in the window.
    pub keys: Vec<char>,
    /// Post-backspace text of `keys`.
    pub label: String,
}

impl Window {
    pub fn len(&self) -> usize {
        self.samples.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub struct WindowIter<'a> {
    session: &'a Session,
    width: usize,
    hop: usize,
    start: usize,
}

impl Iterator for WindowIter<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        let (start, end) = (self.start, self.start + self.width);
        if end > self.session.len() {
            return None;
        }
        self.start += self.hop;
        let keys: Vec<char> = self
            .session
            .events
            .iter()
            .filter(|e| (start as u64..end as u64).contains(&e.timestamp))
            .map(|e| e.key)
            .collect();
        Some(Window {
            start,
            samples: self.session.samples[start * CHANNELS..end * CHANNELS].to_vec(),
            label: apply_backspace(keys.iter().copied()),
            keys,
        })
    }
}

/// `window_iter` as a free function.
pub fn window_iter(s: &Session, window_s: f64, hop_s: f64) -> Result<WindowIter<'_>> {
    s.windows(window_s, hop_s)
}
