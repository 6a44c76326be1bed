use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{KeyEvent, Session, CHANNELS, CHANNELS_PER_BAND, SAMPLE_RATE};
use crate::alphabet::{apply_backspace, BACKSPACE, KEYS};
use crate::error::{Error, Result};

/// Bundled prompt vocabulary, one word per line.
pub const WORDS: &str = include_str!("../../assets/words.txt");

const BASE_AMPLITUDE: f64 = 2500.0;
// Keeps the first burst clear of the recording start.
const FIRST_KEY_S: f64 = 0.2;
const TEMPLATE_DOMAIN: u64 = 0x5445_4d50_4c41_5445;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub duration_s: f64,
    /// Mean keystrokes per second.
    pub typing_rate: f64,
    /// Exponential decay of the burst envelope over its length.
    pub template_sharpness: f64,
    /// Gaussian noise standard deviation in ADC units.
    pub noise_std: f64,
    /// Fraction of a burst copied onto each cyclic neighbour channel.
    pub leakage: f64,
    pub lead_time_ms: f64,
    /// Probability of a wrong key followed by a backspace before a keystroke.
    pub typo_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            duration_s: 60.0,
            typing_rate: 3.0,
            template_sharpness: 3.0,
            noise_std: 40.0,
            leakage: 0.3,
            lead_time_ms: 40.0,
            typo_rate: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.leakage) {
            return Err(Error::Config(format!("leakage {} outside [0, 0.5)", self.leakage)));
        }
        if !(self.lead_time_ms >= 0.0) {
            return Err(Error::Config(format!("lead_time_ms {} is negative", self.lead_time_ms)));
        }
        if !(self.typing_rate > 0.0) {
            return Err(Error::Config(format!("typing_rate {} must be positive", self.typing_rate)));
        }
        if !(self.noise_std >= 0.0) || !(self.duration_s > 0.0) || !(0.0..1.0).contains(&self.typo_rate) {
            return Err(Error::Config("noise_std, duration_s and typo_rate must be in range".into()));
        }
        Ok(())
    }
}

/// Where a key lives on the canonical layout: hand, column, row.
fn layout(key: char) -> (usize, usize, usize) {
    const LEFT: [&str; 3] = ["qwert", "asdfg", "zxcvb"];
    const RIGHT: [&str; 3] = ["pouiy", "'lkjh", "\u{8} \0mn"];
    for (band, rows) in [LEFT, RIGHT].iter().enumerate() {
        for (row, keys) in rows.iter().enumerate() {
            if let Some(col) = keys.chars().position(|c| c == key) {
                return (band, col, row);
            }
        }
    }
    unreachable!("key {key:?} missing from layout")
}

/// One key's burst as seen on every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyProfile {
    pub key: char,
    pub frequency_hz: f64,
    pub length: usize,
    pub phase: f64,
    /// Per-channel amplitude (zero off the key's footprint).
    pub weights: [f64; CHANNELS],
}

impl KeyProfile {
    /// Unquantized burst, `length × 32` interleaved.
    pub fn burst(&self, sharpness: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.length * CHANNELS];
        let l = self.length as f64;
        for tau in 0..self.length {
            let x = tau as f64 / l;
            let env = (-sharpness * x).exp() * (PI * x).sin();
            let osc = (2.0 * PI * self.frequency_hz * tau as f64 / SAMPLE_RATE as f64 + self.phase).sin();
            for (c, w) in self.weights.iter().enumerate() {
                out[tau * CHANNELS + c] = w * env * osc;
            }
        }
        out
    }
}

/// A simulated user's physiology: one burst profile per key.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub keys: Vec<KeyProfile>,
}

impl UserProfile {
    /// Canonical layout perturbed by `user_seed`: a per-band electrode
    /// rotation, gain, frequency scale, and per-key burst length, footprint
    /// and phase.
    pub fn new(user_seed: u64, leakage: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed ^ TEMPLATE_DOMAIN);
        let rotation = [rng.random_range(-1i64..=1), rng.random_range(-1i64..=1)];
        let gain = rng.random_range(0.75..1.25);
        let freq_scale = rng.random_range(0.93..1.07);
        let keys = KEYS
            .iter()
            .map(|&key| {
                let (band, col, row) = layout(key);
                let base_hz = [80.0, 200.0, 380.0][row] * (1.0 + 0.04 * (col as f64 - 2.0) / 2.0);
                let primaries = rng.random_range(2..=4usize);
                let length_ms = rng.random_range(80.0..150.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let center = (3 * col) as i64 + rotation[band];
                let mut weights = [0.0; CHANNELS];
                let at = |off: i64| band * CHANNELS_PER_BAND + (center + off).rem_euclid(16) as usize;
                for p in 0..primaries as i64 {
                    weights[at(p)] = BASE_AMPLITUDE * gain * (1.0 - 0.15 * p as f64);
                }
                let edge = [(at(-1), at(0)), (at(primaries as i64), at(primaries as i64 - 1))];
                for (neighbour, source) in edge {
                    weights[neighbour] += leakage * weights[source];
                }
                KeyProfile {
                    key,
                    frequency_hz: base_hz * freq_scale,
                    length: (length_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize,
                    phase,
                    weights,
                }
            })
            .collect();
        UserProfile { keys }
    }

    pub fn key(&self, key: char) -> &KeyProfile {
        self.keys.iter().find(|k| k.key == key).expect("alphabet key")
    }
}

/// Renders `events` for `user` into a `n_samples × 32` signal. Bursts start
/// `lead_time_ms` before each event; noise comes from `noise_rng`.
pub fn render(
    cfg: &GenConfig,
    user: &UserProfile,
    events: &[KeyEvent],
    n_samples: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Vec<i16>> {
    let lead = (cfg.lead_time_ms * SAMPLE_RATE as f64 / 1000.0).round() as i64;
    let mut acc = vec![0.0; n_samples * CHANNELS];
    for e in events {
        let profile = user.key(e.key);
        let burst = profile.burst(cfg.template_sharpness);
        let start = e.timestamp as i64 - lead;
        for tau in 0..profile.length {
            let t = start + tau as i64;
            if t < 0 || t as usize >= n_samples {
                continue;
            }
            let t = t as usize;
            for c in 0..CHANNELS {
                acc[t * CHANNELS + c] += burst[tau * CHANNELS + c];
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut acc {
            *v += normal.sample(noise_rng);
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| v.round().clamp(-32767.0, 32767.0) as i16)
        .collect())
}

fn words() -> Vec<&'static str> {
    WORDS.lines().filter(|w| !w.is_empty()).collect()
}

/// Generates a session: words typed at `typing_rate` with occasional
/// corrected typos, rendered with the user's key profiles plus noise.
pub fn generate_session(cfg: &GenConfig, user_seed: u64, session_seed: u64) -> Result<Session> {
    cfg.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = (cfg.duration_s * sr).round() as usize;
    let user = UserProfile::new(user_seed, cfg.leakage);
    let longest = user.keys.iter().map(|k| k.length).max().unwrap_or(0) as f64 / sr;
    // An event fits when its whole burst lies inside the recording.
    let last_allowed = cfg.duration_s - longest + cfg.lead_time_ms / 1000.0;
    if FIRST_KEY_S.max(cfg.lead_time_ms / 1000.0) > last_allowed {
        return Err(Error::EmptySession {
            duration_s: cfg.duration_s,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    let vocab = words();
    let mut keys: Vec<char> = Vec::new();
    let mut t = FIRST_KEY_S.max(cfg.lead_time_ms / 1000.0);
    let mut events = Vec::new();
    let mean_gap = 1.0 / cfg.typing_rate;
    'typing: loop {
        if !keys.is_empty() || !events.is_empty() {
            keys.push(' ');
        }
        let word = vocab[rng.random_range(0..vocab.len())];
        keys.extend(word.chars());
        while let Some(k) = keys.first().copied() {
            let mut stroke = vec![k];
            if rng.random_bool(cfg.typo_rate) {
                let wrong = loop {
                    let c = KEYS[rng.random_range(0..KEYS.len() - 1)];
                    if c != k && c != BACKSPACE {
                        break c;
                    }
                };
                stroke = vec![wrong, BACKSPACE, k];
            }
            for key in stroke {
                if t > last_allowed {
                    break 'typing;
                }
                events.push(KeyEvent {
                    timestamp: (t * sr).round() as u64,
                    key,
                });
                t += mean_gap * rng.random_range(0.6..1.4);
            }
            keys.remove(0);
        }
    }
    // Never end on a dangling space.
    while events.last().is_some_and(|e| e.key == ' ') {
        events.pop();
    }
    if events.is_empty() {
        return Err(Error::EmptySession {
            duration_s: cfg.duration_s,
        });
    }
    let samples = render(cfg, &user, &events, n, &mut rng)?;
    let prompt = apply_backspace(events.iter().map(|e| e.key));
    Ok(Session {
        sample_rate: SAMPLE_RATE,
        samples,
        events,
        prompt,
        user_seed,
        session_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GenConfig {
        GenConfig {
            noise_std: 0.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn layout_covers_every_key_once() {
        let mut seen = std::collections::HashSet::new();
        for &k in KEYS.iter() {
            assert!(seen.insert(layout(k)), "{k:?} collides");
        }
    }

    #[test]
    fn same_seeds_same_session() {
        let cfg = GenConfig {
            duration_s: 10.0,
            ..GenConfig::default()
        };
        assert_eq!(generate_session(&cfg, 3, 4).unwrap(), generate_session(&cfg, 3, 4).unwrap());
        assert_ne!(generate_session(&cfg, 3, 4).unwrap(), generate_session(&cfg, 3, 5).unwrap());
    }

    #[test]
    fn noise_free_single_keystroke_is_the_template() {
        let cfg = quiet();
        let user = UserProfile::new(9, cfg.leakage);
        let e = KeyEvent { timestamp: 1000, key: 'f' };
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sig = render(&cfg, &user, &[e], n, &mut rng).unwrap();
        let profile = user.key('f');
        let burst = profile.burst(cfg.template_sharpness);
        let start = 1000 - 80;
        for t in 0..n {
            for c in 0..CHANNELS {
                let expected = if (start..start + profile.length).contains(&t) {
                    burst[(t - start) * CHANNELS + c].round() as i16
                } else {
                    0
                };
                assert_eq!(sig[t * CHANNELS + c], expected, "t={t} c={c}");
            }
        }
        assert!(sig.iter().any(|&v| v != 0));
    }

    #[test]
    fn prompt_matches_events() {
        let cfg = GenConfig {
            typo_rate: 0.3,
            ..GenConfig::default()
        };
        let s = generate_session(&cfg, 1, 2).unwrap();
        s.validate().unwrap();
        assert!(s.events.iter().any(|e| e.key == BACKSPACE));
        assert!(!s.prompt.contains(BACKSPACE));
    }

    #[test]
    fn too_short_is_empty_session() {
        let cfg = GenConfig {
            duration_s: 0.1,
            ..GenConfig::default()
        };
        assert!(matches!(generate_session(&cfg, 1, 1), Err(Error::EmptySession { .. })));
    }

    #[test]
    fn templates_depend_only_on_user_seed() {
        let cfg = quiet();
        let a = generate_session(&cfg, 5, 1).unwrap();
        let b = generate_session(&cfg, 5, 2).unwrap();
        // Find an isolated occurrence of the same key in each and compare
        // the bursts sample by sample.
        let isolated = |s: &Session, key: char| {
            let ev = &s.events;
            (0..ev.len())
                .find(|&i| {
                    ev[i].key == key
                        && (i == 0 || ev[i].timestamp - ev[i - 1].timestamp > 400)
                        && (i + 1 == ev.len() || ev[i + 1].timestamp - ev[i].timestamp > 400)
                })
                .map(|i| ev[i].timestamp as usize)
        };
        let mut compared = 0;
        for &k in &['e', 't', 'a', 'o', ' '] {
            if let (Some(ta), Some(tb)) = (isolated(&a, k), isolated(&b, k)) {
                let len = UserProfile::new(5, cfg.leakage).key(k).length;
                let sa = &a.samples[(ta - 80) * CHANNELS..(ta - 80 + len) * CHANNELS];
                let sb = &b.samples[(tb - 80) * CHANNELS..(tb - 80 + len) * CHANNELS];
                assert_eq!(sa, sb);
                compared += 1;
            }
        }
        assert!(compared > 0);
        assert_ne!(UserProfile::new(5, 0.3), UserProfile::new(6, 0.3));
    }
}
