//! Greedy and LM-fused prefix beam-search decoding, plus the word/sentence
//! correction layer.

mod correction;
pub mod synthetic;

pub use correction::{
    apply_correction, mock_correct, osa_distance, CorrectionMode, CorrectionOutcome, Corrector, HttpCorrector,
    LiteralGuard, MockCorrector,
};

use std::collections::HashMap;

use crate::alphabet::{BACKSPACE, BLANK, KEYS};
use crate::ctc::EmissionLattice;
use crate::error::{Error, Result};
use crate::lm::NgramModel;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// LM weight α.
    pub lm_weight: f64,
    /// Per-character bonus β.
    pub length_bonus: f64,
    pub correction_mode: CorrectionMode,
    pub literal_mode: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 32,
            lm_weight: 0.5,
            length_bonus: 0.0,
            correction_mode: CorrectionMode::None,
            literal_mode: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.lm_weight >= 0.0) || !self.length_bonus.is_finite() {
            return Err(Error::Config(format!(
                "lm_weight {} must be >= 0 and length_bonus {} finite",
                self.lm_weight, self.length_bonus
            )));
        }
        Ok(())
    }
}

/// Key typed by emission column `s` (`s ≥ 1`).
fn key_of(s: usize) -> char {
    KEYS[s - 1]
}

fn edit(text: &str, c: char) -> String {
    let mut t = text.to_string();
    if c == BACKSPACE {
        t.pop();
    } else {
        t.push(c);
    }
    t
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-frame argmax (lowest index on ties), collapsed, with backspaces
/// applied.
pub fn greedy_decode(lattice: &EmissionLattice) -> String {
    let mut g = GreedyStream::default();
    g.advance(lattice);
    g.text
}

/// A decoding hypothesis: all alignments whose edited text and last
/// emitted symbol agree.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub edited_text: String,
    /// Last non-blank emission column, `None` before the first one.
    pub last_symbol: Option<usize>,
    pub p_blank: f64,
    pub p_nonblank: f64,
    /// LM log-probability of `edited_text`.
    pub lm_total: f64,
    pub fused_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub text: String,
    /// Surviving hypotheses after the last frame, best first.
    pub hypotheses: Vec<BeamHypothesis>,
}

/// LM totals of edited texts, memoized; a backspace rewinds to a prefix
/// that is usually already cached.
struct LmCache<'a> {
    lm: Option<&'a NgramModel>,
    totals: HashMap<String, f64>,
}

impl LmCache<'_> {
    fn total(&mut self, text: &str) -> Result<f64> {
        let Some(lm) = self.lm else { return Ok(0.0) };
        if let Some(&v) = self.totals.get(text) {
            return Ok(v);
        }
        let v = match text.char_indices().last() {
            None => 0.0,
            Some((i, c)) => {
                let prefix = &text[..i];
                self.total(prefix)? + lm.next_log_prob(prefix, Some(c))?
            }
        };
        self.totals.insert(text.to_string(), v);
        Ok(v)
    }
}

type Key = (String, Option<usize>);

struct Entry {
    pb: f64,
    pnb: f64,
    lm_total: f64,
}

/// Hypotheses of the next frame under construction.
#[derive(Default)]
struct Frontier {
    entries: Vec<(Key, Entry)>,
    index: HashMap<Key, usize>,
    /// Non-empty components `(entry, is_blank)` in creation order, which
    /// breaks score ties toward lower symbol indices.
    order: Vec<(usize, bool)>,
}

impl Frontier {
    fn slot(&mut self, key: Key, cache: &mut LmCache) -> Result<usize> {
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let lm_total = cache.total(&key.0)?;
        self.entries.push((
            key.clone(),
            Entry {
                pb: f64::NEG_INFINITY,
                pnb: f64::NEG_INFINITY,
                lm_total,
            },
        ));
        self.index.insert(key, self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    fn add(&mut self, i: usize, blank: bool, p: f64) {
        if p == f64::NEG_INFINITY {
            return;
        }
        let e = &mut self.entries[i].1;
        let comp = if blank { &mut e.pb } else { &mut e.pnb };
        if *comp == f64::NEG_INFINITY {
            self.order.push((i, blank));
        }
        *comp = log_add(*comp, p);
    }
}

/// Collapse-aware prefix beam search with shallow LM fusion, fed one
/// lattice chunk at a time.
///
/// Hypotheses merge on `(edited_text, last_symbol)`. Pruning ranks the two
/// components (blank-ending, non-blank-ending) of every hypothesis
/// separately and keeps the best `beam_width` of them, so a width-1 beam
/// follows exactly the greedy path. The answer merges hypotheses by edited
/// text.
pub struct BeamSearch<'a> {
    cfg: DecodeConfig,
    cache: LmCache<'a>,
    beam: Vec<(Key, Entry)>,
}

impl<'a> BeamSearch<'a> {
    pub fn new(cfg: &DecodeConfig, lm: Option<&'a NgramModel>) -> Result<Self> {
        cfg.validate()?;
        Ok(BeamSearch {
            cfg: cfg.clone(),
            cache: LmCache {
                lm: if cfg.lm_weight > 0.0 { lm } else { None },
                totals: HashMap::new(),
            },
            beam: vec![(
                (String::new(), None),
                Entry {
                    pb: 0.0,
                    pnb: f64::NEG_INFINITY,
                    lm_total: 0.0,
                },
            )],
        })
    }

    fn bonus(&self, e: &Entry, text: &str) -> f64 {
        self.cfg.lm_weight * e.lm_total + self.cfg.length_bonus * text.chars().count() as f64
    }

    /// Consumes every frame of `lattice`.
    pub fn advance(&mut self, lattice: &EmissionLattice) -> Result<()> {
        let width = lattice.width();
        if width > KEYS.len() + 1 {
            return Err(Error::Input(format!("lattice width {width} exceeds {}", KEYS.len() + 1)));
        }
        for t in 0..lattice.frames() {
            self.step(lattice.row(t))?;
        }
        Ok(())
    }

    fn step(&mut self, row: &[f64]) -> Result<()> {
        let cache = &mut self.cache;
        let mut next = Frontier::default();
        for ((text, last), e) in &self.beam {
            let total = log_add(e.pb, e.pnb);
            let i = next.slot((text.clone(), *last), cache)?;
            next.add(i, true, total + row[BLANK]);
            for (s, &lp) in row.iter().enumerate().skip(1) {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                if Some(s) == *last {
                    next.add(i, false, e.pnb + lp);
                    if e.pb > f64::NEG_INFINITY {
                        let j = next.slot((edit(text, key_of(s)), Some(s)), cache)?;
                        next.add(j, false, e.pb + lp);
                    }
                } else {
                    let j = next.slot((edit(text, key_of(s)), Some(s)), cache)?;
                    next.add(j, false, total + lp);
                }
            }
        }
        let Frontier { entries: mut next, order, .. } = next;
        let width = self.cfg.beam_width;
        if order.len() > width {
            let mut ranked: Vec<(f64, usize)> = order
                .iter()
                .enumerate()
                .map(|(r, &(i, blank))| {
                    let (k, e) = &next[i];
                    ((if blank { e.pb } else { e.pnb }) + self.bonus(e, &k.0), r)
                })
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut keep = vec![(false, false); next.len()];
            for &(_, r) in &ranked[..width] {
                let (i, blank) = order[r];
                if blank {
                    keep[i].0 = true;
                } else {
                    keep[i].1 = true;
                }
            }
            for (i, (_, e)) in next.iter_mut().enumerate() {
                if !keep[i].0 {
                    e.pb = f64::NEG_INFINITY;
                }
                if !keep[i].1 {
                    e.pnb = f64::NEG_INFINITY;
                }
            }
        }
        self.beam = next
            .into_iter()
            .filter(|(_, e)| e.pb > f64::NEG_INFINITY || e.pnb > f64::NEG_INFINITY)
            .collect();
        Ok(())
    }

    /// Current hypotheses, best first.
    pub fn hypotheses(&self) -> Vec<BeamHypothesis> {
        let mut h: Vec<BeamHypothesis> = self
            .beam
            .iter()
            .map(|((text, last), e)| BeamHypothesis {
                edited_text: text.clone(),
                last_symbol: *last,
                p_blank: e.pb,
                p_nonblank: e.pnb,
                lm_total: e.lm_total,
                fused_score: log_add(e.pb, e.pnb) + self.bonus(e, text),
            })
            .collect();
        h.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.edited_text.cmp(&b.edited_text)));
        h
    }

    /// Best edited text so far.
    pub fn best(&self) -> String {
        let mut merged: HashMap<&str, (f64, f64)> = HashMap::new();
        for ((text, _), e) in &self.beam {
            let m = merged.entry(text).or_insert((f64::NEG_INFINITY, self.bonus(e, text)));
            m.0 = log_add(m.0, log_add(e.pb, e.pnb));
        }
        merged
            .iter()
            .map(|(t, (p, b))| (p + b, *t))
            .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(a.1)))
            .map(|(_, t)| t.to_string())
            .unwrap_or_default()
    }

    pub fn result(&self) -> BeamResult {
        BeamResult {
            text: self.best(),
            hypotheses: self.hypotheses(),
        }
    }
}

/// Decodes a whole lattice with [`BeamSearch`].
pub fn beam_decode(lattice: &EmissionLattice, cfg: &DecodeConfig, lm: Option<&NgramModel>) -> Result<BeamResult> {
    let mut search = BeamSearch::new(cfg, lm)?;
    search.advance(lattice)?;
    Ok(search.result())
}

/// Greedy decoding fed one lattice chunk at a time.
#[derive(Debug, Clone, Default)]
pub struct GreedyStream {
    prev: Option<usize>,
    text: String,
}

impl GreedyStream {
    pub fn advance(&mut self, lattice: &EmissionLattice) {
        for t in 0..lattice.frames() {
            let row = lattice.row(t);
            let mut best = 0;
            for (s, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = s;
                }
            }
            if Some(best) != self.prev && best != BLANK {
                self.text = edit(&self.text, key_of(best));
            }
            self.prev = Some(best);
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}
