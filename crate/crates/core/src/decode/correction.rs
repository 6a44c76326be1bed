use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::lm::NgramModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    None,
    /// One call per completed word.
    Space,
    /// One call per sentence.
    Sentence,
}

impl CorrectionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionMode::None => "none",
            CorrectionMode::Space => "space",
            CorrectionMode::Sentence => "sentence",
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorrectionMode::None),
            "space" => Ok(CorrectionMode::Space),
            "sentence" => Ok(CorrectionMode::Sentence),
            _ => Err(Error::Config(format!("unknown correction mode {s:?}"))),
        }
    }
}

/// Rewrites a word or sentence. `context` is the transcript before it.
pub trait Corrector {
    fn correct(&self, text: &str, mode: CorrectionMode, context: &str) -> Result<String>;
}

/// Which tokens are passed through untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LiteralGuard {
    pub enabled: bool,
    /// Tokens always treated as literal when the guard is on.
    pub spans: Vec<String>,
}

impl LiteralGuard {
    pub fn on() -> Self {
        LiteralGuard {
            enabled: true,
            spans: Vec::new(),
        }
    }

    /// With the guard on, a token is literal if listed or if, after one
    /// trailing sentence mark, it holds anything besides letters and
    /// apostrophes (digits, symbols, capitals).
    pub fn is_literal(&self, token: &str) -> bool {
        if !self.enabled || token.is_empty() {
            return false;
        }
        if self.spans.iter().any(|s| s == token) {
            return true;
        }
        let core = token.strip_suffix(['.', '!', '?', ',']).unwrap_or(token);
        !core.chars().all(|c| c.is_ascii_lowercase() || c == '\'')
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionOutcome {
    pub text: String,
    pub calls: usize,
    /// Set when any corrector call failed; those pieces are left as-is.
    pub warning: Option<String>,
}

fn ends_sentence(token: &str) -> bool {
    token.ends_with(['.', '!', '?'])
}

/// Runs `corrector` over `text` word by word (space mode) or over runs of
/// non-literal words within each sentence (sentence mode).
pub fn apply_correction(text: &str, corrector: &dyn Corrector, mode: CorrectionMode, guard: &LiteralGuard) -> CorrectionOutcome {
    let tokens: Vec<&str> = text.split(' ').collect();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut calls = 0;
    let mut warning = None;
    let mut call = |piece: &str, out: &[String]| -> String {
        calls += 1;
        match corrector.correct(piece, mode, &out.join(" ")) {
            Ok(c) => c,
            Err(e) => {
                warning.get_or_insert_with(|| e.to_string());
                piece.to_string()
            }
        }
    };
    match mode {
        CorrectionMode::None => out.extend(tokens.iter().map(|t| t.to_string())),
        CorrectionMode::Space => {
            for tok in &tokens {
                let fixed = if tok.is_empty() || guard.is_literal(tok) {
                    tok.to_string()
                } else {
                    call(tok, &out)
                };
                out.push(fixed);
            }
        }
        CorrectionMode::Sentence => {
            let mut run: Vec<&str> = Vec::new();
            let mut flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
                if run.iter().any(|t| !t.is_empty()) {
                    let fixed = call(&run.join(" "), out);
                    out.push(fixed);
                } else {
                    out.extend(run.iter().map(|t| t.to_string()));
                }
                run.clear();
            };
            for tok in &tokens {
                if guard.is_literal(tok) {
                    flush(&mut run, &mut out);
                    out.push(tok.to_string());
                } else {
                    run.push(tok);
                    if ends_sentence(tok) {
                        flush(&mut run, &mut out);
                    }
                }
            }
            flush(&mut run, &mut out);
        }
    }
    CorrectionOutcome {
        text: out.join(" "),
        calls,
        warning,
    }
}

/// Optimal-string-alignment distance: Levenshtein plus adjacent
/// transpositions.
pub fn osa_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut v = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                v = v.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = v;
        }
    }
    d[n][m]
}

fn correct_word(word: &str, lexicon: &BTreeSet<String>, lm: Option<&NgramModel>) -> String {
    let split = word.trim_end_matches(|c: char| !(c.is_ascii_lowercase() || c == '\'')).len();
    let (core, tail) = word.split_at(split);
    if core.is_empty() || lexicon.contains(core) {
        return word.to_string();
    }
    let score = |w: &str| lm.and_then(|m| m.score_sequence(w).ok()).unwrap_or(0.0);
    let mut best: Option<(usize, f64, &str)> = None;
    for cand in lexicon {
        let d = osa_distance(core, cand);
        if d > 2 {
            continue;
        }
        let s = score(cand);
        let better = match best {
            None => true,
            Some((bd, bs, bw)) => d < bd || (d == bd && (s > bs || (s == bs && cand.as_str() < bw))),
        };
        if better {
            best = Some((d, s, cand));
        }
    }
    match best {
        Some((_, _, w)) => format!("{w}{tail}"),
        None => word.to_string(),
    }
}

/// Replaces each out-of-lexicon word by the closest lexicon word within
/// distance 2; ties go to the higher LM score, then alphabetical order.
pub fn mock_correct(text: &str, lexicon: &BTreeSet<String>, lm: Option<&NgramModel>) -> String {
    text.split(' ')
        .map(|w| correct_word(w, lexicon, lm))
        .collect::<Vec<_>>()
        .join(" ")
}

/// In-process deterministic corrector.
#[derive(Debug, Clone)]
pub struct MockCorrector {
    pub lexicon: BTreeSet<String>,
    pub lm: Option<NgramModel>,
}

impl MockCorrector {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I, lm: Option<NgramModel>) -> Self {
        MockCorrector {
            lexicon: words.into_iter().map(Into::into).collect(),
            lm,
        }
    }
}

impl Corrector for MockCorrector {
    fn correct(&self, text: &str, _mode: CorrectionMode, _context: &str) -> Result<String> {
        Ok(mock_correct(text, &self.lexicon, self.lm.as_ref()))
    }
}

/// Corrector behind an HTTP endpoint: POST of the text with `mode` and
/// `context` headers; the response body is the corrected text.
#[derive(Debug, Clone)]
pub struct HttpCorrector {
    pub url: String,
    pub timeout: Duration,
}

impl HttpCorrector {
    pub fn new(url: impl Into<String>) -> Self {
        HttpCorrector {
            url: url.into(),
            timeout: Duration::from_secs(2),
        }
    }
}

/// Header-safe rendering: printable ASCII only.
fn header_value(s: &str) -> String {
    s.chars().map(|c| if (' '..='~').contains(&c) { c } else { '?' }).collect()
}

impl Corrector for HttpCorrector {
    fn correct(&self, text: &str, mode: CorrectionMode, context: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .header("mode", mode.name())
            .header("context", header_value(context))
            .send(text)
            .map_err(|e| Error::Transport(e.to_string()))?;
        resp.body_mut().read_to_string().map_err(|e| Error::Transport(e.to_string()))
    }
}
