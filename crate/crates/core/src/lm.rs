//! Character n-gram language model with interpolated Kneser-Ney smoothing.
//!
//! Symbols are the 28 printable keys (letters, space, apostrophe) plus an
//! end-of-text marker; a begin marker only ever appears in contexts. Every
//! training line is padded with `order − 1` begin markers. The highest order
//! is estimated from raw counts, every lower order from continuation counts
//! (the number of distinct left extensions), and the unigram level is
//! interpolated with the uniform distribution so no symbol has zero mass.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::alphabet::BACKSPACE;
use crate::error::{Error, Result};

/// Bundled English-like training text, one sentence per line.
pub const CORPUS: &str = include_str!("../assets/corpus.txt");

/// Printable characters in symbol order (ids 0..28).
pub const CHARS: &[u8; 28] = b"abcdefghijklmnopqrstuvwxyz '";
pub const EOS: u8 = 28;
pub const BOS: u8 = 29;
/// Symbols that can be predicted: the 28 characters and end-of-text.
pub const VOCAB: usize = 29;

const MAGIC: &[u8; 4] = b"EMGL";
const VERSION: u32 = 1;
const BOS_BYTE: u8 = 0x02;
const EOS_BYTE: u8 = 0x03;

pub fn symbol_of(c: char) -> Option<u8> {
    if !c.is_ascii() {
        return None;
    }
    CHARS.iter().position(|&b| b == c as u8).map(|p| p as u8)
}

fn symbol_byte(s: u8) -> u8 {
    match s {
        EOS => EOS_BYTE,
        BOS => BOS_BYTE,
        s => CHARS[s as usize],
    }
}

fn byte_symbol(b: u8) -> Option<u8> {
    match b {
        EOS_BYTE => Some(EOS),
        BOS_BYTE => Some(BOS),
        b => symbol_of(b as char),
    }
}

fn encode(text: &str) -> Result<Vec<u8>> {
    text.chars()
        .map(|c| symbol_of(c).ok_or_else(|| Error::Input(format!("{c:?} is not in the language model vocabulary"))))
        .collect()
}

/// Counts for one context: per-symbol counts plus their total and the number
/// of distinct symbols seen.
#[derive(Debug, Clone, PartialEq, Default)]
struct ContextCounts {
    counts: Vec<(u8, u64)>,
    total: u64,
}

impl ContextCounts {
    fn get(&self, s: u8) -> u64 {
        self.counts
            .binary_search_by_key(&s, |e| e.0)
            .map_or(0, |i| self.counts[i].1)
    }

    fn bump(&mut self, s: u8, by: u64) {
        match self.counts.binary_search_by_key(&s, |e| e.0) {
            Ok(i) => self.counts[i].1 += by,
            Err(i) => self.counts.insert(i, (s, by)),
        }
        self.total += by;
    }
}

/// One estimation level: contexts of a fixed length.
type Level = HashMap<Vec<u8>, ContextCounts>;

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    discount: Vec<f64>,
    /// `levels[k]` holds contexts of length k; the last level uses raw
    /// counts, the others continuation counts.
    levels: Vec<Level>,
    comment: String,
}

impl NgramModel {
    /// Trains on `corpus`, normalizing it to the key alphabet line by line.
    pub fn train(corpus: &str, order: usize, discount: f64) -> Result<Self> {
        if order == 0 || order > 16 {
            return Err(Error::Config(format!("order {order} outside 1..=16")));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Config(format!("discount {discount} outside (0, 1)")));
        }
        let lines: Vec<Vec<u8>> = corpus
            .lines()
            .map(crate::alphabet::normalize_text)
            .filter(|l| !l.is_empty())
            .map(|l| encode(&l))
            .collect::<Result<_>>()?;
        if lines.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }

        let n = order;
        let mut levels: Vec<Level> = vec![HashMap::new(); n];
        // Distinct left extensions per lower-order n-gram.
        let mut seen: Vec<HashMap<Vec<u8>, Vec<u8>>> = vec![HashMap::new(); n];
        for line in &lines {
            let mut seq = vec![BOS; n - 1];
            seq.extend_from_slice(line);
            seq.push(EOS);
            for end in n - 1..seq.len() {
                let gram = &seq[end + 1 - n..=end];
                let (ctx, w) = gram.split_at(n - 1);
                levels[n - 1].entry(ctx.to_vec()).or_default().bump(w[0], 1);
                for k in 1..n {
                    // k-gram ending at `end`, whose left neighbour is gram[n-k-1].
                    let sub = &gram[n - k..];
                    let left = gram[n - k - 1];
                    let lefts = seen[k].entry(sub.to_vec()).or_default();
                    if !lefts.contains(&left) {
                        lefts.push(left);
                        let (ctx, w) = sub.split_at(k - 1);
                        levels[k - 1].entry(ctx.to_vec()).or_default().bump(w[0], 1);
                    }
                }
            }
        }
        Ok(NgramModel {
            order,
            discount: vec![discount; n],
            levels,
            comment: String::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> &[f64] {
        &self.discount
    }

    pub fn comment(&self) -> &str {
        &self.comment
    }

    pub fn set_comment(&mut self, comment: impl Into<String>) {
        self.comment = comment.into();
    }

    /// `P(w | context)` for symbol ids. Only the last `order − 1` context
    /// symbols are used; a shorter context tops out at a lower level.
    pub fn prob(&self, context: &[u8], w: u8) -> f64 {
        let ctx = &context[context.len().saturating_sub(self.order - 1)..];
        let mut p = 1.0 / VOCAB as f64;
        for k in 0..=ctx.len() {
            let h = &ctx[ctx.len() - k..];
            if let Some(cc) = self.levels[k].get(h) {
                let d = self.discount[k];
                let total = cc.total as f64;
                let seen = (cc.get(w) as f64 - d).max(0.0);
                p = seen / total + d * cc.counts.len() as f64 / total * p;
            }
        }
        p
    }

    /// Natural-log conditional probability for symbol ids.
    pub fn log_prob(&self, context: &[u8], w: u8) -> f64 {
        self.prob(context, w).ln()
    }

    /// `log P(c | context)` with an unpadded text context. An empty
    /// context yields the unigram distribution.
    pub fn lm_score(&self, context: &str, c: char) -> Result<f64> {
        let ctx = encode(context)?;
        let w = symbol_of(c).ok_or_else(|| Error::Input(format!("{c:?} is not in the vocabulary")))?;
        Ok(self.log_prob(&ctx, w))
    }

    /// Full conditional distribution over the 29 predictable symbols.
    pub fn distribution(&self, context: &[u8]) -> Vec<f64> {
        (0..VOCAB as u8).map(|w| self.prob(context, w)).collect()
    }

    /// Begin-padded context for scoring the symbol after `prefix`.
    pub fn padded_context(&self, prefix: &str) -> Result<Vec<u8>> {
        let keep = self.order - 1;
        let tail: Vec<char> = prefix.chars().rev().take(keep).collect();
        let mut ctx = vec![BOS; keep - tail.len()];
        for c in tail.into_iter().rev() {
            ctx.push(symbol_of(c).ok_or_else(|| Error::Input(format!("{c:?} is not in the vocabulary")))?);
        }
        Ok(ctx)
    }

    /// `log P(c | begin-padded prefix)`; `c = None` scores end-of-text.
    pub fn next_log_prob(&self, prefix: &str, c: Option<char>) -> Result<f64> {
        let ctx = self.padded_context(prefix)?;
        let w = match c {
            None => EOS,
            Some(c) if c == BACKSPACE => return Err(Error::Input("backspace is not a language symbol".into())),
            Some(c) => symbol_of(c).ok_or_else(|| Error::Input(format!("{c:?} is not in the vocabulary")))?,
        };
        Ok(self.log_prob(&ctx, w))
    }

    /// Log-probability of `text` between begin and end markers.
    pub fn score_sequence(&self, text: &str) -> Result<f64> {
        let mut seq = vec![BOS; self.order - 1];
        seq.extend(encode(text)?);
        seq.push(EOS);
        let mut total = 0.0;
        for i in self.order - 1..seq.len() {
            total += self.log_prob(&seq[..i], seq[i]);
        }
        Ok(total)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.order as u8);
        buf.extend_from_slice(&(VOCAB as u32 + 1).to_le_bytes());
        buf.extend((0..=BOS).map(symbol_byte));
        // Raw counts exist only for the top order; lower orders store
        // continuation counts in their own block.
        for k in 0..self.order {
            let raw = k == self.order - 1;
            write_level(&mut buf, if raw { Some(&self.levels[k]) } else { None });
        }
        for k in 0..self.order - 1 {
            write_level(&mut buf, Some(&self.levels[k]));
        }
        for d in &self.discount {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&(self.comment.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.comment.as_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected EMGL"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let order = c.u8()? as usize;
        if order == 0 {
            return Err(Error::format(8, "order 0"));
        }
        let vocab_at = c.pos;
        let vlen = c.u32()? as usize;
        let vocab = c.take(vlen)?;
        let expected: Vec<u8> = (0..=BOS).map(symbol_byte).collect();
        if vocab != expected.as_slice() {
            return Err(Error::format(vocab_at as u64, "vocabulary differs from the key alphabet"));
        }
        let mut levels = Vec::with_capacity(order);
        for k in 0..order {
            let level = c.level()?;
            if k == order - 1 {
                levels.push(level);
            } else if !level.is_empty() {
                return Err(Error::format(c.pos as u64, format!("unexpected raw counts at order {}", k + 1)));
            }
        }
        let top = levels.pop().expect("top level");
        for _ in 0..order - 1 {
            levels.push(c.level()?);
        }
        levels.push(top);
        let mut discount = Vec::with_capacity(order);
        for _ in 0..order {
            let at = c.pos;
            let d = c.f64()?;
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::format(at as u64, format!("discount {d} outside (0, 1)")));
            }
            discount.push(d);
        }
        let clen = c.u32()? as usize;
        let at = c.pos;
        let comment = String::from_utf8(c.take(clen)?.to_vec()).map_err(|_| Error::format(at as u64, "comment is not UTF-8"))?;
        if c.pos != bytes.len() {
            return Err(Error::format(c.pos as u64, "trailing bytes"));
        }
        Ok(NgramModel {
            order,
            discount,
            levels,
            comment,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn write_level(buf: &mut Vec<u8>, level: Option<&Level>) {
    let mut entries: Vec<(&Vec<u8>, u8, u64)> = Vec::new();
    if let Some(level) = level {
        for (ctx, cc) in level {
            entries.extend(cc.counts.iter().map(|&(s, n)| (ctx, s, n)));
        }
    }
    entries.sort_unstable();
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (ctx, s, n) in entries {
        buf.push(ctx.len() as u8);
        buf.extend(ctx.iter().map(|&b| symbol_byte(b)));
        buf.push(symbol_byte(s));
        buf.extend_from_slice(&n.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn sym(&mut self) -> Result<u8> {
        let at = self.pos;
        let b = self.u8()?;
        byte_symbol(b).ok_or_else(|| Error::format(at as u64, format!("byte {b:#04x} is not a vocabulary symbol")))
    }

    fn level(&mut self) -> Result<Level> {
        let n = self.u64()?;
        let mut level = Level::new();
        for _ in 0..n {
            let len = self.u8()? as usize;
            let ctx = (0..len).map(|_| self.sym()).collect::<Result<Vec<u8>>>()?;
            let at = self.pos;
            let s = self.sym()?;
            if s == BOS {
                return Err(Error::format(at as u64, "begin marker cannot be predicted"));
            }
            let count = self.u64()?;
            level.entry(ctx).or_default().bump(s, count);
        }
        Ok(level)
    }
}
