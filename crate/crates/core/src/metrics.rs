//! Character error rate with a full substitution/deletion/insertion
//! decomposition.

use std::fmt;

/// One step of an alignment, read left to right over the reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOp<T> {
    Match(T),
    Substitute { from: T, to: T },
    Delete(T),
    Insert(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport<T = char> {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub cer: f64,
    pub trace: Vec<EditOp<T>>,
}

impl<T: Clone> AlignmentReport<T> {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Rebuilds the hypothesis by running the trace over the reference.
    pub fn replay(&self, reference: &[T]) -> Vec<T> {
        let mut out = Vec::new();
        let mut r = reference.iter();
        for op in &self.trace {
            match op {
                EditOp::Match(_) => out.push(r.next().expect("trace overruns reference").clone()),
                EditOp::Substitute { to, .. } => {
                    r.next();
                    out.push(to.clone());
                }
                EditOp::Delete(_) => {
                    r.next();
                }
                EditOp::Insert(c) => out.push(c.clone()),
            }
        }
        out
    }

    /// `ref_len,S,D,I,cer`
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.ref_len, self.substitutions, self.deletions, self.insertions, self.cer
        )
    }
}

pub const CSV_HEADER: &str = "ref_len,S,D,I,cer";

fn rate(edits: usize, n: usize) -> f64 {
    match (edits, n) {
        (0, 0) => 0.0,
        (_, 0) => f64::INFINITY,
        _ => edits as f64 / n as f64,
    }
}

/// Unit-cost Levenshtein alignment. Among equal-cost alignments the
/// backtrace prefers substitution (or match), then deletion, then insertion.
pub fn levenshtein_align<T: PartialEq + Clone>(reference: &[T], hypothesis: &[T]) -> AlignmentReport<T> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut trace = Vec::with_capacity(n.max(m));
    let (mut s, mut dl, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                trace.push(if same {
                    EditOp::Match(reference[i - 1].clone())
                } else {
                    s += 1;
                    EditOp::Substitute {
                        from: reference[i - 1].clone(),
                        to: hypothesis[j - 1].clone(),
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            dl += 1;
            trace.push(EditOp::Delete(reference[i - 1].clone()));
            i -= 1;
        } else {
            ins += 1;
            trace.push(EditOp::Insert(hypothesis[j - 1].clone()));
            j -= 1;
        }
    }
    trace.reverse();
    AlignmentReport {
        substitutions: s,
        deletions: dl,
        insertions: ins,
        ref_len: n,
        cer: rate(s + dl + ins, n),
        trace,
    }
}

/// Character-level alignment of two strings.
pub fn align_text(reference: &str, hypothesis: &str) -> AlignmentReport<char> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    levenshtein_align(&r, &h)
}

/// Micro-averaged totals over many alignments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CerTotals {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl CerTotals {
    pub fn add<T>(&mut self, r: &AlignmentReport<T>) {
        self.substitutions += r.substitutions;
        self.deletions += r.deletions;
        self.insertions += r.insertions;
        self.ref_len += r.ref_len;
    }

    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn cer(&self) -> f64 {
        rate(self.edits(), self.ref_len)
    }
}

impl fmt::Display for CerTotals {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.ref_len,
            self.substitutions,
            self.deletions,
            self.insertions,
            self.cer()
        )
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    // Top-down recursion over suffixes, memoized; shares nothing with the DP.
    fn oracle(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let key = (a.len(), b.len());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let v = if a[0] == b[0] {
            oracle(&a[1..], &b[1..], memo)
        } else {
            1 + oracle(&a[1..], &b[1..], memo)
                .min(oracle(&a[1..], b, memo))
                .min(oracle(a, &b[1..], memo))
        };
        memo.insert(key, v);
        v
    }

    #[test]
    fn examples() {
        let r = align_text("abc", "abc");
        assert_eq!((r.substitutions, r.deletions, r.insertions, r.cer), (0, 0, 0, 0.0));
        let r = align_text("abc", "axc");
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert!((r.cer - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference() {
        let r = align_text("", "xy");
        assert_eq!(r.insertions, 2);
        assert!(r.cer.is_infinite());
        assert_eq!(align_text("", "").cer, 0.0);
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        // "ab" -> "ba": two substitutions rather than delete+insert.
        let r = align_text("ab", "ba");
        assert_eq!((r.substitutions, r.deletions, r.insertions), (2, 0, 0));
        let r = align_text("aab", "ab");
        assert_eq!(r.deletions, 1);
        assert_eq!(r.trace[0], EditOp::Delete('a'));
    }

    #[test]
    fn matches_recursive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let alpha = ['a', 'b', 'c', 'd'];
        for _ in 0..1000 {
            let a: Vec<char> = (0..rng.random_range(0..=12)).map(|_| alpha[rng.random_range(0..4)]).collect();
            let b: Vec<char> = (0..rng.random_range(0..=12)).map(|_| alpha[rng.random_range(0..4)]).collect();
            let r = levenshtein_align(&a, &b);
            assert_eq!(r.distance(), oracle(&a, &b, &mut HashMap::new()));
            assert_eq!(r.replay(&a), b);
        }
    }

    proptest! {
        #[test]
        fn metric_axioms(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let (a, b, c) = (chars(&a), chars(&b), chars(&c));
            let ab = levenshtein_align(&a, &b);
            let ba = levenshtein_align(&b, &a);
            prop_assert_eq!(ab.distance(), ba.distance());
            prop_assert_eq!(ab.distance() == 0, a == b);
            prop_assert!(ab.substitutions + ab.deletions <= a.len());
            let bc = levenshtein_align(&b, &c).distance();
            let ac = levenshtein_align(&a, &c).distance();
            prop_assert!(ac <= ab.distance() + bc);
            prop_assert_eq!(levenshtein_align(&a, &a).cer, 0.0);
        }
    }
}
