//! Connectionist temporal classification: collapsing, the log-space
//! forward-backward loss, and an exhaustive path-enumeration oracle.

use crate::alphabet::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-frame log-probabilities over the blank-extended alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLattice {
    frames: usize,
    width: usize,
    data: Vec<f64>,
}

impl EmissionLattice {
    pub fn new(frames: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * width {
            return Err(Error::dim("lattice", &[frames, width], &[data.len()]));
        }
        if width < 2 {
            return Err(Error::Config(format!("lattice width {width} leaves no room for symbols")));
        }
        Ok(EmissionLattice { frames, width, data })
    }

    /// Wraps a `[T×V]` tensor of log-probabilities.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::dim("lattice", t.shape(), &[0, 0]));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Builds a lattice from probability rows (each row is logged).
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::dim("lattice", &[width], &[r.len()]));
            }
            data.extend(r.iter().map(|p| p.ln()));
        }
        Self::new(rows.len(), width, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.width], self.data.clone()).expect("shape")
    }

    /// Appends the frames of `other` (same width).
    pub fn extend(&mut self, other: &EmissionLattice) -> Result<()> {
        if other.width != self.width {
            return Err(Error::dim("lattice extend", &[self.width], &[other.width]));
        }
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
        Ok(())
    }

    /// Largest deviation of any row's probability mass from 1.
    pub fn normalization_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| (self.row(t).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Minimum number of frames any path needs to emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], width: usize) -> Result<()> {
    match target.iter().find(|&&s| s == BLANK || s >= width) {
        Some(s) => Err(Error::Input(format!("target symbol {s} outside 1..{width}"))),
        None => Ok(()),
    }
}

#[inline]
fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Loss value and its gradient with respect to every lattice entry.
#[derive(Debug, Clone)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `−log P(target | lattice)` by the alpha-beta recursion over the
/// blank-interleaved target.
pub fn ctc_loss(lattice: &EmissionLattice, target: &[usize]) -> Result<CtcOutput> {
    let (t_len, v) = (lattice.frames, lattice.width);
    check_target(target, v)?;
    if t_len < min_frames(target) {
        return Err(Error::NoAlignment {
            frames: t_len,
            labels: target.len(),
        });
    }
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    // Skip transition s-2 -> s is allowed onto a label that differs from the
    // previous label.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);
    let lp = |t: usize, s: usize| lattice.data[t * v + ext(s)];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if can_skip(s) { prev[s - 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        lse(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(Error::NoAlignment {
            frames: t_len,
            labels: target.len(),
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && can_skip(s + 2) { next[s + 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }

    // alpha and beta both include the emission at t, so their product counts
    // it twice: d(−log P)/d lp[t,k] = −Σ_{s: ext(s)=k} exp(α+β−lp−log P).
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            grad[t * v + ext(s)] -= (ab - lp(t, s) - log_p).exp();
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Records the CTC loss of a `[T×V]` log-probability node on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, logp: Var, target: &[usize]) -> Result<Var> {
    let shape = tape.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("ctc", &shape, &[0, 0]));
    }
    let lattice = EmissionLattice::new(shape[0], shape[1], tape.value(logp).to_vec())?;
    let out = ctc_loss(&lattice, target)?;
    tape.fused_scalar(logp, out.loss, out.grad)
}

/// Largest lattice (paths = width^frames) the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Exhaustive enumeration of every frame path; exact reference for
/// [`ctc_loss`] on tiny lattices.
pub fn ctc_brute_force(lattice: &EmissionLattice, target: &[usize]) -> Result<f64> {
    check_target(target, lattice.width)?;
    let paths = (lattice.width as u64).checked_pow(lattice.frames as u32);
    if paths.is_none_or(|p| p > BRUTE_FORCE_LIMIT) {
        return Err(Error::Refused(format!(
            "{}^{} paths exceed the enumeration limit",
            lattice.width, lattice.frames
        )));
    }
    let mut total = 0.0;
    let mut found = false;
    for_each_path(lattice, |path, logp| {
        if collapse(path) == target {
            total += logp.exp();
            found = true;
        }
    });
    if !found {
        return Err(Error::NoAlignment {
            frames: lattice.frames,
            labels: target.len(),
        });
    }
    Ok(-total.ln())
}

/// Visits every frame path with its log-probability (odometer order).
pub fn for_each_path(lattice: &EmissionLattice, mut f: impl FnMut(&[usize], f64)) {
    let (t_len, v) = (lattice.frames, lattice.width);
    let mut path = vec![0usize; t_len];
    loop {
        let logp: f64 = path.iter().enumerate().map(|(t, &s)| lattice.data[t * v + s]).sum();
        f(&path, logp);
        let mut t = t_len;
        loop {
            if t == 0 {
                return;
            }
            t -= 1;
            path[t] += 1;
            if path[t] < v {
                break;
            }
            path[t] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::finite_diff_check;

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, width: usize) -> EmissionLattice {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|_| {
                let r: Vec<f64> = (0..width).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|p| p / s).collect()
            })
            .collect();
        EmissionLattice::from_probs(&rows).unwrap()
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2]), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        let once = collapse(&[3, 0, 2, 2, 1]);
        assert_eq!(collapse(&once), once);
    }

    #[test]
    fn single_frame_uniform() {
        let l = EmissionLattice::from_probs(&[vec![1.0 / 30.0; 30]]).unwrap();
        let out = ctc_loss(&l, &[5]).unwrap();
        assert!((out.loss - 30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_hand_enumeration() {
        // width 3: blank, a, b
        let p1 = [0.2, 0.5, 0.3];
        let p2 = [0.6, 0.1, 0.3];
        let l = EmissionLattice::from_probs(&[p1.to_vec(), p2.to_vec()]).unwrap();
        let expected = -(p1[1] * p2[1] + p1[1] * p2[0] + p1[0] * p2[1]).ln();
        assert!((ctc_loss(&l, &[1]).unwrap().loss - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_lattice(&mut rng, 5, 4);
        let expected: f64 = -(0..5).map(|t| l.row(t)[0]).sum::<f64>();
        assert!((ctc_loss(&l, &[]).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn no_alignment_and_invalid_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_lattice(&mut rng, 2, 4);
        assert!(matches!(ctc_loss(&l, &[1, 1]), Err(Error::NoAlignment { .. })));
        assert!(matches!(ctc_brute_force(&l, &[1, 1]), Err(Error::NoAlignment { .. })));
        assert!(matches!(ctc_loss(&l, &[0]), Err(Error::Input(_))));
        assert!(matches!(ctc_loss(&l, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn one_hot_path_has_zero_loss() {
        let mut rows = vec![vec![0.0; 3]; 4];
        for (t, &s) in [1usize, 0, 2, 2].iter().enumerate() {
            rows[t][s] = 1.0;
        }
        let l = EmissionLattice::from_probs(&rows).unwrap();
        assert_eq!(ctc_loss(&l, &[1, 2]).unwrap().loss, 0.0);
        assert_eq!(ctc_brute_force(&l, &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn brute_force_refuses_large_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_lattice(&mut rng, 12, 30);
        assert!(matches!(ctc_brute_force(&l, &[1]), Err(Error::Refused(_))));
    }

    #[test]
    fn matches_brute_force_on_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let frames = rng.random_range(1..=6);
            let l = random_lattice(&mut rng, frames, 4);
            let u = rng.random_range(0..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..4)).collect();
            match (ctc_loss(&l, &target), ctc_brute_force(&l, &target)) {
                (Ok(a), Ok(b)) => assert!((a.loss - b).abs() < 1e-9, "{} vs {b}", a.loss),
                (Err(Error::NoAlignment { .. }), Err(Error::NoAlignment { .. })) => {}
                other => panic!("disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn gradient_through_log_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let lp = tape.log_softmax(x);
                ctc_loss_on_tape(tape, lp, &[1, 2, 2])
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn raising_correct_symbol_never_increases_loss() {
        // With renormalization the loss falls iff the symbol's alignment
        // posterior γ_t(k) = −grad is at least its prior p_t(k); the symbol
        // maximizing γ/p always qualifies.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let frames = rng.random_range(1..=6);
            let l = random_lattice(&mut rng, frames, 4);
            let u = rng.random_range(1..=frames.min(3));
            let target: Vec<usize> = (0..u).map(|_| rng.random_range(1..4)).collect();
            let Ok(before) = ctc_loss(&l, &target) else { continue };
            let t = rng.random_range(0..frames);
            let ratio = |k: usize| -before.grad[t * 4 + k] / l.row(t)[k].exp();
            let k = (0..4).max_by(|&a, &b| ratio(a).total_cmp(&ratio(b))).unwrap();
            let factor = rng.random_range(1.0..4.0);
            let mut rows: Vec<Vec<f64>> = (0..frames).map(|r| l.row(r).iter().map(|v| v.exp()).collect()).collect();
            rows[t][k] *= factor;
            let s: f64 = rows[t].iter().sum();
            rows[t].iter_mut().for_each(|p| *p /= s);
            let after = ctc_loss(&EmissionLattice::from_probs(&rows).unwrap(), &target).unwrap();
            assert!(after.loss <= before.loss + 1e-12, "{} > {}", after.loss, before.loss);
        }
    }
}
