//! Hand-built emission lattices for decoder checks.

use rand::Rng;

use crate::alphabet::{emission_index, BLANK, EMISSION_SIZE};
use crate::ctc::EmissionLattice;

fn row(probs: &[(usize, f64)]) -> Vec<f64> {
    let mut r = vec![0.0; EMISSION_SIZE];
    for &(s, p) in probs {
        r[s] = p;
    }
    r
}

fn col(c: char) -> usize {
    emission_index(c).expect("key")
}

/// Six frames whose argmax path spells "teh" (mass 0.51 · 0.51) while
/// "the" takes 0.49 · 0.49:
/// `[t] [blank] [e .51 | h .49] [blank] [h .51 | e .49] [blank]`.
pub fn the_teh_lattice() -> EmissionLattice {
    let (t, e, h) = (col('t'), col('e'), col('h'));
    EmissionLattice::from_probs(&[
        row(&[(t, 1.0)]),
        row(&[(BLANK, 1.0)]),
        row(&[(e, 0.51), (h, 0.49)]),
        row(&[(BLANK, 1.0)]),
        row(&[(h, 0.51), (e, 0.49)]),
        row(&[(BLANK, 1.0)]),
    ])
    .expect("valid lattice")
}

/// One character frame plus one blank frame per character of `text`.
///
/// Each character frame puts most mass on the true key and a random
/// letter; with probability `flip` the confuser wins the argmax. The
/// remaining mass is spread evenly over all columns.
pub fn noisy_lattice<R: Rng>(text: &str, flip: f64, rng: &mut R) -> EmissionLattice {
    let floor = 0.02 / EMISSION_SIZE as f64;
    let spread = |probs: &[(usize, f64)]| {
        let mut r = row(probs);
        r.iter_mut().for_each(|v| *v = *v * 0.98 + floor);
        r
    };
    let mut rows = Vec::with_capacity(2 * text.len());
    for c in text.chars() {
        let truth = col(c);
        let confuser = loop {
            let k = col(char::from(b'a' + rng.random_range(0..26u8)));
            if k != truth {
                break k;
            }
        };
        let (pt, pc) = if rng.random_bool(flip) { (0.42, 0.58) } else { (0.7, 0.3) };
        rows.push(spread(&[(truth, pt), (confuser, pc)]));
        rows.push(spread(&[(BLANK, 1.0)]));
    }
    EmissionLattice::from_probs(&rows).expect("valid lattice")
}
