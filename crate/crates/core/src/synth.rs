//! Seeded generator of small chain-like molecules for toy runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::metrics::BondTable;
use crate::molecule::{Molecule, Vocabulary};

const ELEMENTS: [(&str, f64); 5] = [("C", 0.5), ("N", 0.15), ("O", 0.15), ("H", 0.15), ("F", 0.05)];
const MIN_SEPARATION: f64 = 1.0;

fn pick_element<R: Rng>(rng: &mut R) -> &'static str {
    let mut u: f64 = rng.random();
    for (e, w) in ELEMENTS {
        if u < w {
            return e;
        }
        u -= w;
    }
    "C"
}

fn unit_gaussian<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// A random walk whose steps use tabulated single-bond lengths and whose
/// bond angles stay near tetrahedral. Non-bonded atoms keep at least 1 Å
/// apart. Positions are centred at the origin.
pub fn random_chain<R: Rng>(id: &str, n_atoms: usize, vocab: &Vocabulary, rng: &mut R) -> Result<Molecule> {
    let table = BondTable::standard();
    'attempt: loop {
        let symbols: Vec<&str> = (0..n_atoms).map(|_| pick_element(rng)).collect();
        let mut pos = vec![[0.0f64; 3]];
        let mut prev_dir = unit_gaussian(rng);
        for i in 1..n_atoms {
            let len = table_length(&table, symbols[i - 1], symbols[i]);
            let mut placed = None;
            for _ in 0..50 {
                let d = unit_gaussian(rng);
                let cos = d[0] * prev_dir[0] + d[1] * prev_dir[1] + d[2] * prev_dir[2];
                // angle between consecutive bonds ≈ 109.5° ± 15°
                if i > 1 && !(0.07..0.58).contains(&cos) {
                    continue;
                }
                let last = pos[i - 1];
                let cand = [last[0] + len * d[0], last[1] + len * d[1], last[2] + len * d[2]];
                let clash = pos[..i - 1].iter().any(|q| {
                    ((q[0] - cand[0]).powi(2) + (q[1] - cand[1]).powi(2) + (q[2] - cand[2]).powi(2)).sqrt()
                        < MIN_SEPARATION
                });
                if !clash {
                    placed = Some((cand, d));
                    break;
                }
            }
            let Some((cand, d)) = placed else { continue 'attempt };
            pos.push(cand);
            prev_dir = d;
        }
        let c = pos.iter().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
        let k = n_atoms as f64;
        for p in &mut pos {
            for j in 0..3 {
                p[j] -= c[j] / k;
            }
        }
        return Molecule::new(id, &symbols, pos, None, vocab);
    }
}

fn table_length(table: &BondTable, a: &str, b: &str) -> f64 {
    table.length(a, b, 1).ok().flatten().unwrap_or(1.5)
}

/// `count` molecules with sizes uniform in `min_atoms..=max_atoms`, QM9
/// vocabulary, ids `synth_0000…`.
pub fn synthetic_corpus(count: usize, min_atoms: usize, max_atoms: usize, seed: u64) -> Result<Vec<Molecule>> {
    let vocab = Vocabulary::qm9();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(min_atoms..=max_atoms);
            random_chain(&format!("synth_{i:04}"), n, &vocab, &mut rng)
        })
        .collect()
}
