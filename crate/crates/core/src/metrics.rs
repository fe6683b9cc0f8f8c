//! Molecule-quality and watermark metrics.
//!
//! Bonds are inferred from interatomic distances with a table of typical
//! covalent lengths; validity is a valence and connectivity check and is
//! not a full chemical sanitization.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::codec::Watermark;
use crate::error::{Error, Result};
use crate::molecule::Molecule;

const ELEMENTS_TOML: &str = include_str!("../data/elements.toml");
const BONDS_TOML: &str = include_str!("../data/bonds.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementData {
    pub weight: f64,
    pub valence: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BondEntry {
    pair: [String; 2],
    single: Option<f64>,
    double: Option<f64>,
    triple: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct BondFile {
    margin: f64,
    bonds: Vec<BondEntry>,
}

/// Bond lengths per unordered element pair plus per-element valences and
/// atomic weights.
#[derive(Debug, Clone)]
pub struct BondTable {
    pub margin: f64,
    /// Lengths indexed by bond order − 1; `None` for orders the pair lacks.
    lengths: HashMap<(String, String), [Option<f64>; 3]>,
    elements: BTreeMap<String, ElementData>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl BondTable {
    /// The table shipped with the crate.
    pub fn standard() -> Self {
        BondTable::from_toml(BONDS_TOML, ELEMENTS_TOML).expect("bundled chemistry tables are valid")
    }

    pub fn from_toml(bonds: &str, elements: &str) -> Result<Self> {
        let file: BondFile = toml::from_str(bonds).map_err(|e| Error::Config(format!("bond table: {e}")))?;
        let elements: BTreeMap<String, ElementData> =
            toml::from_str(elements).map_err(|e| Error::Config(format!("element table: {e}")))?;
        if !(file.margin > 0.0) {
            return Err(Error::Config("bond margin must be positive".into()));
        }
        let mut lengths = HashMap::new();
        for b in file.bonds {
            let l = [b.single, b.double, b.triple];
            if l.iter().flatten().any(|&x| !(x > 0.0)) {
                return Err(Error::Config(format!("non-positive bond length for {:?}", b.pair)));
            }
            if lengths.insert(pair_key(&b.pair[0], &b.pair[1]), l).is_some() {
                return Err(Error::Config(format!("duplicate bond entry {:?}", b.pair)));
            }
        }
        Ok(BondTable {
            margin: file.margin,
            lengths,
            elements,
        })
    }

    pub fn element(&self, symbol: &str) -> Result<&ElementData> {
        self.elements
            .get(symbol)
            .ok_or_else(|| Error::MissingEntry(format!("element {symbol}")))
    }

    /// Bond order for one pair at distance `d`.
    pub fn bond_order(&self, a: &str, b: &str, d: f64) -> Result<u32> {
        let l = self
            .lengths
            .get(&pair_key(a, b))
            .ok_or_else(|| Error::MissingEntry(format!("bond {a}-{b}")))?;
        Ok((0..3)
            .rev()
            .find(|&k| l[k].is_some_and(|len| (d - len).abs() <= self.margin))
            .map_or(0, |k| k as u32 + 1))
    }

    /// Tabulated length for a bond order in 1..=3.
    pub fn length(&self, a: &str, b: &str, order: u32) -> Result<Option<f64>> {
        let l = self
            .lengths
            .get(&pair_key(a, b))
            .ok_or_else(|| Error::MissingEntry(format!("bond {a}-{b}")))?;
        Ok(order.checked_sub(1).and_then(|k| l.get(k as usize).copied().flatten()))
    }

    pub fn max_valence(&self, symbol: &str) -> Result<u32> {
        Ok(self.element(symbol)?.valence.iter().copied().max().unwrap_or(0))
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Symmetric N×N bond-order matrix with zero diagonal.
pub fn infer_bonds(mol: &Molecule, table: &BondTable) -> Result<Vec<Vec<u32>>> {
    let n = mol.n_atoms();
    let mut orders = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let o = table.bond_order(
                &mol.element_symbols[i],
                &mol.element_symbols[j],
                dist(mol.positions[i], mol.positions[j]),
            )?;
            orders[i][j] = o;
            orders[j][i] = o;
        }
    }
    Ok(orders)
}

fn bond_sums(orders: &[Vec<u32>]) -> Vec<u32> {
    orders.iter().map(|row| row.iter().sum()).collect()
}

/// Per-atom flag: bond-order sum equals one of the element's valences.
pub fn stable_atoms(mol: &Molecule, table: &BondTable) -> Result<Vec<bool>> {
    let sums = bond_sums(&infer_bonds(mol, table)?);
    mol.element_symbols
        .iter()
        .zip(sums)
        .map(|(s, v)| Ok(table.element(s)?.valence.contains(&v)))
        .collect()
}

/// Fraction of atoms whose total bond order is an allowed valence.
pub fn atom_stability(mol: &Molecule, table: &BondTable) -> Result<f64> {
    let stable = stable_atoms(mol, table)?;
    Ok(stable.iter().filter(|&&s| s).count() as f64 / stable.len() as f64)
}

pub fn molecule_stability(mol: &Molecule, table: &BondTable) -> Result<bool> {
    Ok(stable_atoms(mol, table)?.into_iter().all(|s| s))
}

/// No atom above its valence limit and a connected bond graph.
pub fn validity(mol: &Molecule, table: &BondTable) -> Result<bool> {
    let orders = infer_bonds(mol, table)?;
    for (s, v) in mol.element_symbols.iter().zip(bond_sums(&orders)) {
        if v > table.max_valence(s)? {
            return Ok(false);
        }
    }
    Ok(connected(&orders))
}

fn connected(orders: &[Vec<u32>]) -> bool {
    let n = orders.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if orders[i][j] > 0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn hash_of<H: Hash>(v: &H) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

/// Neighborhood-refinement hash of the bond graph labelled by element and
/// bond order. Independent of atom order and rigid motion.
pub fn graph_hash(mol: &Molecule, table: &BondTable) -> Result<u64> {
    let orders = infer_bonds(mol, table)?;
    let n = orders.len();
    let mut labels: Vec<u64> = mol.element_symbols.iter().map(hash_of).collect();
    for _ in 0..n {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut nb: Vec<(u32, u64)> = (0..n)
                    .filter(|&j| orders[i][j] > 0)
                    .map(|j| (orders[i][j], labels[j]))
                    .collect();
                nb.sort_unstable();
                hash_of(&(labels[i], nb))
            })
            .collect();
        labels = next;
    }
    labels.sort_unstable();
    Ok(hash_of(&labels))
}

/// Distinct graph hashes over total.
pub fn uniqueness(mols: &[Molecule], table: &BondTable) -> Result<f64> {
    if mols.is_empty() {
        return Err(Error::InvalidMolecule("uniqueness of an empty list".into()));
    }
    let hashes = mols
        .iter()
        .map(|m| graph_hash(m, table))
        .collect::<Result<HashSet<_>>>()?;
    Ok(hashes.len() as f64 / mols.len() as f64)
}

/// Fraction of molecules whose graph hash is absent from `reference`.
pub fn novelty(mols: &[Molecule], reference: &HashSet<u64>, table: &BondTable) -> Result<f64> {
    if mols.is_empty() {
        return Err(Error::InvalidMolecule("novelty of an empty list".into()));
    }
    let mut novel = 0;
    for m in mols {
        if !reference.contains(&graph_hash(m, table)?) {
            novel += 1;
        }
    }
    Ok(novel as f64 / mols.len() as f64)
}

/// Sum of standard atomic weights, g/mol.
pub fn molecular_weight(mol: &Molecule, table: &BondTable) -> Result<f64> {
    mol.element_symbols
        .iter()
        .map(|s| Ok(table.element(s)?.weight))
        .sum()
}

pub fn bit_accuracy(m: &Watermark, m_prime: &Watermark) -> Result<f64> {
    bit_accuracy_bits(m.bits(), m_prime.bits())
}

pub fn bit_accuracy_bits(m: &[u8], m_prime: &[u8]) -> Result<f64> {
    if m.len() != m_prime.len() || m.is_empty() {
        return Err(Error::Watermark(format!(
            "bit accuracy of lengths {} and {}",
            m.len(),
            m_prime.len()
        )));
    }
    Ok(m.iter().zip(m_prime).filter(|(a, b)| a == b).count() as f64 / m.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fraction {
    pub count: usize,
    pub total: usize,
    pub value: f64,
}

impl Fraction {
    pub fn new(count: usize, total: usize) -> Self {
        Fraction {
            count,
            total,
            value: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        }
    }
}

/// Basic-property summary of a corpus. Atom stability counts atoms; the
/// others count molecules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub atom_stability: Fraction,
    pub mol_stability: Fraction,
    pub validity: Fraction,
    pub uniqueness: Fraction,
    pub novelty: Fraction,
}

impl QualityReport {
    pub fn compute(mols: &[Molecule], reference: &HashSet<u64>, table: &BondTable) -> Result<Self> {
        if mols.is_empty() {
            return Err(Error::InvalidMolecule("quality report of an empty corpus".into()));
        }
        let (mut stable_atoms_n, mut atoms, mut stable_mols, mut valid, mut novel) = (0, 0, 0, 0, 0);
        let mut hashes = HashSet::new();
        for m in mols {
            let s = stable_atoms(m, table)?;
            atoms += s.len();
            let k = s.iter().filter(|&&x| x).count();
            stable_atoms_n += k;
            stable_mols += (k == s.len()) as usize;
            valid += validity(m, table)? as usize;
            let h = graph_hash(m, table)?;
            novel += !reference.contains(&h) as usize;
            hashes.insert(h);
        }
        let n = mols.len();
        Ok(QualityReport {
            atom_stability: Fraction::new(stable_atoms_n, atoms),
            mol_stability: Fraction::new(stable_mols, n),
            validity: Fraction::new(valid, n),
            uniqueness: Fraction::new(hashes.len(), n),
            novelty: Fraction::new(novel, n),
        })
    }

    /// `(name, value)` in a fixed order.
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("atom_stability", self.atom_stability.value),
            ("mol_stability", self.mol_stability.value),
            ("validity", self.validity.value),
            ("uniqueness", self.uniqueness.value),
            ("novelty", self.novelty.value),
        ]
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::molecule::{Molecule, Vocabulary};

    pub const CH: f64 = 1.09;

    /// Tetrahedral CH4 at the tabulated C–H length.
    pub fn methane() -> Molecule {
        let s = CH / 3f64.sqrt();
        let pos = vec![[0.0; 3], [s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        Molecule::new("methane", &["C", "H", "H", "H", "H"], pos, None, &Vocabulary::qm9()).unwrap()
    }

    /// Carbon with five hydrogens at bonding distance.
    pub fn pentavalent_carbon() -> Molecule {
        let mut pos = vec![[0.0; 3], [0.0, 0.0, CH], [0.0, 0.0, -CH]];
        for k in 0..3 {
            let a = (k as f64) * 2.0 * std::f64::consts::PI / 3.0;
            pos.push([CH * a.cos(), CH * a.sin(), 0.0]);
        }
        Molecule::new("ch5", &["C", "H", "H", "H", "H", "H"], pos, None, &Vocabulary::qm9()).unwrap()
    }
}
