//! Molecule data model, XYZ / JSON-lines ingestion and padded batching.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{Real, Tensor};

const GEOM_DRUG_VOCAB: &str = include_str!("../data/geom_drug_elements.toml");

/// Ordered list of element symbols; the index of a symbol is its one-hot
/// slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub elements: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(elements: &[S]) -> Self {
        Vocabulary {
            elements: elements.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    /// H, C, N, O, F.
    pub fn qm9() -> Self {
        Vocabulary::new(&["H", "C", "N", "O", "F"])
    }

    /// The 16-element drug-like vocabulary shipped in `data/`.
    pub fn geom_drug() -> Self {
        toml::from_str(GEOM_DRUG_VOCAB).expect("bundled vocabulary parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("vocabulary: {e}")))
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.eq_ignore_ascii_case(symbol))
    }
}

/// A 3-D molecular geometry with node features. Atom types are stored as
/// vocabulary indices, so the one-hot invariant holds by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub id: String,
    pub positions: Vec<[f64; 3]>,
    pub type_index: Vec<usize>,
    pub n_types: usize,
    pub charges: Vec<f64>,
    pub element_symbols: Vec<String>,
}

impl Molecule {
    pub fn new(
        id: impl Into<String>,
        symbols: &[&str],
        positions: Vec<[f64; 3]>,
        charges: Option<Vec<f64>>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut type_index = Vec::with_capacity(symbols.len());
        let mut element_symbols = Vec::with_capacity(symbols.len());
        for s in symbols {
            let idx = vocab
                .index_of(s)
                .ok_or_else(|| Error::InvalidMolecule(format!("unknown element {s:?}")))?;
            type_index.push(idx);
            element_symbols.push(vocab.elements[idx].clone());
        }
        let charges = charges.unwrap_or_else(|| vec![0.0; symbols.len()]);
        let m = Molecule {
            id: id.into(),
            positions,
            type_index,
            n_types: vocab.len(),
            charges,
            element_symbols,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n < 2 {
            return Err(Error::InvalidMolecule(format!("{n} atoms; at least 2 required")));
        }
        if self.type_index.len() != n || self.charges.len() != n || self.element_symbols.len() != n {
            return Err(Error::InvalidMolecule("per-atom field lengths disagree".into()));
        }
        if self.type_index.iter().any(|&t| t >= self.n_types) {
            return Err(Error::InvalidMolecule("atom type outside vocabulary".into()));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMolecule("non-finite coordinate".into()));
        }
        if self.charges.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMolecule("non-finite charge".into()));
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    /// One-hot atom types, `N x e` row-major.
    pub fn atom_types(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_atoms() * self.n_types];
        for (i, &t) in self.type_index.iter().enumerate() {
            out[i * self.n_types + t] = 1.0;
        }
        out
    }

    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<Self> {
        let mut m = self.clone();
        m.positions = positions;
        m.validate()?;
        Ok(m)
    }

    pub fn edges(&self) -> EdgeSet {
        EdgeSet::complete(self.n_atoms())
    }
}

/// Complete-graph neighbor lists: row `i` holds every `j != i` ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    rows: Vec<Vec<usize>>,
}

impl EdgeSet {
    pub fn complete(n: usize) -> Self {
        EdgeSet {
            rows: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses consecutive XYZ frames. Line numbers in errors are 1-based and
/// absolute within `text`.
fn parse_xyz_frames(text: &str, vocab: &Vocabulary) -> Vec<Result<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let start = i;
        let count = match lines[i].trim().parse::<usize>() {
            Ok(c) => c,
            Err(_) => {
                out.push(Err(parse_err(i + 1, format!("expected atom count, got {:?}", lines[i].trim()))));
                return out;
            }
        };
        let comment = lines.get(i + 1).map(|s| s.trim()).unwrap_or("");
        let mut symbols = Vec::with_capacity(count);
        let mut positions = Vec::with_capacity(count);
        let mut charges = Vec::with_capacity(count);
        let mut any_charge = false;
        let mut failure = None;
        for a in 0..count {
            let ln = start + 2 + a;
            let Some(line) = lines.get(ln) else {
                failure = Some(parse_err(ln + 1, format!("expected {count} atom lines, file ended")));
                break;
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 4 {
                failure = Some(parse_err(ln + 1, format!("expected 'Element x y z', got {:?}", line.trim())));
                break;
            }
            if vocab.index_of(parts[0]).is_none() {
                failure = Some(parse_err(ln + 1, format!("unknown element {:?}", parts[0])));
                break;
            }
            let mut xyz = [0.0; 3];
            for k in 0..3 {
                match parts[k + 1].parse::<f64>() {
                    Ok(v) if v.is_finite() => xyz[k] = v,
                    _ => {
                        failure = Some(parse_err(ln + 1, format!("invalid coordinate {:?}", parts[k + 1])));
                        break;
                    }
                }
            }
            if failure.is_some() {
                break;
            }
            let charge = match parts.get(4) {
                Some(c) => match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        any_charge = true;
                        v
                    }
                    _ => {
                        failure = Some(parse_err(ln + 1, format!("invalid charge {c:?}")));
                        break;
                    }
                },
                None => 0.0,
            };
            symbols.push(parts[0]);
            positions.push(xyz);
            charges.push(charge);
        }
        i = start + 2 + count;
        if let Some(e) = failure {
            out.push(Err(e));
            return out;
        }
        let charges = any_charge.then_some(charges);
        out.push(
            Molecule::new(comment, &symbols, positions, charges, vocab)
                .map_err(|e| parse_err(start + 1, e.to_string())),
        );
    }
    out
}

/// Parses a single XYZ molecule: atom count, comment line (kept as the
/// molecule id), then `Element x y z [charge]` per atom.
pub fn parse_xyz(text: &str, vocab: &Vocabulary) -> Result<Molecule> {
    let mut frames = parse_xyz_frames(text, vocab);
    match frames.len() {
        0 => Err(parse_err(1, "empty input")),
        1 => frames.pop().unwrap(),
        _ => {
            frames.truncate(1);
            frames.pop().unwrap()?;
            Err(parse_err(1, "more than one molecule in input"))
        }
    }
}

/// Writes XYZ text; a fifth charge column is emitted when any charge is
/// nonzero. Coordinates use shortest round-trip formatting.
pub fn write_xyz(mol: &Molecule) -> String {
    let mut s = String::new();
    let with_charge = mol.charges.iter().any(|&c| c != 0.0);
    let _ = writeln!(s, "{}", mol.n_atoms());
    let _ = writeln!(s, "{}", mol.id.replace('\n', " "));
    for i in 0..mol.n_atoms() {
        let p = mol.positions[i];
        let _ = write!(s, "{} {:?} {:?} {:?}", mol.element_symbols[i], p[0], p[1], p[2]);
        if with_charge {
            let _ = write!(s, " {:?}", mol.charges[i]);
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Deserialize, Serialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<String>,
    elements: Vec<String>,
    positions: Vec<[f64; 3]>,
    #[serde(default)]
    charges: Option<Vec<f64>>,
}

pub fn molecule_to_json(mol: &Molecule) -> String {
    let rec = JsonRecord {
        id: Some(mol.id.clone()),
        elements: mol.element_symbols.clone(),
        positions: mol.positions.clone(),
        charges: Some(mol.charges.clone()),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn parse_json_line(line: &str, vocab: &Vocabulary) -> Result<Molecule> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::InvalidMolecule(e.to_string()))?;
    if rec.elements.len() != rec.positions.len() {
        return Err(Error::InvalidMolecule(format!(
            "{} elements but {} positions",
            rec.elements.len(),
            rec.positions.len()
        )));
    }
    let symbols: Vec<&str> = rec.elements.iter().map(String::as_str).collect();
    Molecule::new(rec.id.unwrap_or_default(), &symbols, rec.positions, rec.charges, vocab)
}

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if p.is_file() && matches!(ext, "xyz" | "jsonl" | "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn load_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<Result<Molecule>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mol").to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let records: Vec<Result<Molecule>> = if ext == "xyz" {
        parse_xyz_frames(&text, vocab)
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(ln, l)| {
                parse_json_line(l, vocab).map_err(|e| parse_err(ln + 1, e.to_string()))
            })
            .collect()
    };
    let multi = records.len() > 1;
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(r, res)| match res {
            Ok(mut m) => {
                if m.id.is_empty() {
                    m.id = if multi { format!("{stem}:{}", r + 1) } else { stem.clone() };
                }
                Ok(m)
            }
            Err(e) => Err(Error::Corpus {
                path: path.to_path_buf(),
                record: r + 1,
                message: e.to_string(),
            }),
        })
        .collect())
}

/// Loads a file or a directory of `.xyz` / `.jsonl` files in filename
/// order. Any malformed record fails the whole load.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    let (mols, mut failures) = load_corpus_lenient(path, vocab)?;
    if !failures.is_empty() {
        return Err(failures.remove(0));
    }
    Ok(mols)
}

/// Like [`load_corpus`] but returns every failure alongside the molecules
/// that did parse.
pub fn load_corpus_lenient(path: &Path, vocab: &Vocabulary) -> Result<(Vec<Molecule>, Vec<Error>)> {
    let mut mols = Vec::new();
    let mut failures = Vec::new();
    let mut seen_any = false;
    for file in corpus_files(path)? {
        for rec in load_file(&file, vocab)? {
            seen_any = true;
            match rec {
                Ok(m) => mols.push(m),
                Err(e) => failures.push(e),
            }
        }
    }
    if !seen_any {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok((mols, failures))
}

/// Zero-padded batch. Tensors are stored in `f64` with layouts
/// positions `[B,1,N,3]`, atom types `[B,1,N,e]`, charges `[B,1,N,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeBatch {
    pub sizes: Vec<usize>,
    pub n_max: usize,
    pub n_types: usize,
    pub positions: Vec<f64>,
    pub atom_types: Vec<f64>,
    pub charges: Vec<f64>,
    pub ids: Vec<String>,
    pub symbols: Vec<Vec<String>>,
}

impl MoleculeBatch {
    pub fn from_molecules(mols: &[&Molecule]) -> Result<Self> {
        let first = mols.first().ok_or_else(|| Error::InvalidMolecule("empty batch".into()))?;
        let n_types = first.n_types;
        if mols.iter().any(|m| m.n_types != n_types) {
            return Err(Error::InvalidMolecule("mixed vocabularies in one batch".into()));
        }
        let b = mols.len();
        let n_max = mols.iter().map(|m| m.n_atoms()).max().unwrap_or(0);
        let mut positions = vec![0.0; b * n_max * 3];
        let mut atom_types = vec![0.0; b * n_max * n_types];
        let mut charges = vec![0.0; b * n_max];
        for (bi, m) in mols.iter().enumerate() {
            for i in 0..m.n_atoms() {
                positions[(bi * n_max + i) * 3..(bi * n_max + i) * 3 + 3].copy_from_slice(&m.positions[i]);
                atom_types[(bi * n_max + i) * n_types + m.type_index[i]] = 1.0;
                charges[bi * n_max + i] = m.charges[i];
            }
        }
        Ok(MoleculeBatch {
            sizes: mols.iter().map(|m| m.n_atoms()).collect(),
            n_max,
            n_types,
            positions,
            atom_types,
            charges,
            ids: mols.iter().map(|m| m.id.clone()).collect(),
            symbols: mols.iter().map(|m| m.element_symbols.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// `mask[b * n_max + i] == 1` iff atom `i` of molecule `b` is real.
    pub fn mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.len() * self.n_max];
        for (b, &s) in self.sizes.iter().enumerate() {
            m[b * self.n_max..b * self.n_max + s].iter_mut().for_each(|v| *v = 1);
        }
        m
    }

    pub fn positions_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len(), 1, self.n_max, 3], &self.positions).expect("consistent batch")
    }

    pub fn atom_types_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len(), 1, self.n_max, self.n_types], &self.atom_types).expect("consistent batch")
    }

    pub fn charges_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len(), 1, self.n_max, 1], &self.charges).expect("consistent batch")
    }

    /// Positions of molecule `b`, padding stripped.
    pub fn molecule_positions(&self, b: usize) -> Vec<[f64; 3]> {
        (0..self.sizes[b])
            .map(|i| {
                let o = (b * self.n_max + i) * 3;
                [self.positions[o], self.positions[o + 1], self.positions[o + 2]]
            })
            .collect()
    }

    /// Rebuilds the member molecules, replacing positions with `positions`
    /// (same `[B,1,N,3]` layout) when given.
    pub fn unbatch(&self, positions: Option<&[f64]>) -> Vec<Molecule> {
        let pos = positions.unwrap_or(&self.positions);
        (0..self.len())
            .map(|b| {
                let s = self.sizes[b];
                let mut type_index = Vec::with_capacity(s);
                for i in 0..s {
                    let row = &self.atom_types[(b * self.n_max + i) * self.n_types..(b * self.n_max + i + 1) * self.n_types];
                    type_index.push(row.iter().position(|&v| v == 1.0).expect("one-hot row"));
                }
                Molecule {
                    id: self.ids[b].clone(),
                    positions: (0..s)
                        .map(|i| {
                            let o = (b * self.n_max + i) * 3;
                            [pos[o], pos[o + 1], pos[o + 2]]
                        })
                        .collect(),
                    type_index,
                    n_types: self.n_types,
                    charges: self.charges[b * self.n_max..b * self.n_max + s].to_vec(),
                    element_symbols: self.symbols[b].clone(),
                }
            })
            .collect()
    }
}

/// Groups molecules into consecutive batches of at most `batch_size`.
pub fn batch_molecules(mols: &[Molecule], batch_size: usize) -> Result<Vec<MoleculeBatch>> {
    if mols.is_empty() {
        return Err(Error::InvalidMolecule("cannot batch an empty list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    mols.chunks(batch_size)
        .map(|chunk| MoleculeBatch::from_molecules(&chunk.iter().collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str = "3\nwater\nO 0 0 0\nH 0.96 0 0\nH -0.24 0.93 0";

    #[test]
    fn parses_water() {
        let m = parse_xyz(WATER, &Vocabulary::qm9()).unwrap();
        assert_eq!(m.n_atoms(), 3);
        assert_eq!(m.element_symbols, ["O", "H", "H"]);
        assert_eq!(m.id, "water");
        assert_eq!(m.charges, [0.0; 3]);
        assert_eq!(m.positions[2], [-0.24, 0.93, 0.0]);
        let onehot = m.atom_types();
        for row in onehot.chunks(5) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn single_atom_rejected() {
        assert!(parse_xyz("1\n\nC 1.0 2.0 3.0", &Vocabulary::qm9()).is_err());
    }

    #[test]
    fn unknown_element_names_line() {
        match parse_xyz("2\n\nC 0 0 0\nXx 1 1 1", &Vocabulary::qm9()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("Xx"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_count_and_coordinates() {
        let v = Vocabulary::qm9();
        assert!(matches!(parse_xyz("two\n\nC 0 0 0\nC 1 1 1", &v), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("2\n\nC 0 0 0\nC 1 abc 1", &v), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_xyz("3\n\nC 0 0 0\nC 1 1 1", &v), Err(Error::Parse { .. })));
    }

    #[test]
    fn charge_column_round_trips() {
        let v = Vocabulary::qm9();
        let m = parse_xyz("2\nion\nN 0 0 0 1\nO 1.2 0 0 -1", &v).unwrap();
        assert_eq!(m.charges, [1.0, -1.0]);
        let text = write_xyz(&m);
        assert_eq!(text.lines().nth(2).unwrap().split_whitespace().count(), 5);
        assert_eq!(parse_xyz(&text, &v).unwrap(), m);
    }

    #[test]
    fn twelve_significant_digits_preserved() {
        let v = Vocabulary::qm9();
        let m = Molecule::new(
            "p",
            &["C", "H"],
            vec![[1.23456789012, -9.87654321098, 0.000123456789012], [0.0, 0.0, 1.0]],
            None,
            &v,
        )
        .unwrap();
        let back = parse_xyz(&write_xyz(&m), &v).unwrap();
        for (a, b) in m.positions.iter().flatten().zip(back.positions.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn json_record_parses() {
        let v = Vocabulary::qm9();
        let m = parse_json_line(r#"{"elements":["C","O"],"positions":[[0,0,0],[1.2,0,0]]}"#, &v).unwrap();
        assert_eq!(m.n_atoms(), 2);
        let again = parse_json_line(&molecule_to_json(&m), &v).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn edge_set_rows_exclude_self() {
        let e = EdgeSet::complete(4);
        assert_eq!(e.neighbors(0), [1, 2, 3]);
        assert_eq!(e.neighbors(2), [0, 1, 3]);
    }

    #[test]
    fn batching_pads_and_masks() {
        let v = Vocabulary::qm9();
        let mk = |n: usize| {
            let pos = (0..n).map(|i| [i as f64 + 1.0, 0.0, 0.0]).collect();
            Molecule::new(format!("m{n}"), &vec!["C"; n], pos, None, &v).unwrap()
        };
        let mols = vec![mk(2), mk(4), mk(3)];
        let batches = batch_molecules(&mols, 2).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].n_max, 4);
        assert_eq!(batches[0].sizes, [2, 4]);
        assert_eq!(batches[1].n_max, 3);
        let mask = batches[0].mask();
        assert_eq!(mask, [1, 1, 0, 0, 1, 1, 1, 1]);
        // padded rows are zero
        assert!(batches[0].positions[6..12].iter().all(|&x| x == 0.0));
        let back: Vec<_> = batches.iter().flat_map(|b| b.unbatch(None)).collect();
        assert_eq!(back, mols);
    }

    #[test]
    fn batch_counts() {
        let v = Vocabulary::qm9();
        let m = Molecule::new("m", &["C", "H"], vec![[0.0; 3], [1.0, 0.0, 0.0]], None, &v).unwrap();
        assert_eq!(batch_molecules(std::slice::from_ref(&m), 64).unwrap()[0].len(), 1);
        let many = vec![m; 130];
        let sizes: Vec<_> = batch_molecules(&many, 64).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [64, 64, 2]);
    }

    #[test]
    fn geom_drug_vocabulary_has_sixteen_elements() {
        assert_eq!(Vocabulary::geom_drug().len(), 16);
        assert_eq!(Vocabulary::qm9().len(), 5);
    }
}
