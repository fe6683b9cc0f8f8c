//! The subcommands behind the `molmark` binary: train, embed, extract,
//! attack, evaluate and ablate. Every command writes its reports into an
//! output directory; nothing depends on wall-clock time, so identical
//! inputs give byte-identical files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, Variant, Watermark, WatermarkModel};
use crate::error::{Error, Result};
use crate::metrics::{bit_accuracy_bits, graph_hash, molecular_weight, BondTable, QualityReport};
use crate::molecule::{load_corpus, write_xyz, Molecule, Vocabulary};
use crate::runtime::{AdamConfig, ParamStore};
use crate::stats::DistributionStats;
use crate::training::{
    checkpoint_path, load_checkpoint, load_model, EpochMetrics, ScheduleParams, StopRule, TrainConfig, Trainer,
};
use crate::transform::{apply, SweepKind, SweepSpec};

/// Precision used for every model the CLI trains or loads.
pub type Precision = f32;

const EXTRACT_CHUNK: usize = 64;

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Molecules for post-training evaluation; the training corpus if absent.
    #[serde(default)]
    pub eval_corpus: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub codec: CodecConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub stop: Option<StopRule>,
    #[serde(default)]
    pub augment: bool,
    /// Element symbols in one-hot order; QM9's five when absent.
    #[serde(default)]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default = "SweepSpec::full_suite")]
    pub sweeps: Vec<SweepSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_batch() -> usize {
    32
}
fn default_every() -> usize {
    25
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, codec: CodecConfig, epochs: usize, seed: u64) -> Self {
        RunConfig {
            corpus: corpus.into(),
            eval_corpus: None,
            out: default_out(),
            codec,
            schedule: ScheduleParams::default(),
            adam: AdamConfig::default(),
            epochs,
            seed,
            batch_size: default_batch(),
            checkpoint_every: default_every(),
            stop: None,
            augment: false,
            vocabulary: None,
            sweeps: SweepSpec::full_suite(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths inside the file are relative to the file
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            for p in [Some(&mut cfg.corpus), cfg.eval_corpus.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        for s in &self.sweeps {
            s.validate()?;
        }
        if let Some(v) = &self.vocabulary {
            if v.len() != self.codec.n_types {
                return Err(Error::Config(format!(
                    "vocabulary has {} elements but codec.n_types is {}",
                    v.len(),
                    self.codec.n_types
                )));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            codec: self.codec.clone(),
            schedule: self.schedule,
            adam: self.adam,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            stop: self.stop,
            augment: self.augment,
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        match &self.vocabulary {
            Some(v) => Ok(Vocabulary::new(v)),
            None => vocabulary_for(self.codec.n_types),
        }
    }
}

/// The bundled vocabulary with `n_types` elements.
pub fn vocabulary_for(n_types: usize) -> Result<Vocabulary> {
    for v in [Vocabulary::qm9(), Vocabulary::geom_drug()] {
        if v.len() == n_types {
            return Ok(v);
        }
    }
    Err(Error::Config(format!("no bundled vocabulary with {n_types} element types")))
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with object keys in sorted order.
fn sorted_json<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corpus {
            path: path.to_path_buf(),
            record: 0,
            message: format!("{other:?}"),
        },
    }
}

fn load_molecules(path: &Path, vocab: &Vocabulary) -> Result<Vec<Molecule>> {
    require_path(path, "corpus")?;
    let mols = load_corpus(path, vocab)?;
    let mut seen = HashSet::new();
    for m in &mols {
        if !seen.insert(m.id.as_str()) {
            return Err(Error::InvalidMolecule(format!("duplicate molecule id {:?} in {}", m.id, path.display())));
        }
    }
    Ok(mols)
}

fn load_for_inference(checkpoint: &Path) -> Result<(WatermarkModel, ParamStore<Precision>)> {
    require_path(checkpoint, "checkpoint")?;
    load_model::<Precision>(checkpoint)
}

/// Hard extraction over any number of molecules, in input order.
fn extract_all(model: &WatermarkModel, params: &ParamStore<Precision>, mols: &[Molecule]) -> Result<Vec<Watermark>> {
    let mut out = Vec::with_capacity(mols.len());
    for chunk in mols.chunks(EXTRACT_CHUNK) {
        out.extend(model.extract_batch(params, chunk)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub checkpoint: PathBuf,
    pub last: Option<EpochMetrics>,
}

/// Trains from scratch, or continues from `resume`, writing the config
/// snapshot, `metrics.jsonl` and checkpoints into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpus = load_molecules(&cfg.corpus, &cfg.vocab()?)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.toml"), &cfg.to_toml())?;
    let mut trainer = match resume {
        Some(path) => {
            require_path(path, "checkpoint")?;
            let mut state = load_checkpoint::<Precision>(path)?;
            if state.config.codec != cfg.codec {
                return Err(Error::Config("checkpoint codec differs from the config".into()));
            }
            state.config = cfg.train_config();
            Trainer::from_checkpoint(state)?
        }
        None => {
            let log = cfg.out.join("metrics.jsonl");
            if log.exists() {
                fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
            Trainer::new(cfg.train_config())?
        }
    };
    let trace = trainer.train_to_dir(&corpus, &cfg.out)?;
    Ok(TrainSummary {
        epochs_completed: trainer.state.epoch,
        checkpoint: checkpoint_path(&cfg.out),
        last: trace.last().copied(),
    })
}

// ---------------------------------------------------------------- embed

/// One manifest row: which bits went into which molecule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub molecule_id: String,
    pub bits: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    require_path(path, "manifest")?;
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row: ManifestEntry = rec.map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            record: i + 1,
            message: e.to_string(),
        })?;
        Watermark::parse(&row.bits)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<()> {
    write_csv(path, rows)
}

/// Where the bits for `embed` come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkSource {
    /// The same bits for every molecule.
    Fixed(Watermark),
    /// Independent random bits per molecule from this seed.
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutput {
    pub molecules: Vec<Molecule>,
    pub manifest: Vec<ManifestEntry>,
}

/// Embeds into every molecule. Writes `watermarked.xyz` and `manifest.csv`
/// into `out`.
pub fn cmd_embed(
    checkpoint: &Path,
    corpus: &Path,
    source: &MarkSource,
    capacity: Option<usize>,
    out: &Path,
) -> Result<EmbedOutput> {
    let (model, params) = load_for_inference(checkpoint)?;
    let l = model.config.capacity;
    if let Some(c) = capacity.filter(|&c| c != l) {
        return Err(Error::Config(format!("capacity {c} does not match the checkpoint's {l}")));
    }
    let mols = load_molecules(corpus, &vocabulary_for(model.config.n_types)?)?;
    let marks: Vec<Watermark> = match source {
        MarkSource::Fixed(w) => {
            if w.len() != l {
                return Err(Error::Watermark(format!("{} bits given, checkpoint embeds {l}", w.len())));
            }
            vec![w.clone(); mols.len()]
        }
        MarkSource::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..mols.len()).map(|_| Watermark::random(l, &mut rng)).collect::<Result<_>>()?
        }
    };
    let mut embedded = Vec::with_capacity(mols.len());
    for (chunk, mk) in mols.chunks(EXTRACT_CHUNK).zip(marks.chunks(EXTRACT_CHUNK)) {
        let refs: Vec<&Watermark> = mk.iter().collect();
        embedded.extend(model.embed_batch(&params, chunk, &refs)?);
    }
    let manifest: Vec<ManifestEntry> = embedded
        .iter()
        .zip(&marks)
        .map(|(m, w)| ManifestEntry {
            molecule_id: m.id.clone(),
            bits: w.to_string(),
        })
        .collect();
    create_dir(out)?;
    let xyz: String = embedded.iter().map(write_xyz).collect();
    write_file(&out.join("watermarked.xyz"), &xyz)?;
    write_manifest(&out.join("manifest.csv"), &manifest)?;
    Ok(EmbedOutput {
        molecules: embedded,
        manifest,
    })
}

// -------------------------------------------------------------- extract

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub extracted: Vec<ManifestEntry>,
    /// Mean bit accuracy against the manifest, when one was given.
    pub bit_accuracy: Option<f64>,
}

fn manifest_lookup<'a>(manifest: &'a [ManifestEntry], mols: &[Molecule]) -> Result<Vec<&'a ManifestEntry>> {
    let by_id: HashMap<&str, &ManifestEntry> = manifest.iter().map(|e| (e.molecule_id.as_str(), e)).collect();
    mols.iter()
        .map(|m| {
            by_id
                .get(m.id.as_str())
                .copied()
                .ok_or_else(|| Error::MissingEntry(format!("manifest has no entry for molecule {:?}", m.id)))
        })
        .collect()
}

/// Reads the bits out of every molecule; writes `extracted.csv` and, with a
/// manifest, `extract.json`.
pub fn cmd_extract(checkpoint: &Path, corpus: &Path, manifest: Option<&Path>, out: &Path) -> Result<ExtractReport> {
    let (model, params) = load_for_inference(checkpoint)?;
    let mols = load_molecules(corpus, &vocabulary_for(model.config.n_types)?)?;
    let got = extract_all(&model, &params, &mols)?;
    let extracted: Vec<ManifestEntry> = mols
        .iter()
        .zip(&got)
        .map(|(m, w)| ManifestEntry {
            molecule_id: m.id.clone(),
            bits: w.to_string(),
        })
        .collect();
    let bit_accuracy = match manifest {
        Some(p) => {
            let rows = read_manifest(p)?;
            let expected = manifest_lookup(&rows, &mols)?;
            let mut sum = 0.0;
            for (e, w) in expected.iter().zip(&got) {
                sum += bit_accuracy_bits(Watermark::parse(&e.bits)?.bits(), w.bits())?;
            }
            Some(sum / mols.len() as f64)
        }
        None => None,
    };
    create_dir(out)?;
    write_manifest(&out.join("extracted.csv"), &extracted)?;
    let report = ExtractReport {
        extracted,
        bit_accuracy,
    };
    if bit_accuracy.is_some() {
        write_file(&out.join("extract.json"), &sorted_json(&report))?;
    }
    Ok(report)
}

// --------------------------------------------------------------- attack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformResult {
    pub kind: SweepKind,
    pub axis: String,
    pub value: f64,
    pub mean_accuracy: f64,
    pub stats: DistributionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeResult {
    pub molecule_id: String,
    pub baseline_accuracy: f64,
    pub min_accuracy: f64,
    /// Extracted bits identical for the unattacked molecule and every
    /// transform of the sweep.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub baseline: DistributionStats,
    pub baseline_mean: f64,
    pub transforms: Vec<TransformResult>,
    pub molecules: Vec<MoleculeResult>,
    pub constant_fraction: f64,
}

impl RobustnessReport {
    /// Mean accuracy over every molecule and transform of one sweep kind.
    pub fn mean_for(&self, kind: SweepKind) -> Option<f64> {
        let v: Vec<f64> = self.transforms.iter().filter(|t| t.kind == kind).map(|t| t.mean_accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Serialize)]
struct TransformRow<'a> {
    kind: SweepKind,
    axis: &'a str,
    value: f64,
    mean_accuracy: f64,
    median: f64,
    q1: f64,
    q3: f64,
    iqr: f64,
    whisker_low: f64,
    whisker_high: f64,
}

/// Runs every sweep transform over every molecule against known bits.
/// Molecules are processed in parallel; results keep input order.
pub fn robustness(
    model: &WatermarkModel,
    params: &ParamStore<Precision>,
    mols: &[Molecule],
    expected: &[Watermark],
    sweeps: &[SweepSpec],
) -> Result<RobustnessReport> {
    if mols.is_empty() || mols.len() != expected.len() {
        return Err(Error::InvalidMolecule(format!(
            "{} molecules but {} expected watermarks",
            mols.len(),
            expected.len()
        )));
    }
    let mut plan = Vec::new();
    for s in sweeps {
        for (v, t) in crate::transform::sweep(s)? {
            plan.push((s.kind, s.axis, v, t));
        }
    }
    // per molecule: baseline accuracy, then one accuracy per plan entry
    let rows: Vec<(Vec<f64>, bool)> = mols
        .par_iter()
        .zip(expected.par_iter())
        .map(|(m, w)| -> Result<(Vec<f64>, bool)> {
            let mut copies = vec![m.clone()];
            for (_, _, _, t) in &plan {
                copies.push(m.with_positions(apply(&m.positions, t))?);
            }
            let got = extract_all(model, params, &copies)?;
            let constant = got.iter().all(|g| g == &got[0]);
            let acc = got.iter().map(|g| bit_accuracy_bits(w.bits(), g.bits())).collect::<Result<_>>()?;
            Ok((acc, constant))
        })
        .collect::<Result<_>>()?;
    let baseline_values: Vec<f64> = rows.iter().map(|r| r.0[0]).collect();
    let mut transforms = Vec::with_capacity(plan.len());
    for (k, (kind, axis, value, _)) in plan.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().map(|r| r.0[k + 1]).collect();
        transforms.push(TransformResult {
            kind: *kind,
            axis: axis.to_string(),
            value: *value,
            mean_accuracy: mean(&vals),
            stats: DistributionStats::compute(&vals)?,
        });
    }
    let molecules: Vec<MoleculeResult> = mols
        .iter()
        .zip(&rows)
        .map(|(m, (acc, constant))| MoleculeResult {
            molecule_id: m.id.clone(),
            baseline_accuracy: acc[0],
            min_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
            constant: *constant,
        })
        .collect();
    let constant_fraction = molecules.iter().filter(|m| m.constant).count() as f64 / molecules.len() as f64;
    Ok(RobustnessReport {
        baseline: DistributionStats::compute(&baseline_values)?,
        baseline_mean: mean(&baseline_values),
        transforms,
        molecules,
        constant_fraction,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Attack sweep over a watermarked corpus. Writes `attack.json`,
/// `attack_transforms.csv` and `attack_molecules.csv`.
pub fn cmd_attack(
    checkpoint: &Path,
    corpus: &Path,
    manifest: &Path,
    sweeps: &[SweepSpec],
    out: &Path,
) -> Result<RobustnessReport> {
    let (model, params) = load_for_inference(checkpoint)?;
    let mols = load_molecules(corpus, &vocabulary_for(model.config.n_types)?)?;
    let rows = read_manifest(manifest)?;
    let expected = manifest_lookup(&rows, &mols)?
        .into_iter()
        .map(|e| Watermark::parse(&e.bits))
        .collect::<Result<Vec<_>>>()?;
    if let Some(w) = expected.iter().find(|w| w.len() != model.config.capacity) {
        return Err(Error::Watermark(format!(
            "manifest entry {w} has {} bits, checkpoint extracts {}",
            w.len(),
            model.config.capacity
        )));
    }
    let report = robustness(&model, &params, &mols, &expected, sweeps)?;
    write_attack(&report, out)?;
    Ok(report)
}

pub fn write_attack(report: &RobustnessReport, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join("attack.json"), &sorted_json(report))?;
    let rows: Vec<TransformRow> = report
        .transforms
        .iter()
        .map(|t| TransformRow {
            kind: t.kind,
            axis: &t.axis,
            value: t.value,
            mean_accuracy: t.mean_accuracy,
            median: t.stats.median,
            q1: t.stats.q1,
            q3: t.stats.q3,
            iqr: t.stats.iqr,
            whisker_low: t.stats.whisker_low,
            whisker_high: t.stats.whisker_high,
        })
        .collect();
    write_csv(&out.join("attack_transforms.csv"), &rows)?;
    write_csv(&out.join("attack_molecules.csv"), &report.molecules)
}

// ------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub original: QualityReport,
    pub watermarked: QualityReport,
    /// Watermarked minus original, per metric.
    pub deltas: BTreeMap<String, f64>,
    pub weight_original: DistributionStats,
    pub weight_watermarked: DistributionStats,
    /// Per-atom ‖p′ − p‖ over the matched pairs.
    pub displacement: DistributionStats,
}

#[derive(Serialize)]
struct EvaluationRow {
    metric: &'static str,
    original: f64,
    watermarked: f64,
    delta: f64,
}

/// Compares a corpus with its watermarked counterpart, matched by position.
/// Novelty is measured against `reference` (empty when absent).
pub fn evaluate_corpora(
    original: &[Molecule],
    watermarked: &[Molecule],
    reference: &[Molecule],
    table: &BondTable,
) -> Result<EvaluationReport> {
    if original.len() != watermarked.len() {
        return Err(Error::InvalidMolecule(format!(
            "corpus size mismatch: {} original, {} watermarked",
            original.len(),
            watermarked.len()
        )));
    }
    let mut displacement = Vec::new();
    for (a, b) in original.iter().zip(watermarked) {
        if a.element_symbols != b.element_symbols {
            return Err(Error::InvalidMolecule(format!("molecules {:?} and {:?} have different atoms", a.id, b.id)));
        }
        for (p, q) in a.positions.iter().zip(&b.positions) {
            displacement.push(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt());
        }
    }
    let refs: HashSet<u64> = reference.iter().map(|m| graph_hash(m, table)).collect::<Result<_>>()?;
    let o = QualityReport::compute(original, &refs, table)?;
    let w = QualityReport::compute(watermarked, &refs, table)?;
    let deltas = o
        .values()
        .iter()
        .zip(w.values())
        .map(|((name, a), (_, b))| (name.to_string(), b - a))
        .collect();
    let weights = |ms: &[Molecule]| -> Result<Vec<f64>> { ms.iter().map(|m| molecular_weight(m, table)).collect() };
    Ok(EvaluationReport {
        deltas,
        weight_original: DistributionStats::compute(&weights(original)?)?,
        weight_watermarked: DistributionStats::compute(&weights(watermarked)?)?,
        displacement: DistributionStats::compute(&displacement)?,
        original: o,
        watermarked: w,
    })
}

/// Writes `evaluate.json` and `evaluate.csv`.
pub fn cmd_evaluate(
    original: &Path,
    watermarked: &Path,
    reference: Option<&Path>,
    vocab: &Vocabulary,
    out: &Path,
) -> Result<EvaluationReport> {
    let o = load_molecules(original, vocab)?;
    let w = load_molecules(watermarked, vocab)?;
    let r = match reference {
        Some(p) => load_molecules(p, vocab)?,
        None => Vec::new(),
    };
    let report = evaluate_corpora(&o, &w, &r, &BondTable::standard())?;
    create_dir(out)?;
    write_file(&out.join("evaluate.json"), &sorted_json(&report))?;
    let rows: Vec<EvaluationRow> = report
        .original
        .values()
        .iter()
        .zip(report.watermarked.values())
        .map(|(&(metric, a), (_, b))| EvaluationRow {
            metric,
            original: a,
            watermarked: b,
            delta: b - a,
        })
        .collect();
    write_csv(&out.join("evaluate.csv"), &rows)?;
    Ok(report)
}

// --------------------------------------------------------------- ablate

/// One line of the ablation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub encoder_channels: usize,
    pub epochs: usize,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub bit_accuracy_rotation: Option<f64>,
    pub bit_accuracy_translation: Option<f64>,
    pub bit_accuracy_reflection: Option<f64>,
}

/// Trains the original model and the three embedder ablations with the
/// same seed and corpus, then scores each on the evaluation corpus with
/// seeded random watermarks. Each run lands in `out/<variant>/`; the table
/// goes to `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let train = load_molecules(&cfg.corpus, &vocab)?;
    let eval = match &cfg.eval_corpus {
        Some(p) => load_molecules(p, &vocab)?,
        None => train.clone(),
    };
    let table = BondTable::standard();
    let refs: HashSet<u64> = train.iter().map(|m| graph_hash(m, &table)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(4);
    for v in Variant::ALL {
        let mut run = cfg.clone();
        run.codec = cfg.codec.clone().with_variant(v);
        run.out = cfg.out.join(v.to_string().to_lowercase());
        let summary = cmd_train(&run, None)?;
        let (model, params) = load_for_inference(&summary.checkpoint)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let marks: Vec<Watermark> = (0..eval.len())
            .map(|_| Watermark::random(run.codec.capacity, &mut rng))
            .collect::<Result<_>>()?;
        let mut embedded = Vec::with_capacity(eval.len());
        for (chunk, mk) in eval.chunks(EXTRACT_CHUNK).zip(marks.chunks(EXTRACT_CHUNK)) {
            let refs: Vec<&Watermark> = mk.iter().collect();
            embedded.extend(model.embed_batch(&params, chunk, &refs)?);
        }
        let q = QualityReport::compute(&embedded, &refs, &table)?;
        let r = robustness(&model, &params, &embedded, &marks, &run.sweeps)?;
        write_attack(&r, &run.out)?;
        rows.push(AblationRow {
            variant: v,
            encoder_channels: run.codec.encoder_channels(),
            epochs: summary.epochs_completed,
            atom_stability: q.atom_stability.value,
            mol_stability: q.mol_stability.value,
            validity: q.validity.value,
            uniqueness: q.uniqueness.value,
            novelty: q.novelty.value,
            bit_accuracy_rotation: r.mean_for(SweepKind::Rotation),
            bit_accuracy_translation: r.mean_for(SweepKind::Translation),
            bit_accuracy_reflection: r.mean_for(SweepKind::Reflection),
        });
    }
    write_csv(&cfg.out.join("ablation.csv"), &rows)?;
    write_file(&cfg.out.join("ablation.json"), &sorted_json(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_corpus;
    use crate::transform::Axis;

    fn toy_config(dir: &Path) -> RunConfig {
        let corpus = synthetic_corpus(6, 4, 6, 3).unwrap();
        let xyz: String = corpus.iter().map(write_xyz).collect();
        fs::write(dir.join("toy.xyz"), xyz).unwrap();
        let mut codec = CodecConfig::new(4);
        codec.channels = 4;
        codec.d_model = 4;
        codec.growth = 2;
        let mut cfg = RunConfig::new(dir.join("toy.xyz"), codec, 2, 11);
        cfg.out = dir.join("run");
        cfg.batch_size = 3;
        cfg.sweeps = vec![SweepSpec {
            kind: SweepKind::Rotation,
            axis: Axis::Z,
            start: 0.0,
            stop: 90.0,
            step: 45.0,
        }];
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml("corpus = \"c.xyz\"\nepochs = 3\n[codec]\ncapacity = 8\n").unwrap();
        assert_eq!(cfg.sweeps.len(), 9);
        assert_eq!(cfg.codec.channels, 64);
        assert_eq!(cfg.schedule, ScheduleParams::default());
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
corpus = "train.xyz"
out = "runs/l8"
epochs = 400
seed = 1
batch_size = 8
augment = true

[codec]
capacity = 8
channels = 64
d_model = 64
growth = 16
aggregation = "SUM"
use_atom_embedder = true
use_edge_embedder = true

[schedule]
rho = 0.01
beta = 0.25
delta = 100.0
f = 50

[stop]
accuracy = 0.95
displacement = 0.15
patience = 3

[[sweeps]]
kind = "rotation"
axis = "Z"
start = 0.0
stop = 360.0
step = 10.0
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.sweeps.len(), 1);
        assert_eq!(cfg.stop.unwrap().patience, 3);
        assert_eq!(cfg.train_config().batch_size, 8);
        assert!(cfg.augment);
    }

    #[test]
    fn vocabulary_must_match_types() {
        let text = "corpus = \"c\"\nepochs = 1\nvocabulary = [\"C\"]\n[codec]\ncapacity = 2\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.epochs = 0;
        let s = cmd_train(&cfg, None).unwrap();
        assert_eq!(s.epochs_completed, 0);
        assert!(s.checkpoint.exists());
        assert!(cfg.out.join("config.toml").exists());
    }

    #[test]
    fn missing_corpus_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.corpus = dir.path().join("nope.xyz");
        let e = cmd_train(&cfg, None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn embed_fixed_mark_and_attack() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let s = cmd_train(&cfg, None).unwrap();
        let out = dir.path().join("emb");
        let mark = Watermark::parse("1010").unwrap();
        let e = cmd_embed(&s.checkpoint, &cfg.corpus, &MarkSource::Fixed(mark), None, &out).unwrap();
        assert_eq!(e.manifest.len(), 6);
        assert!(e.manifest.iter().all(|r| r.bits == "1010"));
        let original = load_corpus(&cfg.corpus, &Vocabulary::qm9()).unwrap();
        for (a, b) in original.iter().zip(&e.molecules) {
            assert_eq!(a.element_symbols, b.element_symbols);
            assert_eq!(a.charges, b.charges);
            assert_eq!(a.id, b.id);
        }
        let err = cmd_embed(&s.checkpoint, &cfg.corpus, &MarkSource::Seeded(1), Some(8), &out).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let wm = out.join("watermarked.xyz");
        let manifest = out.join("manifest.csv");
        assert_eq!(read_manifest(&manifest).unwrap(), e.manifest);
        let r = cmd_attack(&s.checkpoint, &wm, &manifest, &cfg.sweeps, &dir.path().join("atk")).unwrap();
        assert_eq!(r.transforms.len(), 3);
        assert_eq!(r.molecules.len(), 6);
        // rotation by 0 degrees is the identity
        assert_eq!(r.transforms[0].mean_accuracy, r.baseline_mean);
        let x = cmd_extract(&s.checkpoint, &wm, Some(&manifest), &dir.path().join("ext")).unwrap();
        assert_eq!(x.bit_accuracy, Some(r.baseline_mean));
    }

    #[test]
    fn seeded_marks_differ_between_users() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.epochs = 0;
        let s = cmd_train(&cfg, None).unwrap();
        let a = cmd_embed(&s.checkpoint, &cfg.corpus, &MarkSource::Seeded(1), None, &dir.path().join("a")).unwrap();
        let b = cmd_embed(&s.checkpoint, &cfg.corpus, &MarkSource::Seeded(2), None, &dir.path().join("b")).unwrap();
        assert_ne!(a.manifest, b.manifest);
    }

    #[test]
    fn corpus_against_itself_has_zero_deltas() {
        let mols = synthetic_corpus(8, 4, 7, 5).unwrap();
        let r = evaluate_corpora(&mols, &mols, &[], &BondTable::standard()).unwrap();
        assert!(r.deltas.values().all(|&d| d == 0.0));
        assert_eq!(r.deltas.len(), 5);
        assert_eq!(r.weight_original, r.weight_watermarked);
        assert_eq!(r.displacement.whisker_high, 0.0);
    }

    #[test]
    fn deltas_are_watermarked_minus_original() {
        let table = BondTable::standard();
        let a = vec![crate::metrics::fixtures::methane()];
        let b = vec![a[0].with_positions(vec![[0.0; 3], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [-3.0, 0.0, 0.0]]).unwrap()];
        let r = evaluate_corpora(&a, &b, &[], &table).unwrap();
        assert_eq!(r.deltas["mol_stability"], -1.0);
        assert!(evaluate_corpora(&a, &[], &[], &table).is_err());
    }
}
