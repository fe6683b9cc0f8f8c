//! Joint encoder/decoder training with the dynamic loss-weight schedule,
//! and checkpoint persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, NodeInputs, Watermark, WatermarkModel};
use crate::error::{Error, Result};
use crate::metrics::bit_accuracy_bits;
use crate::molecule::{Molecule, MoleculeBatch};
use crate::runtime::{Adam, AdamConfig, DType, Graph, ParamStore, Real, Tensor};
use crate::transform::{apply, random_transform, RigidTransform};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MWM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub rho: f64,
    pub beta: f64,
    pub delta: f64,
    pub f: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            rho: 0.01,
            beta: 0.25,
            delta: 100.0,
            f: 50,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.beta > 0.0 && self.delta > 0.0) || self.f == 0 {
            return Err(Error::Config("schedule parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `(λ_E, λ_D)` for epoch `t` given last epoch's bit accuracy `gamma`.
pub fn schedule(t: usize, gamma: f64, s: &ScheduleParams) -> (f64, f64) {
    let lambda_e = s.rho + s.beta * (t / s.f) as f64;
    let lambda_d = s.delta * (1.0 - gamma);
    (lambda_e, lambda_d)
}

/// Largest squared coordinate change plus mean squared atom displacement.
pub fn loss_encoder(p: &[[f64; 3]], p_prime: &[[f64; 3]]) -> Result<f64> {
    if p.len() != p_prime.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} vs {} atoms", p.len(), p_prime.len())));
    }
    let mut max = 0.0f64;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(p_prime) {
        for k in 0..3 {
            let d2 = (a[k] - b[k]).powi(2);
            max = max.max(d2);
            total += d2;
        }
    }
    Ok(max + total / p.len() as f64)
}

/// Mean squared error between bits and continuous decoder output.
pub fn loss_decoder(m: &[f64], m_cont: &[f64]) -> Result<f64> {
    if m.len() != m_cont.len() || m.is_empty() {
        return Err(Error::Shape(format!("{} bits vs {} outputs", m.len(), m_cont.len())));
    }
    Ok(m.iter().zip(m_cont).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m.len() as f64)
}

/// Stop once epoch accuracy and displacement both meet their targets for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub accuracy: f64,
    pub displacement: f64,
    #[serde(default = "one")]
    pub patience: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub codec: CodecConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub stop: Option<StopRule>,
    /// Present every molecule in a fresh random orientation (about its
    /// centroid, mirror included) before encoding.
    #[serde(default)]
    pub augment: bool,
}

fn default_batch() -> usize {
    32
}
fn default_every() -> usize {
    25
}

impl TrainConfig {
    pub fn new(codec: CodecConfig, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            codec,
            schedule: ScheduleParams::default(),
            adam: AdamConfig::default(),
            epochs,
            batch_size: default_batch(),
            seed,
            checkpoint_every: default_every(),
            stop: None,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_E")]
    pub loss_e: f64,
    #[serde(rename = "L_D")]
    pub loss_d: f64,
    pub gamma: f64,
    #[serde(rename = "lambda_E")]
    pub lambda_e: f64,
    #[serde(rename = "lambda_D")]
    pub lambda_d: f64,
    /// Mean per-atom ‖p′ − p‖.
    pub displacement: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_e: f64,
    pub loss_d: f64,
    pub correct_bits: usize,
    pub total_bits: usize,
    pub displacement_sum: f64,
    pub atoms: usize,
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Bit accuracy of the last completed epoch.
    pub gamma: f64,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn displacement_stats(p: &[f64], p_prime: &[f64], sizes: &[usize], n: usize) -> f64 {
    let mut s = 0.0;
    for (b, &sz) in sizes.iter().enumerate() {
        for i in 0..sz {
            let o = (b * n + i) * 3;
            s += (0..3).map(|k| (p_prime[o + k] - p[o + k]).powi(2)).sum::<f64>().sqrt();
        }
    }
    s
}

/// One optimization step on a batch: fresh random watermarks, encode,
/// random rigid motion, MDS recovery, decode, weighted loss, Adam update.
pub fn train_step<T: Real, R: Rng>(
    model: &WatermarkModel,
    params: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &MoleculeBatch,
    lambdas: (f64, f64),
    rng: &mut R,
) -> Result<StepMetrics> {
    let l = model.config.capacity;
    let marks = (0..batch.len())
        .map(|_| Watermark::random(l, rng))
        .collect::<Result<Vec<_>>>()?;
    let transforms: Vec<_> = (0..batch.len()).map(|_| random_transform(rng)).collect();
    let (metrics, grads) = {
        let mut g = Graph::new(params);
        let inp = NodeInputs::new(&mut g, batch, &model.config)?;
        let p = g.input(batch.positions_tensor());
        let mark_refs: Vec<&Watermark> = marks.iter().collect();
        let enc = model.encode(&mut g, p, &inp, &mark_refs)?;
        let moved = g.rigid_transform(enc.p_prime, &transforms, &batch.sizes)?;
        let p_hat = g.mds_recover(moved, &batch.sizes)?;
        let soft = model.decode(&mut g, p_hat, &inp)?;
        let le = g.encoder_loss(p, enc.p_prime, &batch.sizes)?;
        let target: Vec<T> = marks.iter().flat_map(|m| m.bits().iter().map(|&b| T::of(b as f64))).collect();
        let ld = g.mse_loss(soft, &target)?;
        let we = g.scale(le, T::of(lambdas.0));
        let wd = g.scale(ld, T::of(lambdas.1));
        let total = g.add(we, wd)?;

        let loss_e = g.value(le).data()[0].f64();
        let loss_d = g.value(ld).data()[0].f64();
        if !loss_e.is_finite() || !loss_d.is_finite() || !g.value(total).all_finite() {
            return Err(Error::NonFinite {
                epoch: 0,
                batch: 0,
                loss_e,
                loss_d,
            });
        }
        let soft_v = g.value(soft).to_f64_vec();
        let mut correct = 0;
        for (m, s) in marks.iter().zip(soft_v.chunks(l)) {
            correct += m.bits().iter().zip(s).filter(|(&b, &v)| (v >= 0.5) as u8 == b).count();
        }
        let displacement_sum = displacement_stats(
            &g.value(p).to_f64_vec(),
            &g.value(enc.p_prime).to_f64_vec(),
            &batch.sizes,
            batch.n_max,
        );
        let grads = g.backward(total)?;
        (
            StepMetrics {
                loss_e,
                loss_d,
                correct_bits: correct,
                total_bits: l * batch.len(),
                displacement_sum,
                atoms: batch.sizes.iter().sum(),
            },
            grads,
        )
    };
    adam.update(params, &grads);
    Ok(metrics)
}

fn reorient<R: Rng>(mol: &Molecule, rng: &mut R) -> Result<Molecule> {
    let mut t = random_transform(rng);
    let k = mol.n_atoms() as f64;
    let c = mol
        .positions
        .iter()
        .fold([0.0; 3], |a, p| [a[0] + p[0] / k, a[1] + p[1] / k, a[2] + p[2] / k]);
    let rc = RigidTransform { a: t.a, t: [0.0; 3] }.apply_point(c);
    t.t = [c[0] - rc[0], c[1] - rc[1], c[2] - rc[2]];
    mol.with_positions(apply(&mol.positions, &t))
}

/// A model layout together with its training state.
pub struct Trainer<T: Real> {
    pub model: WatermarkModel,
    pub state: Checkpoint<T>,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = WatermarkModel::build::<T, _>(&config.codec, &mut rng)?;
        let adam = Adam::new(config.adam, &params);
        Ok(Trainer {
            model,
            state: Checkpoint {
                config,
                epoch: 0,
                gamma: 0.0,
                params,
                adam,
            },
        })
    }

    /// Rebuilds the layout for a loaded checkpoint and checks that every
    /// parameter name and shape matches it.
    pub fn from_checkpoint(state: Checkpoint<T>) -> Result<Self> {
        let model = layout_for(&state.config.codec, &state.params)?;
        Ok(Trainer { model, state })
    }

    /// Trains one epoch over shuffled batches and advances the state.
    pub fn run_epoch(&mut self, corpus: &[Molecule]) -> Result<EpochMetrics> {
        if corpus.is_empty() {
            return Err(Error::InvalidMolecule("training on an empty corpus".into()));
        }
        let st = &mut self.state;
        let epoch = st.epoch;
        let lambdas = schedule(epoch, st.gamma, &st.config.schedule);
        let mut rng = epoch_rng(st.config.seed, epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = StepMetrics::default();
        let mut weight = 0usize;
        for (bi, chunk) in order.chunks(st.config.batch_size).enumerate() {
            let mols: Vec<Molecule> = chunk
                .iter()
                .map(|&i| {
                    if st.config.augment {
                        reorient(&corpus[i], &mut rng)
                    } else {
                        Ok(corpus[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let batch = MoleculeBatch::from_molecules(&mols.iter().collect::<Vec<_>>())?;
            let m = train_step(&self.model, &mut st.params, &mut st.adam, &batch, lambdas, &mut rng).map_err(
                |e| match e {
                    Error::NonFinite { loss_e, loss_d, .. } => Error::NonFinite {
                        epoch,
                        batch: bi,
                        loss_e,
                        loss_d,
                    },
                    other => other,
                },
            )?;
            sum.loss_e += m.loss_e * chunk.len() as f64;
            sum.loss_d += m.loss_d * chunk.len() as f64;
            sum.correct_bits += m.correct_bits;
            sum.total_bits += m.total_bits;
            sum.displacement_sum += m.displacement_sum;
            sum.atoms += m.atoms;
            weight += chunk.len();
        }
        let gamma = sum.correct_bits as f64 / sum.total_bits as f64;
        st.gamma = gamma;
        st.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            loss_e: sum.loss_e / weight as f64,
            loss_d: sum.loss_d / weight as f64,
            gamma,
            lambda_e: lambdas.0,
            lambda_d: lambdas.1,
            displacement: sum.displacement_sum / sum.atoms as f64,
        })
    }

    /// Runs until `config.epochs` epochs are complete or the stop rule
    /// fires. `on_epoch` sees every record after the state has advanced.
    pub fn train(
        &mut self,
        corpus: &[Molecule],
        mut on_epoch: impl FnMut(&EpochMetrics, &Self) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut trace = Vec::new();
        let mut streak = 0;
        while self.state.epoch < self.state.config.epochs {
            let m = self.run_epoch(corpus)?;
            on_epoch(&m, self)?;
            trace.push(m);
            if let Some(rule) = self.state.config.stop {
                if m.gamma >= rule.accuracy && m.displacement <= rule.displacement {
                    streak += 1;
                } else {
                    streak = 0;
                }
                if streak >= rule.patience.max(1) {
                    break;
                }
            }
        }
        Ok(trace)
    }

    /// Trains with a metrics log (`metrics.jsonl`, appended) and checkpoints
    /// (`checkpoint.mwm` at the end, plus one every `checkpoint_every`
    /// epochs) written to `out`.
    pub fn train_to_dir(&mut self, corpus: &[Molecule], out: &Path) -> Result<Vec<EpochMetrics>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("metrics.jsonl");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let every = self.state.config.checkpoint_every;
        let trace = self.train(corpus, |m, t| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if every > 0 && t.state.epoch % every == 0 {
                save_checkpoint(&t.state, &out.join(format!("checkpoint_epoch{:04}.mwm", t.state.epoch)))?;
            }
            Ok(())
        })?;
        save_checkpoint(&self.state, &out.join("checkpoint.mwm"))?;
        Ok(trace)
    }
}

fn layout_for<T: Real>(codec: &CodecConfig, params: &ParamStore<T>) -> Result<WatermarkModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, fresh) = WatermarkModel::build::<T, _>(codec, &mut rng)?;
    if fresh.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            params.len(),
            fresh.len()
        )));
    }
    for ((a, ta), (b, tb)) in fresh.iter().zip(params.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {b} {:?} does not match model tensor {a} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(model)
}

/// Loads only what inference needs.
pub fn load_model<T: Real>(path: &Path) -> Result<(WatermarkModel, ParamStore<T>)> {
    let ck = load_checkpoint::<T>(path)?;
    let model = layout_for(&ck.config.codec, &ck.params)?;
    Ok((model, ck.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: DType,
    config: TrainConfig,
    epoch: usize,
    rng_seed: u64,
    gamma: f64,
    adam_step: u64,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// `MWM1`, u64 LE manifest length, JSON manifest, little-endian payload.
pub fn checkpoint_bytes<T: Real>(c: &Checkpoint<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, payload: &mut Vec<u8>| {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(payload);
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() - offset,
        });
    };
    for (name, t) in c.params.iter() {
        push(name.to_string(), t, &mut payload);
    }
    for (id, (name, _)) in c.params.iter().enumerate() {
        push(format!("{ADAM_M}{name}"), &c.adam.m[id], &mut payload);
        push(format!("{ADAM_V}{name}"), &c.adam.v[id], &mut payload);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: c.config.clone(),
        epoch: c.epoch,
        rng_seed: c.config.seed,
        gamma: c.gamma,
        adam_step: c.adam.step,
        payload_bytes: payload.len(),
        tensors,
    };
    let text = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + text.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&payload);
    out
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err("missing MWM1 header".into()));
    }
    let mlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if mlen > body.len() {
        return Err(err("truncated manifest".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&body[..mlen]).map_err(|e| err(format!("manifest: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(err(format!("unsupported checkpoint version {version:?}")));
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| err(format!("manifest: {e}")))?;
    let payload = &body[mlen..];
    if payload.len() != manifest.payload_bytes {
        return Err(err(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let width = manifest.dtype.size();
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.bytes != count * width || e.offset + e.bytes > payload.len() {
            return Err(err(format!("tensor {} has an inconsistent extent", e.name)));
        }
        let raw = &payload[e.offset..e.offset + e.bytes];
        let data: Vec<T> = match manifest.dtype {
            DType::Float32 => raw.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::Float64 => raw.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::from_vec(&e.shape, data)?;
        if let Some(name) = e.name.strip_prefix(ADAM_M) {
            m.push((name.to_string(), t));
        } else if let Some(name) = e.name.strip_prefix(ADAM_V) {
            v.push((name.to_string(), t));
        } else {
            params.register(&e.name, t)?;
        }
    }
    let order = |list: Vec<(String, Tensor<T>)>, which: &str| -> Result<Vec<Tensor<T>>> {
        if list.len() != params.len() {
            return Err(err(format!("{which} moments cover {} of {} tensors", list.len(), params.len())));
        }
        list.into_iter()
            .enumerate()
            .map(|(i, (name, t))| {
                if params.name(i) != name || params.get(i).shape() != t.shape() {
                    Err(err(format!("{which} moment {name} out of order")))
                } else {
                    Ok(t)
                }
            })
            .collect()
    };
    let adam = Adam {
        config: manifest.config.adam,
        step: manifest.adam_step,
        m: order(m, "first")?,
        v: order(v, "second")?,
    };
    Ok(Checkpoint {
        config: manifest.config,
        epoch: manifest.epoch,
        gamma: manifest.gamma,
        params,
        adam,
    })
}

pub fn save_checkpoint<T: Real>(c: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_bytes(c)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Held-out extraction quality: random watermarks and random rigid motions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub bit_accuracy: f64,
    pub displacement: f64,
    pub molecules: usize,
}

pub fn evaluate<T: Real>(
    model: &WatermarkModel,
    params: &ParamStore<T>,
    mols: &[Molecule],
    seed: u64,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut disp, mut atoms) = (0.0, 0.0, 0usize);
    for chunk in mols.chunks(batch_size.max(1)) {
        let marks = (0..chunk.len())
            .map(|_| Watermark::random(model.config.capacity, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Watermark> = marks.iter().collect();
        let embedded = model.embed_batch(params, chunk, &refs)?;
        let mut attacked = Vec::with_capacity(chunk.len());
        for (orig, e) in chunk.iter().zip(&embedded) {
            for (a, b) in orig.positions.iter().zip(&e.positions) {
                disp += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            }
            atoms += orig.n_atoms();
            attacked.push(e.with_positions(apply(&e.positions, &random_transform(&mut rng)))?);
        }
        for (m, got) in marks.iter().zip(model.extract_batch(params, &attacked)?) {
            acc += bit_accuracy_bits(m.bits(), got.bits())?;
        }
    }
    Ok(EvalMetrics {
        bit_accuracy: acc / mols.len() as f64,
        displacement: disp / atoms as f64,
        molecules: mols.len(),
    })
}

/// Default output locations inside a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.mwm")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = ScheduleParams::default();
        assert_eq!(schedule(0, 0.0, &s), (0.01, 100.0));
        assert!((schedule(125, 0.0, &s).0 - 0.51).abs() < 1e-12);
        assert_eq!(schedule(3, 1.0, &s).1, 0.0);
        let trace: Vec<f64> = (0..150).map(|t| schedule(t, 0.0, &s).0).collect();
        let mut steps = trace.clone();
        steps.dedup();
        assert_eq!(steps.len(), 3);
        assert!((steps[1] - 0.26).abs() < 1e-12 && (steps[2] - 0.51).abs() < 1e-12);
    }

    #[test]
    fn encoder_loss_fixtures() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(loss_encoder(&p, &p).unwrap(), 0.0);
        let shifted: Vec<[f64; 3]> = p.iter().map(|a| [a[0] + 0.1, a[1], a[2]]).collect();
        assert!((loss_encoder(&p, &shifted).unwrap() - 0.02).abs() < 1e-15);
        let mut one = p;
        one[2][0] += 0.2;
        assert!((loss_encoder(&p, &one).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn decoder_loss_fixtures() {
        assert_eq!(loss_decoder(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_decoder(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.25);
        assert_eq!(loss_decoder(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(loss_decoder(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn truncated_and_unknown_version_rejected() {
        let mut cfg = CodecConfig::new(2);
        cfg.channels = 4;
        cfg.d_model = 4;
        cfg.growth = 2;
        let t = Trainer::<f32>::new(TrainConfig::new(cfg, 0, 3)).unwrap();
        let bytes = checkpoint_bytes(&t.state);
        let back = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        for ((_, a), (_, b)) in back.params.iter().zip(t.state.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let key = b"\"version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut bumped = bytes.clone();
        bumped[at + key.len() - 1] = b'9';
        let err = checkpoint_from_bytes::<f32>(&bumped).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(checkpoint_from_bytes::<f32>(b"XXXX").is_err());
    }
}
