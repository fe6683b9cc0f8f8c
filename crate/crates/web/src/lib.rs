//! Browser bindings for molmark.
//!
//! The page drives three operations: generate or paste a molecule, embed a
//! watermark with a loaded checkpoint, then move the result rigidly and
//! read the bits back. Everything runs client-side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use molmark::codec::{CodecConfig, Watermark, WatermarkModel};
use molmark::geometry::distance_matrix;
use molmark::harness::vocabulary_for;
use molmark::molecule::{parse_xyz, write_xyz, Molecule, Vocabulary};
use molmark::runtime::ParamStore;
use molmark::synth::random_chain;
use molmark::training::{checkpoint_from_bytes, Trainer};
use molmark::transform::{apply, random_transform};

type Model = (WatermarkModel, ParamStore<f32>);

/// An embed/extract pair backed by one set of weights.
#[wasm_bindgen]
pub struct Demo {
    model: WatermarkModel,
    params: ParamStore<f32>,
    trained: bool,
}

fn untrained(seed: u32, capacity: usize) -> molmark::Result<Model> {
    let mut cfg = CodecConfig::new(capacity);
    cfg.channels = 16;
    cfg.d_model = 16;
    cfg.growth = 8;
    WatermarkModel::build::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed as u64))
}

fn from_bytes(bytes: &[u8]) -> molmark::Result<Model> {
    let t = Trainer::from_checkpoint(checkpoint_from_bytes::<f32>(bytes)?)?;
    Ok((t.model, t.state.params))
}

fn vocab(model: &WatermarkModel) -> molmark::Result<Vocabulary> {
    vocabulary_for(model.config.n_types)
}

impl Demo {
    fn parse(&self, xyz: &str) -> molmark::Result<Molecule> {
        parse_xyz(xyz, &vocab(&self.model)?)
    }

    pub fn embed_text(&self, xyz: &str, bits: &str) -> molmark::Result<String> {
        let m = self.parse(xyz)?;
        let w = Watermark::parse(bits)?;
        Ok(write_xyz(&self.model.embed(&self.params, &m, &w)?))
    }

    pub fn extract_text(&self, xyz: &str) -> molmark::Result<String> {
        let m = self.parse(xyz)?;
        Ok(self.model.extract(&self.params, &m)?.to_string())
    }
}

fn js(e: molmark::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Random weights. Embedding works but the bits read back are noise
    /// until a trained checkpoint is loaded.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, capacity: usize) -> Result<Demo, JsError> {
        let (model, params) = untrained(seed, capacity).map_err(js)?;
        Ok(Demo {
            model,
            params,
            trained: false,
        })
    }

    /// Weights from a `.mwm` checkpoint written by `molmark train`.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Demo, JsError> {
        let (model, params) = from_bytes(bytes).map_err(js)?;
        Ok(Demo {
            model,
            params,
            trained: true,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn capacity(&self) -> usize {
        self.model.config.capacity
    }

    #[wasm_bindgen(getter)]
    pub fn trained(&self) -> bool {
        self.trained
    }

    pub fn embed(&self, xyz: &str, bits: &str) -> Result<String, JsError> {
        self.embed_text(xyz, bits).map_err(js)
    }

    pub fn extract(&self, xyz: &str) -> Result<String, JsError> {
        self.extract_text(xyz).map_err(js)
    }
}

pub fn random_molecule_text(seed: u32, atoms: usize) -> molmark::Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    Ok(write_xyz(&random_chain(&format!("demo {seed}"), atoms, &Vocabulary::qm9(), &mut rng)?))
}

pub fn move_rigidly_text(xyz: &str, seed: u32) -> molmark::Result<String> {
    let m = parse_xyz(xyz, &Vocabulary::geom_drug())?;
    let t = random_transform(&mut ChaCha8Rng::seed_from_u64(seed as u64));
    Ok(write_xyz(&m.with_positions(apply(&m.positions, &t))?))
}

/// Largest change of any interatomic distance between two geometries of
/// the same molecule.
pub fn distance_change_text(a: &str, b: &str) -> molmark::Result<f64> {
    let v = Vocabulary::geom_drug();
    let (a, b) = (parse_xyz(a, &v)?, parse_xyz(b, &v)?);
    if a.element_symbols != b.element_symbols {
        return Err(molmark::Error::InvalidMolecule("the two geometries have different atoms".into()));
    }
    Ok(distance_matrix(&a.positions).max_abs_diff(&distance_matrix(&b.positions)))
}

/// A random chain molecule of QM9 elements as XYZ text.
#[wasm_bindgen(js_name = randomMolecule)]
pub fn random_molecule(seed: u32, atoms: usize) -> Result<String, JsError> {
    random_molecule_text(seed, atoms).map_err(js)
}

/// Applies a random rotation, translation and possible mirror.
#[wasm_bindgen(js_name = moveRigidly)]
pub fn move_rigidly(xyz: &str, seed: u32) -> Result<String, JsError> {
    move_rigidly_text(xyz, seed).map_err(js)
}

#[wasm_bindgen(js_name = distanceChange)]
pub fn distance_change(a: &str, b: &str) -> Result<f64, JsError> {
    distance_change_text(a, b).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Demo {
        let (model, params) = untrained(1, 4).unwrap();
        Demo {
            model,
            params,
            trained: false,
        }
    }

    #[test]
    fn extraction_ignores_rigid_motion() {
        let d = demo();
        let mol = random_molecule_text(3, 9).unwrap();
        let marked = d.embed_text(&mol, "1010").unwrap();
        let bits = d.extract_text(&marked).unwrap();
        for seed in 0..5 {
            let moved = move_rigidly_text(&marked, seed).unwrap();
            assert!(distance_change_text(&marked, &moved).unwrap() < 1e-9);
            assert_eq!(d.extract_text(&moved).unwrap(), bits);
        }
    }

    #[test]
    fn embedding_moves_atoms_but_keeps_elements() {
        let d = demo();
        let mol = random_molecule_text(4, 7).unwrap();
        let marked = d.embed_text(&mol, "0110").unwrap();
        assert!(distance_change_text(&mol, &marked).unwrap() > 0.0);
        assert!(d.embed_text(&mol, "01").is_err());
    }

    #[test]
    fn checkpoint_bytes_load() {
        let mut codec = CodecConfig::new(2);
        codec.channels = 4;
        codec.d_model = 4;
        codec.growth = 2;
        let t = Trainer::<f32>::new(molmark::training::TrainConfig::new(codec, 0, 2)).unwrap();
        let bytes = molmark::training::checkpoint_bytes(&t.state);
        let (model, _) = from_bytes(&bytes).unwrap();
        assert_eq!(model.config.capacity, 2);
        assert!(from_bytes(&bytes[..10]).is_err());
    }
}
