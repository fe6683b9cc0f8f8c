//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use molmark::codec::{CodecConfig, NodeInputs, Watermark, WatermarkModel};
use molmark::molecule::{Molecule, MoleculeBatch, Vocabulary};
use molmark::runtime::{check_gradients, GradCheck, Graph, ParamStore, Var};
use molmark::transform::{rotation_about_axis, translation_along_axis, Axis, RigidTransform};
use molmark::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Copy)]
pub enum Term {
    Encoder,
    Decoder,
    Weighted(f64, f64),
}

pub fn five_atoms() -> Molecule {
    let pos = vec![
        [0.0, 0.0, 0.0],
        [1.52, 0.11, -0.05],
        [2.07, 1.43, 0.18],
        [-0.58, -0.97, 0.83],
        [2.61, -0.71, -0.94],
    ];
    Molecule::new("m5", &["C", "C", "O", "N", "H"], pos, Some(vec![0.0, 0.0, -1.0, 1.0, 0.0]), &Vocabulary::qm9())
        .unwrap()
}

fn small_config() -> CodecConfig {
    let mut c = CodecConfig::new(2);
    c.channels = 3;
    c.d_model = 4;
    c.growth = 2;
    c
}

pub struct GradFixture {
    pub model: WatermarkModel,
    pub params: ParamStore<f64>,
    pub batch: MoleculeBatch,
    pub mark: Watermark,
    pub t: RigidTransform,
}

pub fn grad_fixture() -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (model, params) = WatermarkModel::build::<f64, _>(&small_config(), &mut rng).unwrap();
    let mol = five_atoms();
    let batch = MoleculeBatch::from_molecules(&[&mol]).unwrap();
    let t = rotation_about_axis(Axis::Y, 37.0).compose(&translation_along_axis(Axis::Z, 0.6));
    GradFixture {
        model,
        params,
        batch,
        mark: Watermark::parse("10").unwrap(),
        t,
    }
}

/// Encoder, rigid motion, MDS recovery, decoder; returns the requested term.
pub fn loss(g: &mut Graph<f64>, f: &GradFixture, term: Term) -> Result<Var> {
    let inp = NodeInputs::new(g, &f.batch, &f.model.config)?;
    let p = g.input(f.batch.positions_tensor());
    let enc = f.model.encode(g, p, &inp, &[&f.mark])?;
    let le = g.encoder_loss(p, enc.p_prime, &f.batch.sizes)?;
    if let Term::Encoder = term {
        return Ok(le);
    }
    let moved = g.rigid_transform(enc.p_prime, std::slice::from_ref(&f.t), &f.batch.sizes)?;
    let p_hat = g.mds_recover(moved, &f.batch.sizes)?;
    let soft = f.model.decode(g, p_hat, &inp)?;
    let target: Vec<f64> = f.mark.bits().iter().map(|&b| b as f64).collect();
    let ld = g.mse_loss(soft, &target)?;
    match term {
        Term::Decoder => Ok(ld),
        Term::Weighted(a, b) => {
            let x = g.scale(le, a);
            let y = g.scale(ld, b);
            g.add(x, y)
        }
        Term::Encoder => unreachable!(),
    }
}

pub fn grad_check(term: Term, select: impl Fn(&str) -> bool) -> GradCheck {
    let f = grad_fixture();
    check_gradients(&f.params, |g| loss(g, &f, term), GRAD_STEP, 6, select).unwrap()
}

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
