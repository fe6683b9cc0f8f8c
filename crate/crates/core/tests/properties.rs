use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molmark::codec::{CodecConfig, NodeInputs, Watermark, WatermarkModel};
use molmark::runtime::Graph;
use molmark::geometry::{canonicalize, distance_matrix, mds_embed, spectral_gap};
use molmark::metrics::{graph_hash, infer_bonds, molecule_stability, stable_atoms, BondTable, QualityReport};
use molmark::molecule::{parse_xyz, write_xyz, Molecule, MoleculeBatch, Vocabulary};
use molmark::synth::random_chain;
use molmark::training::{loss_decoder, loss_encoder, schedule, ScheduleParams};
use molmark::transform::{apply, random_transform, sweep, RigidTransform, SweepSpec};

fn molecule(seed: u64, n: usize) -> Molecule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_chain(&format!("m{seed}"), n, &Vocabulary::qm9(), &mut rng).unwrap()
}

fn transform(seed: u64) -> RigidTransform {
    random_transform(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 2..30)
}

fn all_sweeps() -> Vec<RigidTransform> {
    SweepSpec::full_suite().iter().flat_map(|s| sweep(s).unwrap()).map(|(_, t)| t).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn xyz_round_trip(seed in any::<u64>(), n in 2usize..30, charged in any::<bool>()) {
        let mut m = molecule(seed, n);
        if charged {
            m.charges = (0..n).map(|i| (i % 3) as f64 - 1.0).collect();
        }
        let back = parse_xyz(&write_xyz(&m), &Vocabulary::qm9()).unwrap();
        prop_assert_eq!(&back.element_symbols, &m.element_symbols);
        prop_assert_eq!(&back.charges, &m.charges);
        prop_assert_eq!(&back.id, &m.id);
        for (a, b) in back.positions.iter().zip(&m.positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn unbatching_recovers_inputs(seeds in prop::collection::vec((any::<u64>(), 2usize..15), 1..6)) {
        let mols: Vec<Molecule> = seeds.iter().map(|&(s, n)| molecule(s, n)).collect();
        let batch = MoleculeBatch::from_molecules(&mols.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(batch.unbatch(None), mols.clone());
        for m in &mols {
            let onehot = m.atom_types();
            for row in onehot.chunks(m.n_types) {
                prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn transforms_are_orthogonal_and_preserve_distances(seed in any::<u64>(), n in 2usize..30) {
        let t = transform(seed);
        prop_assert!(t.orthogonality_error() <= 1e-12);
        prop_assert!((t.determinant().abs() - 1.0).abs() <= 1e-12);
        let m = molecule(seed ^ 1, n);
        let d0 = distance_matrix(&m.positions);
        let d1 = distance_matrix(&apply(&m.positions, &t));
        prop_assert!(d0.max_abs_diff(&d1) <= 1e-9);
    }

    #[test]
    fn mds_recovers_distances(p in cloud()) {
        let d = distance_matrix(&p);
        let r = mds_embed(&d).unwrap();
        let scale = d.max_entry().max(f64::MIN_POSITIVE);
        prop_assert!(distance_matrix(&r.p_hat).max_abs_diff(&d) / scale <= 1e-6);
        // clamped eigenvalues never yield NaN coordinates
        prop_assert!(r.p_hat.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn schedule_is_monotone(t in 0usize..2000, dt in 0usize..500, g in 0.0..1.0f64, dg in 0.0..1.0f64) {
        let s = ScheduleParams::default();
        prop_assert!(schedule(t + dt, 0.0, &s).0 >= schedule(t, 0.0, &s).0);
        let g2 = (g + dg).min(1.0);
        prop_assert!(schedule(0, g2, &s).1 <= schedule(0, g, &s).1);
        prop_assert!(schedule(0, 0.0, &s).1 > schedule(0, 0.0, &s).0);
    }

    #[test]
    fn losses_vanish_only_at_equality(p in cloud(), shift in prop::array::uniform3(-1.0..1.0f64), m in prop::collection::vec(0.0..1.0f64, 1..32)) {
        prop_assert_eq!(loss_encoder(&p, &p).unwrap(), 0.0);
        let moved: Vec<[f64; 3]> = p.iter().map(|q| [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]]).collect();
        let le = loss_encoder(&p, &moved).unwrap();
        prop_assert!(le >= 0.0);
        if shift.iter().any(|&s| s != 0.0) {
            prop_assert!(le > 0.0);
        }
        prop_assert_eq!(loss_decoder(&m, &m).unwrap(), 0.0);
        let other: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        let ld = loss_decoder(&m, &other).unwrap();
        prop_assert!(ld >= 0.0);
        prop_assert_eq!(ld == 0.0, m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bonds_and_hash_survive_rigid_motion_and_relabeling(seed in any::<u64>(), n in 2usize..20) {
        let table = BondTable::standard();
        let m = molecule(seed, n);
        let t = transform(seed ^ 7);
        let moved = m.with_positions(apply(&m.positions, &t)).unwrap();
        prop_assert_eq!(infer_bonds(&m, &table).unwrap(), infer_bonds(&moved, &table).unwrap());
        // reverse the atom order
        let mut perm = moved.clone();
        perm.positions.reverse();
        perm.type_index.reverse();
        perm.charges.reverse();
        perm.element_symbols.reverse();
        prop_assert_eq!(graph_hash(&m, &table).unwrap(), graph_hash(&perm, &table).unwrap());
    }

    #[test]
    fn quality_fractions_are_bounded(seeds in prop::collection::vec((any::<u64>(), 2usize..12), 1..8)) {
        let table = BondTable::standard();
        let mols: Vec<Molecule> = seeds.iter().map(|&(s, n)| molecule(s, n)).collect();
        let q = QualityReport::compute(&mols, &HashSet::new(), &table).unwrap();
        for (_, v) in q.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for m in &mols {
            if molecule_stability(m, &table).unwrap() {
                prop_assert!(stable_atoms(m, &table).unwrap().iter().all(|&s| s));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn canonical_pose_is_stable_over_the_sweep(seed in any::<u64>(), n in 4usize..16) {
        let m = molecule(seed, n);
        let r = mds_embed(&distance_matrix(&m.positions)).unwrap();
        prop_assume!(spectral_gap(&r) > 1e-6);
        let base = canonicalize(&r);
        for t in all_sweeps() {
            let c = canonicalize(&mds_embed(&distance_matrix(&apply(&m.positions, &t))).unwrap());
            for (a, b) in base.iter().zip(&c) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn embedding_is_additive_and_keeps_node_features(seed in any::<u64>(), n in 2usize..10, bits in prop::collection::vec(0u8..2, 4)) {
        let mut cfg = CodecConfig::new(4);
        cfg.channels = 4;
        cfg.d_model = 4;
        cfg.growth = 2;
        let (model, params) = WatermarkModel::build::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut m = molecule(seed, n);
        m.charges = (0..n).map(|i| i as f64 * 0.5).collect();
        let mark = Watermark::new(bits).unwrap();
        let out = model.embed(&params, &m, &mark).unwrap();
        let batch = MoleculeBatch::from_molecules(&[&m]).unwrap();
        let mut g = Graph::new(&params);
        let inp = NodeInputs::new(&mut g, &batch, &model.config).unwrap();
        let p = g.input(batch.positions_tensor());
        let enc = model.encode(&mut g, p, &inp, &[&mark]).unwrap();
        let (p0, p1, mask) = (g.value(p).data(), g.value(enc.p_prime).data(), g.value(enc.p_mask).data());
        for i in 0..p0.len() {
            prop_assert_eq!(p1[i], p0[i] + mask[i]);
        }
        prop_assert_eq!(&out.type_index, &m.type_index);
        prop_assert_eq!(&out.charges, &m.charges);
        prop_assert_eq!(&out.element_symbols, &m.element_symbols);
        // a padded neighbour in the batch changes nothing for this molecule
        let big = molecule(seed ^ 3, n + 5);
        let together = model.embed_batch(&params, &[m.clone(), big], &[&mark, &mark]).unwrap();
        for (a, b) in out.positions.iter().zip(&together[0].positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
        let soft_alone = model.extract_soft_batch(&params, std::slice::from_ref(&out)).unwrap();
        let soft_batched = model.extract_soft_batch(&params, &together).unwrap();
        for (a, b) in soft_alone[0].iter().zip(&soft_batched[0]) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
