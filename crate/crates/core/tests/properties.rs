use proptest::prelude::*;
use vstreid::experiment::query_pairs;
use vstreid::mrf::{propose, ProposalEngine};
use vstreid::network::{load_dataset, write_dataset, Dataset, PathCatalog, Split, StateIx};
use vstreid::potential::{edge_pair_bound, PsiMatrixCache};
use vstreid::synth::{generate, SynthConfig};

fn dataset(seed: u64, n_cameras: usize, n_vehicles: usize) -> Dataset {
    generate(&SynthConfig {
        seed,
        n_cameras,
        n_vehicles,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Deterministic pseudo-random potential in (0, 1).
fn hashed_psi(salt: u64) -> impl Fn(StateIx, StateIx) -> f64 + Sync {
    move |a, b| {
        let mut x = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_add(salt).rotate_left(29);
        x ^= x >> 31;
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 27;
        0.02 + 0.96 * (x % 10_000) as f64 / 10_000.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batch_engine_agrees_with_per_pair_proposals(seed in 0u64..1000, salt in any::<u64>(), threads in 1usize..4) {
        let ds = dataset(seed, 6, 14);
        let catalog = PathCatalog::build(&ds).unwrap();
        let psi = hashed_psi(salt);
        let pairs = query_pairs(&ds);
        let engine = ProposalEngine::new(PsiMatrixCache::new(&psi, &ds, Split::Test), &catalog);
        let batch = engine.batch_propose(&pairs, threads).unwrap();
        prop_assert!(engine.psi_evaluations() <= edge_pair_bound(&ds, &catalog, Split::Test).unwrap());
        for (&(p, q), got) in pairs.iter().zip(&batch) {
            let want = propose(&ds, Split::Test, &catalog, p, q, &psi).unwrap();
            prop_assert_eq!(got, &want);
            if let Some(prop) = got {
                prop_assert!(prop.is_time_consistent(&ds));
                prop_assert_eq!((prop.states[0], *prop.states.last().unwrap()), (p, q));
                let mean = prop.edge_psi.iter().sum::<f64>() / prop.edge_psi.len() as f64;
                prop_assert!((prop.score - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generated_datasets_round_trip_through_disk(seed in 0u64..1000) {
        let ds = dataset(seed, 5, 8);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.cameras(), ds.cameras());
        prop_assert_eq!(back.states(), ds.states());
        for split in Split::ALL {
            prop_assert_eq!(back.split_indices(split), ds.split_indices(split));
        }
        prop_assert_eq!(&back.meta().provenance, &ds.meta().provenance);
    }

    #[test]
    fn generation_is_a_function_of_the_config(seed in 0u64..1000) {
        let a = dataset(seed, 5, 8);
        let b = dataset(seed, 5, 8);
        prop_assert_eq!(a.states(), b.states());
        let c = dataset(seed.wrapping_add(1), 5, 8);
        prop_assert_ne!(a.states(), c.states());
    }
}
