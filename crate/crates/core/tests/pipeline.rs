use bucket_reuse::bucketing::{hash_to_bucket, uniformity_report, BucketingConfig, Salt, UnitId};
use bucket_reuse::coordination::{ProgramId, ProgramState};
use bucket_reuse::estimation::{cor_star, estimate_delta_with, DeltaIndexing};
use bucket_reuse::rng::rng_for;
use bucket_reuse::simulation::{run_program_sim, settings_catalog, setting, LongExperimentTrace};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<UnitId> {
    (0..n).map(|i| UnitId::try_from(format!("visitor-{i:07}").as_str()).unwrap()).collect()
}

#[test]
fn hashing_is_uniform_and_salts_reshuffle() {
    let units = ids(200_000);
    let a = BucketingConfig::new(1000, Salt::from("layer-a")).unwrap();
    let b = BucketingConfig::new(1000, Salt::from("layer-b")).unwrap();
    let report = uniformity_report(&units, &a).unwrap();
    assert!(report.p_value > 1e-4, "p = {}", report.p_value);

    // Under an independent salt, membership in one bucket says nothing about the other.
    let in_zero: Vec<&UnitId> = units.iter().filter(|u| hash_to_bucket(u, &a).0 < 100).collect();
    let both = in_zero.iter().filter(|u| hash_to_bucket(u, &b).0 < 100).count();
    let expected = in_zero.len() as f64 * 0.1;
    assert!((both as f64 - expected).abs() < 4.0 * (expected * 0.9).sqrt(), "{both} vs {expected}");
}

#[test]
fn catalog_lookup_matches_listing() {
    for s in settings_catalog() {
        assert_eq!(setting(&s.name).as_ref(), Some(&s.config));
    }
    assert!(setting("7").is_none());
}

#[test]
fn program_sim_is_reproducible_and_thread_independent() {
    let mut cfg = setting("appendix-2").unwrap();
    cfg.num_starting_points = 3;
    cfg.replications_per_start = 40;
    cfg.horizon_days = 20;
    cfg.seed = 11;
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = serial.install(|| run_program_sim(&cfg, "appendix-2").unwrap());
    let b = wide.install(|| run_program_sim(&cfg, "appendix-2").unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
    cfg.seed = 12;
    assert_ne!(a.to_csv(), run_program_sim(&cfg, "appendix-2").unwrap().to_csv());
    // Day 1 against itself.
    assert_eq!(a.row(1).unwrap().availability_cor_mean, Some(1.0));
}

#[test]
fn lone_experiment_profile_has_closed_form() {
    // Days 1..=30 share one availability vector and days 31..=60 are all ones,
    // so at day count d <= 30 exactly 31 - d of the 61 - d pairs have cor* = 1.
    let trace = LongExperimentTrace::standard().generate(0).unwrap();
    let est = estimate_delta_with(&trace, 0.01, DeltaIndexing::Inclusive).unwrap();
    for d in 1..=30usize {
        let expected = (31 - d) as f64 / (61 - d) as f64;
        assert!((est.mean_cor_by_lag[d - 1].unwrap() - expected).abs() < 1e-12, "d = {d}");
    }
    assert!(est.mean_cor_by_lag[30..].iter().all(|m| *m == Some(0.0)));
    assert_eq!(est.delta_hat, Some(31));
}

#[derive(Debug, Clone)]
enum Op {
    Start(f64, u32),
    Advance,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0.01f64..0.6, 1u32..6).prop_map(|(f, l)| Op::Start(f, l)),
        Just(Op::Advance),
    ]
}

proptest! {
    #[test]
    fn exclusive_program_invariants(ops in proptest::collection::vec(op(), 1..60), seed in any::<u64>()) {
        let mut rng = rng_for(seed, &[]);
        let mut state = ProgramState::new(ProgramId(1), 50).unwrap();
        for op in ops {
            match op {
                Op::Start(f, l) => { let _ = state.start_experiment(f, l, &mut rng); }
                Op::Advance => { state.advance_day(); }
            }
            let mut owner = [false; 50];
            for e in state.active() {
                prop_assert!(e.start_day <= state.clock() && state.clock() <= e.end_day());
                for b in &e.buckets {
                    prop_assert!(!owner[b.index()], "bucket {} in two experiments", b.0);
                    owner[b.index()] = true;
                    prop_assert!(!state.availability().get(b.index()));
                }
            }
            prop_assert_eq!(state.available_count() + state.occupied_count(), 50);
            prop_assert!(state.occupied_fraction() <= 1.0);
            let restored = ProgramState::from_export(ProgramId(1), &state.export()).unwrap();
            prop_assert_eq!(restored.availability(), state.availability());
            prop_assert_eq!(restored.active(), state.active());
        }
    }

    #[test]
    fn cor_star_of_a_vector_with_itself(bits in proptest::collection::vec(any::<bool>(), 1..100)) {
        let v = bucket_reuse::bits::BitVector::from_bools(bits.clone());
        let c = cor_star(&v, &v).unwrap();
        if bits.iter().all(|&b| b) {
            prop_assert_eq!(c, Some(0.0));
        } else {
            prop_assert!((c.unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
