use proptest::prelude::*;

use commoninfo::bipartite::{BipartiteSolver, Kappas};
use commoninfo::eval::{label_match, matched_count};
use commoninfo::metrics::info_report;
use commoninfo::vi::{model_joint, project_encoder, surrogate_loss, VIParams};
use commoninfo::{Encoder, JointDist, SourceSpec};

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Cardinalities, |Z|, joint weights and encoder weights.
fn problem() -> impl Strategy<Value = (JointDist, Encoder)> {
    (prop::collection::vec(2usize..=4, 2..=3), 1usize..=4).prop_flat_map(|(cards, nz)| {
        let spec = SourceSpec::new(cards, nz).unwrap();
        let n = spec.joint_size();
        (
            Just(spec),
            prop::collection::vec(0.01f64..1.0, n),
            prop::collection::vec(0.01f64..1.0, n * nz),
        )
            .prop_map(move |(spec, w, e)| {
                let joint = JointDist::new(spec.clone(), normalize(w)).unwrap();
                let rows = e.chunks(nz).flat_map(|r| normalize(r.to_vec())).collect();
                (joint, Encoder::new(spec, rows).unwrap())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn information_terms_are_bounded((joint, enc) in problem()) {
        let rep = info_report(&joint, &enc).unwrap();
        let hz = (enc.spec().z_cardinality() as f64).log2();
        prop_assert!(rep.mi_z_xv >= 0.0 && rep.mi_z_xv <= hz + 1e-9);
        for p in &rep.parts {
            prop_assert!(p.mi_z_s <= rep.mi_z_xv + 1e-9);
            prop_assert!(p.mi_z_complement <= rep.mi_z_xv + 1e-9);
            prop_assert!(p.cond_mi >= 0.0);
        }
    }

    #[test]
    fn dca_iterations_never_increase_the_objective((joint, enc) in problem(), kappa in 0.05f64..1.0) {
        let solver = BipartiteSolver::new(&joint, &Kappas::Shared(kappa)).unwrap();
        let (_, trace) = solver.run_from(&enc, 40, 0.0).unwrap();
        prop_assert!(trace.max_increase() <= 1e-12, "{:?}", trace.losses);
    }

    #[test]
    fn surrogate_bounds_model_information(
        (joint, _) in problem(),
        seed in any::<u64>(),
        beta in 0.0f64..10.0,
    ) {
        let params = VIParams::random(joint.spec(), seed);
        let model = model_joint(&params).unwrap();
        let (enc, _) = project_encoder(&params);
        let i = info_report(&model, &enc).unwrap().mi_z_xv;
        prop_assert!(i <= surrogate_loss(&params, &joint, beta).unwrap() + 1e-9);
    }

    #[test]
    fn matching_dominates_identity_assignment(
        m in prop::collection::vec(prop::collection::vec(0u64..50, 5), 5)
    ) {
        let p = label_match(&m);
        let id: Vec<Option<usize>> = (0..5).map(Some).collect();
        prop_assert!(matched_count(&m, &p) >= matched_count(&m, &id));
        let mut seen = p.iter().flatten().copied().collect::<Vec<_>>();
        seen.sort();
        prop_assert_eq!(seen, (0..5).collect::<Vec<_>>());
    }
}
