use commoninfo::bipartite::{self, BipartiteConfig};
use commoninfo::eval::{bayes_optimal_accuracy, clustering_accuracy, DecodeMode};
use commoninfo::metrics::info_report;
use commoninfo::sweep::{pareto_frontier, run_sweep_with_threads, SolverKind, SweepConfig};
use commoninfo::synth::{build_joint, build_labeled_joint, posterior_encoder, sample_dataset, SynthSpec};
use commoninfo::vi::{self, VIConfig};
use commoninfo::{Encoder, JointDist};

#[test]
fn bipartite_solve_then_cluster() {
    let spec = SynthSpec::invertible(2);
    let joint = build_joint(&spec).unwrap();
    let cfg = BipartiteConfig {
        restarts: 5,
        ..BipartiteConfig::with_kappa(0.9)
    };
    let sol = bipartite::solve(&joint, &cfg).unwrap();
    let rep = info_report(&joint, &sol.encoder).unwrap();
    assert!(rep.cond_mi_sum < 0.01, "{rep:?}");
    assert!((rep.mi_z_xv - 3.0).abs() < 0.05);
    assert_eq!(sol.records.len(), 5);
    assert!(sol.trace.max_increase() <= 1e-12);

    let data = sample_dataset(&spec, 5000, 3).unwrap();
    let acc = clustering_accuracy(&sol.encoder, &data, 4, DecodeMode::Sample).unwrap();
    assert!(acc.accuracy >= 0.99, "{}", acc.accuracy);
}

#[test]
fn vi_solve_recovers_the_invertible_factorization() {
    let joint = build_joint(&SynthSpec::invertible(2)).unwrap();
    let cfg = VIConfig {
        restarts: 10,
        ..VIConfig::new(8.0)
    };
    let sol = vi::solve(&joint, &cfg).unwrap();
    let rep = info_report(&joint, &sol.encoder).unwrap();
    assert!(rep.mi_z_xv <= 3.0 + 1e-9);
    assert!(rep.cond_mi_sum < 0.05, "{rep:?}");
    assert_eq!(sol.records.iter().filter_map(|r| r.param_count).max(), Some(256));
}

#[test]
fn posterior_encoder_is_bayes_optimal_on_both_cases() {
    for spec in [SynthSpec::invertible(2), SynthSpec::non_invertible(2)] {
        let enc = posterior_encoder(&spec).unwrap();
        let bayes = bayes_optimal_accuracy(&build_labeled_joint(&spec).unwrap()).unwrap();
        let data = sample_dataset(&spec, 20000, 11).unwrap();
        let acc = clustering_accuracy(&enc, &data, 12, DecodeMode::Argmax).unwrap();
        assert!((acc.accuracy - bayes).abs() < 0.01, "{} vs {bayes}", acc.accuracy);
    }
}

#[test]
fn sweep_results_do_not_depend_on_thread_count() {
    let cfg = SweepConfig {
        grid: vec![0.5, 2.0, 8.0],
        restarts: 3,
        accuracy_samples: 500,
        ..SweepConfig::new(SolverKind::Bipartite, SynthSpec::non_invertible(2))
    };
    let strip = |mut v: Vec<commoninfo::sweep::SweepRecord>| {
        for r in &mut v {
            r.wall_ms = 0.0;
        }
        v
    };
    let a = strip(run_sweep_with_threads(&cfg, 1).unwrap().records);
    let b = strip(run_sweep_with_threads(&cfg, 3).unwrap().records);
    assert_eq!(a, b);
    assert_eq!(a.len(), 9);
    let front = pareto_frontier(&a).unwrap();
    assert!(!front.is_empty());
    for w in front.windows(2) {
        assert!(w[0].cond_mi_sum <= w[1].cond_mi_sum);
        assert!(w[0].mi_z_xv >= w[1].mi_z_xv);
    }
}

#[test]
fn joint_and_encoder_survive_json() {
    let spec = SynthSpec::non_invertible(2);
    let joint = build_joint(&spec).unwrap();
    assert_eq!(JointDist::from_json(&joint.to_json().unwrap()).unwrap(), joint);
    let enc = posterior_encoder(&spec).unwrap();
    assert_eq!(Encoder::from_json(&enc.to_json().unwrap()).unwrap(), enc);
}
