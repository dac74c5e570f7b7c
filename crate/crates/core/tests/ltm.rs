mod common;

use common::oracles::{enumerate, random_model};
use proptest::prelude::*;
use rand::Rng;
use tsenet::data::BinaryColumns;
use tsenet::ltm::{em_fit, EmConfig, Node, TreeModel};
use tsenet::rng;
use tsenet::synth::{copy_cpt, layered_tree, names, observed_view, sample_nodes};

#[test]
fn two_hundred_models_match_enumeration() {
    let mut g = rng::stream(21, &[1]);
    for trial in 0..200 {
        let n = g.gen_range(2..=10);
        let m = random_model(n, &mut g);
        let k = m.observed().len();
        let rows: Vec<Vec<u8>> = (0..20)
            .map(|_| (0..k).map(|_| u8::from(g.gen_bool(0.5))).collect())
            .collect();
        let data = BinaryColumns::from_rows(&rows);
        let mut want = 0.0;
        for row in &rows {
            // observed() is in node order and columns were handed out in node order
            let (p, post) = enumerate(&m, row);
            want += p.ln();
            let one = BinaryColumns::from_rows(std::slice::from_ref(row));
            assert!(
                (m.log_likelihood(&one).unwrap() - p.ln()).abs() < 1e-12,
                "trial {trial}"
            );
            for ((v, got), w) in m.posterior_marginals(row).unwrap().into_iter().zip(post) {
                assert!((got[1] - w).abs() < 1e-12, "trial {trial} latent {v}");
                assert!((got[0] + got[1] - 1.0).abs() < 1e-12);
            }
        }
        let ll = m.log_likelihood(&data).unwrap();
        assert!(
            (ll - want).abs() < 1e-12 * want.abs().max(1.0),
            "trial {trial}: {ll} vs {want}"
        );
    }
}

#[test]
fn bic_decomposes_exactly() {
    let m = TreeModel::new(vec![Node::observed("x", 0)], vec![None]).unwrap();
    let data = BinaryColumns::from_rows(&vec![vec![1]; 8]);
    let s = m.bic(&data).unwrap();
    assert!((s.loglik - 8.0 * 0.5f64.ln()).abs() < 1e-12);
    assert_eq!(s.d, 1);
    assert_eq!(s.bic, s.loglik - 0.5 * 8f64.ln());
    // -5.545177 - 0.5 ln 8
    assert!((s.bic + 6.584898).abs() < 1e-6);
}

fn star_data(fidelity: f64, n: usize, seed: u64) -> (TreeModel, BinaryColumns, BinaryColumns) {
    let planted = layered_tree(1, &[3], fidelity);
    let nodes = sample_nodes(&planted.model, n, seed);
    let obs = observed_view(&planted.model, &nodes);
    (planted.model, nodes, obs)
}

#[test]
fn em_recovers_a_noisy_star() {
    for seed in 0..5 {
        let (_, nodes, obs) = star_data(0.9, 5000, seed);
        let shape = TreeModel::latent_class("H", &[0, 1, 2], &names("x", 3)).unwrap();
        let fit = em_fit(
            &shape,
            &obs,
            &EmConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let truth = copy_cpt(0.9);
        for v in 1..4 {
            let got = fit.model.cpt(v);
            for (row, want) in got.iter().zip(&truth) {
                assert!((row[1] - want[1]).abs() < 0.05, "seed {seed} node {v}: {got:?}");
            }
        }
        // completion agrees with the sampled latent, orientation fixed by canonicalization
        let done = fit.model.map_completion(&obs, &[0]).unwrap();
        let agree = (0..5000).filter(|&r| done.get(r, 0) == nodes.get(r, 0)).count();
        assert!(agree >= 4250, "seed {seed}: {agree}");
    }
}

#[test]
fn em_traces_never_decrease() {
    for seed in 0..10 {
        let (_, _, obs) = star_data(0.8, 800, 100 + seed);
        let shape = TreeModel::latent_class("H", &[0, 1, 2], &names("x", 3)).unwrap();
        // without pseudo-counts EM climbs the likelihood itself
        let plain = em_fit(
            &shape,
            &obs,
            &EmConfig {
                seed,
                smoothing: 0.0,
                tol: 0.0,
                max_iter: 60,
                ..Default::default()
            },
        )
        .unwrap();
        for t in &plain.traces {
            assert!(t.windows(2).all(|w| w[1] >= w[0] - 1e-9), "seed {seed}: {t:?}");
        }
        // with pseudo-counts it climbs likelihood plus log prior
        let smoothed = em_fit(
            &shape,
            &obs,
            &EmConfig {
                seed,
                tol: 0.0,
                max_iter: 60,
                ..Default::default()
            },
        )
        .unwrap();
        for t in &smoothed.objective_traces {
            assert!(t.windows(2).all(|w| w[1] >= w[0] - 1e-9), "seed {seed}: {t:?}");
        }
    }
}

#[test]
fn em_is_deterministic_per_seed() {
    let (_, _, obs) = star_data(0.85, 1000, 7);
    let shape = TreeModel::latent_class("H", &[0, 1, 2], &names("x", 3)).unwrap();
    let cfg = EmConfig {
        restarts: 2,
        seed: 5,
        ..Default::default()
    };
    let a = em_fit(&shape, &obs, &cfg).unwrap();
    let b = em_fit(&shape, &obs, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn posteriors_are_distributions(seed in 0u64..10_000, n in 2usize..9) {
        let mut g = rng::stream(seed, &[3]);
        let m = random_model(n, &mut g);
        let case: Vec<u8> = (0..m.observed().len()).map(|_| u8::from(g.gen_bool(0.5))).collect();
        let (_, want) = enumerate(&m, &case);
        for ((_, p), w) in m.posterior_marginals(&case).unwrap().into_iter().zip(want) {
            prop_assert!((0.0..=1.0).contains(&p[1]));
            prop_assert!((p[1] - w).abs() < 1e-12);
        }
    }
}
