mod common;

use common::oracles::{oracle_hierarchy, plant_cross_edge};
use tsenet::data::BinaryColumns;
use tsenet::expansion::{expand, export_graph, ranked_candidates, EdgeOrigin, ExpansionConfig};
use tsenet::skeleton::{stack, Hierarchy, SkeletonConfig};
use tsenet::stats::conditional_mi;
use tsenet::synth::{layered_tree, names, observed_view, sample_nodes, Planted};

const N: usize = 5000;

fn oracle(seed: u64) -> (Planted, Hierarchy) {
    oracle_hierarchy(N, seed)
}

#[test]
fn null_skeleton_adds_few_edges() {
    let cfg = ExpansionConfig {
        fan_in_fraction: 1.0,
        cmi_floor: 3.0 / N as f64,
    };
    let mut clean = 0;
    for seed in 0..20 {
        let (_, h) = oracle(seed);
        let core = expand(&h, &cfg).unwrap();
        if core.count_origin(EdgeOrigin::Expansion) == 0 {
            clean += 1;
        }
    }
    eprintln!("clean runs {clean}/20");
    // per-candidate false positive rate at this floor is P(chi2_2 > 6), about 5%
    assert!(clean >= 1);
}

#[test]
fn planted_edge_ranks_first() {
    let mut first = 0;
    for seed in 0..20 {
        let (_, mut h) = oracle(seed);
        plant_cross_edge(&mut h, 4, 0, seed);
        if ranked_candidates(&h, 1, 0)[0].0 == 4 {
            first += 1;
        }
    }
    assert!(first >= 18, "{first}/20");
}

#[test]
fn scores_match_stats_oracle() {
    let (_, h) = oracle(11);
    let parent = h.layers[0].parent_of_inputs(12);
    for unit in 0..4 {
        for (c, score) in ranked_candidates(&h, 1, unit) {
            // glue V, candidate and its parent into one table for the oracle
            let mut t = BinaryColumns::empty(N);
            t.push_column(h.data_at(1).column(unit).to_vec()).unwrap();
            t.push_column(h.data_at(0).column(c).to_vec()).unwrap();
            t.push_column(h.data_at(1).column(parent[c]).to_vec()).unwrap();
            let want = conditional_mi(&t, 0, 1, 2).unwrap();
            assert!((score - want).abs() < 1e-12);
        }
    }
}

#[test]
fn skeleton_only_budget_and_monotone_growth() {
    let (_, h) = oracle(2);
    // 3/12 of the layer below equals the skeleton fan-in of every level-1 unit
    let tight = expand(
        &h,
        &ExpansionConfig {
            fan_in_fraction: 0.25,
            cmi_floor: 0.0,
        },
    )
    .unwrap();
    assert_eq!(tight.count_origin(EdgeOrigin::Expansion), 0);
    assert_eq!(tight.edge_count(), 12 + 4);

    let mut prev: Vec<_> = tight.edges().map(|e| (e.0, e.1, e.2)).collect();
    for rho in [0.3, 0.5, 0.75, 1.0] {
        let core = expand(
            &h,
            &ExpansionConfig {
                fan_in_fraction: rho,
                cmi_floor: 0.0,
            },
        )
        .unwrap();
        let cur: Vec<_> = core.edges().map(|e| (e.0, e.1, e.2)).collect();
        assert!(prev.iter().all(|e| cur.contains(e)), "rho {rho}");
        for (l, ups) in core.adjacency.iter().enumerate() {
            let k = ExpansionConfig {
                fan_in_fraction: rho,
                cmi_floor: 0.0,
            }
            .budget(core.layer_sizes[l]);
            for es in ups {
                let skel = es.iter().filter(|e| e.origin == EdgeOrigin::Skeleton).count();
                let candidates = core.layer_sizes[l] - skel;
                assert_eq!(es.len(), k.min(skel + candidates).max(skel));
            }
        }
        prev = cur;
    }
}

#[test]
fn learned_hierarchy_exports_deterministically() {
    let planted = layered_tree(2, &[2, 3], 0.9);
    let nodes = sample_nodes(&planted.model, 3000, 5);
    let data = observed_view(&planted.model, &nodes);
    let cfg = SkeletonConfig {
        top_threshold: 2,
        seed: 5,
        ..Default::default()
    };
    let h = stack(&data, &names("x", 12), &cfg).unwrap();
    let core = expand(
        &h,
        &ExpansionConfig {
            fan_in_fraction: 0.5,
            cmi_floor: 0.0,
        },
    )
    .unwrap();
    // only skeleton child links cross layers; top links are gone
    assert_eq!(core.count_origin(EdgeOrigin::Skeleton), 12 + 4);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.dot"), dir.path().join("b.dot"));
    export_graph(&core, &a).unwrap();
    export_graph(&core, &b).unwrap();
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    let text = String::from_utf8(text).unwrap();
    assert_eq!(text.matches(" -> ").count(), core.edge_count());
    assert_eq!(text.matches("[label=").count(), 12 + 4 + 2);
}
