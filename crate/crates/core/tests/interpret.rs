mod common;

use common::oracles::{interpretability, mixed_units, topic_embeddings, unit};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use tsenet::data::Dataset;
use tsenet::interpret::{
    characterize_units, interpretability_score, partition_image, pearson, unit_top_words, EmbeddingTable,
};
use tsenet::rng;
use tsenet::synth::{layered_tree, names, sample_nodes};

fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn corpus(seed: u64) -> (Dataset, Vec<f64>) {
    let mut g = rng::stream(seed, &[0xC0]);
    let n = 60;
    let unit: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..2.0)).collect();
    // word 2 tracks the unit, word 4 anti-tracks it, the rest are noise
    let values = Array2::from_shape_fn((n, 5), |(r, c)| match c {
        2 => (unit[r] * 3.0).round() as f32,
        4 => ((2.0 - unit[r]) * 2.0).round() as f32,
        _ => ((r * 7 + c * 13) % 5) as f32,
    });
    (Dataset::new(names("w", 5), values).unwrap(), unit)
}

#[test]
fn copied_column_ranks_first() {
    let (d, _) = corpus(1);
    let col: Vec<f64> = d.values().column(3).iter().map(|&v| f64::from(v)).collect();
    let c = unit_top_words(7, &col, &d, 10).unwrap();
    assert_eq!(c.unit, 7);
    assert_eq!(c.top_words[0].0, "w3");
    assert!((c.top_words[0].1 - 1.0).abs() < 1e-12);
    assert_eq!(c.top_words.len(), 5);
}

#[test]
fn constant_unit_keeps_index_order() {
    let (d, _) = corpus(2);
    let c = unit_top_words(0, &vec![0.3; 60], &d, 3).unwrap();
    assert_eq!(
        c.top_words,
        vec![
            ("w0".to_string(), 0.0),
            ("w1".to_string(), 0.0),
            ("w2".to_string(), 0.0)
        ]
    );
    assert!(unit_top_words(
        0,
        &[1.0],
        &Dataset::new(names("w", 1), Array2::zeros((1, 1))).unwrap(),
        3
    )
    .is_err());
}

#[test]
fn planted_corpus_matches_direct_formula() {
    for seed in 0..10 {
        let (d, unit) = corpus(seed);
        let c = unit_top_words(0, &unit, &d, 5).unwrap();
        assert_eq!(c.top_words[0].0, "w2");
        assert_eq!(c.top_words[4].0, "w4");
        for (w, r) in &c.top_words {
            let j: usize = w[1..].parse().unwrap();
            let col: Vec<f64> = d.values().column(j).iter().map(|&v| f64::from(v)).collect();
            assert!((r - textbook_pearson(&col, &unit)).abs() < 1e-12);
        }
        let many = characterize_units(
            &Array2::from_shape_fn((60, 2), |(r, k)| unit[r] * (k + 1) as f64),
            &d,
            5,
        )
        .unwrap();
        assert_eq!(many[0].top_words, c.top_words);
        assert_eq!(many[1].top_words[0].0, "w2");
    }
}

proptest! {
    #[test]
    fn pearson_matches_textbook(xs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        let want = textbook_pearson(&x, &y);
        prop_assume!(want.is_finite());
        prop_assert!((pearson(&x, &y) - want).abs() < 1e-12);
    }
}

#[test]
fn coherent_units_beat_mixed_units() {
    for trial in 0..20 {
        let (emb, topics) = topic_embeddings(8, 10, trial);
        let coherent: Vec<Vec<String>> = topics.clone();
        let mixed = mixed_units(&topics);
        let sc = interpretability_score(coherent.iter().map(|w| unit(w)).collect(), &emb)
            .unwrap()
            .model;
        let sm = interpretability_score(mixed.iter().map(|w| unit(w)).collect(), &emb)
            .unwrap()
            .model;
        assert!(sc > sm, "trial {trial}: {sc} vs {sm}");
        assert!((sc - interpretability(&coherent, &emb)).abs() < 1e-12);
        assert!((sm - interpretability(&mixed, &emb)).abs() < 1e-12);
    }
}

#[test]
fn score_ignores_scale_and_order() {
    let (emb, topics) = topic_embeddings(3, 5, 4);
    let base = interpretability_score(topics.iter().map(|w| unit(w)).collect(), &emb)
        .unwrap()
        .model;
    let scaled = EmbeddingTable::from_pairs(
        topics
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, w)| {
                (
                    w.clone(),
                    emb.get(w).unwrap().iter().map(|x| x * (1.0 + i as f64)).collect(),
                )
            })
            .collect(),
    )
    .unwrap();
    let s2 = interpretability_score(topics.iter().map(|w| unit(w)).collect(), &scaled)
        .unwrap()
        .model;
    assert!((base - s2).abs() < 1e-12);
    let mut shuffled: Vec<Vec<String>> = topics.iter().rev().cloned().collect();
    for ws in &mut shuffled {
        ws.reverse();
    }
    let s3 = interpretability_score(shuffled.iter().map(|w| unit(w)).collect(), &emb)
        .unwrap()
        .model;
    assert!((base - s3).abs() < 1e-12);
}

#[test]
fn embedding_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.txt");
    std::fs::write(&p, "cat 1 0 0\ndog 0.5 0.5 0\n").unwrap();
    let e = EmbeddingTable::load(&p).unwrap();
    assert_eq!((e.len(), e.dim()), (2, 3));
    std::fs::write(&p, "cat 1 0 0\ndog 0.5 0.5\n").unwrap();
    let err = EmbeddingTable::load(&p).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(EmbeddingTable::load(&dir.path().join("missing.txt")).is_err());
}

#[test]
fn grid_rows_render_as_bands() {
    // root with 4 children, each owning one row of a 4x4 grid
    let planted = layered_tree(1, &[4, 4], 0.9);
    let nodes = sample_nodes(&planted.model, 50, 1);
    let h = planted.oracle_hierarchy(&nodes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ppm");
    partition_image(&h, 1, (4, 4), &path).unwrap();
    let img = std::fs::read(&path).unwrap();
    let header = b"P6\n4 4\n255\n".len();
    let px = |r: usize, c: usize| &img[header + 3 * (r * 4 + c)..header + 3 * (r * 4 + c) + 3];
    for r in 0..4 {
        for c in 1..4 {
            assert_eq!(px(r, c), px(r, 0));
        }
        if r > 0 {
            assert_ne!(px(r, 0), px(r - 1, 0));
        }
    }
    // top layer: a single group, one colour
    let top = dir.path().join("top.ppm");
    partition_image(&h, 2, (4, 4), &top).unwrap();
    let mono = std::fs::read(&top).unwrap();
    assert!(mono[header..].chunks(3).all(|p| p == &mono[header..header + 3]));
    partition_image(&h, 1, (4, 4), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), img);
    assert!(partition_image(&h, 1, (3, 5), &path).is_err());
}
