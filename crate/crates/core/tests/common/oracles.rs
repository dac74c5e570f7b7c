//! Brute-force reference implementations. Nothing here calls into the
//! library's own inference or statistics code.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsenet::data::BinaryColumns;
use tsenet::interpret::{EmbeddingTable, UnitCharacterization};
use tsenet::ltm::{Node, TreeModel};
use tsenet::rng;
use tsenet::skeleton::Hierarchy;
use tsenet::synth::{layered_tree, sample_nodes, Planted};

/// Plain per-row counting and the textbook sums.
pub fn mi(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let mut joint = [[0f64; 2]; 2];
    for (x, y) in a.iter().zip(b) {
        joint[*x as usize][*y as usize] += 1.0;
    }
    let pa = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let pb = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut s = 0.0;
    for x in 0..2 {
        for y in 0..2 {
            if joint[x][y] > 0.0 {
                s += joint[x][y] / n * ((joint[x][y] * n) / (pa[x] * pb[y])).ln();
            }
        }
    }
    s.max(0.0)
}

#[allow(clippy::needless_range_loop)]
pub fn cmi(a: &[u8], b: &[u8], z: &[u8]) -> f64 {
    let n = a.len() as f64;
    let mut c = [[[0f64; 2]; 2]; 2];
    for ((x, y), w) in a.iter().zip(b).zip(z) {
        c[*x as usize][*y as usize][*w as usize] += 1.0;
    }
    let mut s = 0.0;
    for w in 0..2 {
        let nz: f64 = (0..2)
            .flat_map(|x| (0..2).map(move |y| (x, y)))
            .map(|(x, y)| c[x][y][w])
            .sum();
        for x in 0..2 {
            for y in 0..2 {
                let nxyz = c[x][y][w];
                if nxyz == 0.0 {
                    continue;
                }
                let nxz = c[x][0][w] + c[x][1][w];
                let nyz = c[0][y][w] + c[1][y][w];
                s += nxyz / n * (nxyz * nz / (nxz * nyz)).ln();
            }
        }
    }
    s.max(0.0)
}

pub fn columns(rows: &[Vec<u8>]) -> Vec<Vec<u8>> {
    (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect()
}

/// Three correlated binary columns with skewed marginals, so empty cells
/// and empty strata show up often.
pub fn random_table(g: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let n = g.gen_range(1..300);
    let p: [f64; 3] = [g.gen_range(0.0..1.0), g.gen_range(0.0..1.0), g.gen_range(0.0..1.0)];
    (0..n)
        .map(|_| {
            let z = u8::from(g.gen_bool(p[2]));
            let a = if g.gen_bool(0.5) { z } else { u8::from(g.gen_bool(p[0])) };
            vec![a, u8::from(g.gen_bool(p[1])) ^ (a & u8::from(g.gen_bool(0.3))), z]
        })
        .collect()
}

/// Random tree of `n` nodes: leaves observed, inner nodes latent with
/// probability 0.6, CPT entries away from 0 and 1.
pub fn random_model(n: usize, g: &mut ChaCha8Rng) -> TreeModel {
    let parent: Vec<Option<usize>> = (0..n).map(|v| (v > 0).then(|| g.gen_range(0..v))).collect();
    let has_child: Vec<bool> = (0..n).map(|v| parent.contains(&Some(v))).collect();
    let mut col = 0;
    let nodes: Vec<Node> = (0..n)
        .map(|v| {
            if !has_child[v] || g.gen_bool(0.4) {
                col += 1;
                Node::observed(format!("x{v}"), col - 1)
            } else {
                Node::latent(format!("h{v}"))
            }
        })
        .collect();
    let mut m = TreeModel::new(nodes, parent).unwrap();
    let p = g.gen_range(0.05..0.95);
    m.set_prior([1.0 - p, p]).unwrap();
    for v in 1..n {
        let (a, b) = (g.gen_range(0.05..0.95), g.gen_range(0.05..0.95));
        m.set_cpt(v, [[1.0 - a, a], [1.0 - b, b]]).unwrap();
    }
    m
}

/// `P(x)` and `P(h = 1 | x)` per latent by summing the joint over every
/// latent assignment.
pub fn enumerate(m: &TreeModel, case: &[u8]) -> (f64, Vec<f64>) {
    let latents = m.latents();
    let mut state = vec![0u8; m.len()];
    for (slot, &v) in m.observed().iter().enumerate() {
        state[v] = case[slot];
    }
    let mut total = 0.0;
    let mut on = vec![0.0; latents.len()];
    for mask in 0..1u32 << latents.len() {
        for (k, &h) in latents.iter().enumerate() {
            state[h] = ((mask >> k) & 1) as u8;
        }
        let mut p = 1.0;
        for v in 0..m.len() {
            p *= match m.parent(v) {
                None => m.prior()[state[v] as usize],
                Some(u) => m.cpt(v)[state[u] as usize][state[v] as usize],
            };
        }
        total += p;
        for (k, &h) in latents.iter().enumerate() {
            if state[h] == 1 {
                on[k] += p;
            }
        }
    }
    (total, on.into_iter().map(|x| x / total).collect())
}

/// Labelled tree from a Prüfer sequence over `n` nodes.
fn prufer_tree(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::new();
    for &s in seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
        edges.push((leaf.min(s), leaf.max(s)));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges.sort_unstable();
    edges
}

/// Every labelled spanning tree on `n` nodes, edges sorted.
pub fn all_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n < 2 {
        return vec![vec![]];
    }
    let len = n - 2;
    (0..n.pow(len as u32))
        .map(|mut code| {
            let seq: Vec<usize> = (0..len)
                .map(|_| {
                    let d = code % n;
                    code /= n;
                    d
                })
                .collect();
            prufer_tree(&seq, n)
        })
        .collect()
}

/// Generative-oracle hierarchy of the 12-variable, two-level planted tree.
pub fn oracle_hierarchy(n: usize, seed: u64) -> (Planted, Hierarchy) {
    let planted = layered_tree(2, &[2, 3], 0.9);
    let nodes = sample_nodes(&planted.model, n, seed);
    let h = planted.oracle_hierarchy(&nodes).unwrap();
    (planted, h)
}

/// Observed `target` copies latent `source` of layer 1 half of the time.
pub fn plant_cross_edge(h: &mut Hierarchy, target: usize, source: usize, seed: u64) {
    let mut r = rng::stream(seed, &[0xC0]);
    let obs = &h.observed;
    let lat = &h.layers[0].completed;
    let rows: Vec<Vec<u8>> = (0..obs.n_rows())
        .map(|i| {
            (0..obs.n_cols())
                .map(|c| {
                    let bit = if c == target && r.gen_bool(0.5) {
                        lat.get(i, source)
                    } else {
                        obs.get(i, c)
                    };
                    u8::from(bit)
                })
                .collect()
        })
        .collect();
    h.observed = BinaryColumns::from_rows(&rows);
}

pub fn unit(words: &[String]) -> UnitCharacterization {
    UnitCharacterization {
        unit: 0,
        top_words: words.iter().map(|w| (w.clone(), 0.1)).collect(),
        score: None,
    }
}

/// Mean over units of the mean pairwise cosine, from raw dot products.
pub fn interpretability(units: &[Vec<String>], emb: &EmbeddingTable) -> f64 {
    let mut unit_scores = Vec::new();
    for ws in units {
        let vs: Vec<&[f64]> = ws.iter().filter_map(|w| emb.get(w)).collect();
        let mut pair_sims = Vec::new();
        for a in &vs {
            for b in &vs {
                if !std::ptr::eq(*a, *b) {
                    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    pair_sims.push(dot / (n(a) * n(b)));
                }
            }
        }
        if vs.len() >= 2 {
            unit_scores.push(pair_sims.iter().sum::<f64>() / pair_sims.len() as f64);
        }
    }
    unit_scores.iter().sum::<f64>() / unit_scores.len() as f64
}

/// `topics` clusters of `per_topic` words around random centres.
pub fn topic_embeddings(topics: usize, per_topic: usize, seed: u64) -> (EmbeddingTable, Vec<Vec<String>>) {
    let mut g = rng::stream(seed, &[0xE3B]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dim = 30;
    let mut pairs = Vec::new();
    let mut by_topic = Vec::new();
    for t in 0..topics {
        let centre: Vec<f64> = (0..dim).map(|_| normal.sample(&mut g)).collect();
        let mut ws = Vec::new();
        for i in 0..per_topic {
            let w = format!("t{t}w{i}");
            pairs.push((
                w.clone(),
                centre.iter().map(|c| c + 0.7 * normal.sample(&mut g)).collect(),
            ));
            ws.push(w);
        }
        by_topic.push(ws);
    }
    (EmbeddingTable::from_pairs(pairs).unwrap(), by_topic)
}

/// Each mixed unit takes its i-th word from topic `(u + i) mod topics`.
pub fn mixed_units(topics: &[Vec<String>]) -> Vec<Vec<String>> {
    let t = topics.len();
    (0..t)
        .map(|u| (0..topics[0].len()).map(|i| topics[(u + i) % t][i].clone()).collect())
        .collect()
}
