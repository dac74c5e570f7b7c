//! Layer-wise latent tree structure learning.
//!
//! Each layer partitions its input variables into unidimensional groups,
//! introduces one binary latent per group, links the latents into a
//! Chow-Liu tree and fits the resulting two-layer model. The latents' MAP
//! completions become the inputs of the next layer, until at most
//! `top_threshold` latents remain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryColumns;
use crate::error::{Error, Result};
use crate::ltm::{em_fit, em_refine, EmConfig, Node, ScoreReport, TreeModel};
use crate::rng;
use crate::stats::{mi_matrix, Contingency2x2, MiMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonConfig {
    /// UD-test threshold on `BIC(M2) - BIC(M1)`.
    pub delta: f64,
    /// Stop stacking once a layer has at most this many latents.
    pub top_threshold: usize,
    /// Groups reaching this size are finalized without further tests.
    pub max_group: usize,
    pub seed: u64,
    /// EM settings for the one- and two-latent models of the UD-test.
    pub em: EmConfig,
    /// Restarts and iterations for scoring candidate moves of the two-latent search.
    pub search_restarts: usize,
    pub search_max_iter: usize,
    /// Iteration cap for the joint refit of each assembled two-layer model.
    pub refit_max_iter: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self {
            delta: 3.0,
            top_threshold: 500,
            max_group: 15,
            seed: 0,
            em: EmConfig::default(),
            search_restarts: 2,
            search_max_iter: 50,
            refit_max_iter: 50,
        }
    }
}

impl SkeletonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.top_threshold < 1 {
            return Err(Error::Config("top_threshold must be >= 1".into()));
        }
        if self.max_group < 2 {
            return Err(Error::Config("max_group must be >= 2".into()));
        }
        Ok(())
    }

    fn em_for(&self, parts: &[u64]) -> EmConfig {
        EmConfig {
            seed: rng::derive(self.seed, parts),
            ..self.em
        }
    }

    fn search_em_for(&self, parts: &[u64]) -> EmConfig {
        EmConfig {
            restarts: self.search_restarts,
            max_iter: self.search_max_iter,
            seed: rng::derive(self.seed, parts),
            ..self.em
        }
    }
}

/// Outcome of a unidimensionality test on a candidate group.
#[derive(Debug, Clone)]
pub struct UdTest {
    pub pass: bool,
    /// `BIC(M2) - BIC(M1)`; zero when the test is trivial.
    pub gap: f64,
    pub m1: TreeModel,
    pub m2: Option<TreeModel>,
    /// Children of the second latent of `m2` (always includes the newest variable).
    pub second: Vec<usize>,
}

fn seed_parts(tag: u64, members: &[usize]) -> Vec<u64> {
    let mut sorted: Vec<u64> = members.iter().map(|&m| m as u64).collect();
    sorted.sort_unstable();
    std::iter::once(tag).chain(sorted).collect()
}

fn labels(cols: &[usize], names: &[String]) -> Vec<String> {
    cols.iter().map(|&c| names[c].clone()).collect()
}

/// `H1 -> {first, H2}`, `H2 -> second`.
pub fn two_latent_model(first: &[usize], second: &[usize], names: &[String]) -> Result<TreeModel> {
    let mut nodes = vec![Node::latent("H1"), Node::latent("H2")];
    let mut parent = vec![None, Some(0)];
    for &c in first {
        nodes.push(Node::observed(names[c].clone(), c));
        parent.push(Some(0));
    }
    for &c in second {
        nodes.push(Node::observed(names[c].clone(), c));
        parent.push(Some(1));
    }
    TreeModel::new(nodes, parent)
}

fn score(model: &TreeModel, loglik: f64, n: usize) -> f64 {
    ScoreReport::new(loglik, model.free_params(), n).bic
}

/// BIC comparison of the best one-latent model against a greedily searched
/// two-latent model over `group`, whose last element is the newest variable.
///
/// The second latent starts with the newest variable; single variables move
/// from the first latent to the second while that improves BIC. The first
/// latent always keeps at least two children.
pub fn ud_test(data: &BinaryColumns, group: &[usize], names: &[String], cfg: &SkeletonConfig) -> Result<UdTest> {
    let n = data.n_rows();
    let m1_shape = TreeModel::latent_class("H", group, &labels(group, names))?;
    let m1 = em_fit(&m1_shape, data, &cfg.em_for(&seed_parts(1, group)))?;
    let bic1 = score(&m1.model, m1.loglik, n);
    let Some((&newest, rest)) = group.split_last() else {
        return Err(Error::Validation("empty group".into()));
    };
    if group.len() <= 2 {
        return Ok(UdTest {
            pass: true,
            gap: 0.0,
            m1: m1.model,
            m2: None,
            second: vec![newest],
        });
    }

    let mut first: Vec<usize> = rest.to_vec();
    let mut second = vec![newest];
    let fit_search = |first: &[usize], second: &[usize]| -> Result<f64> {
        let shape = two_latent_model(first, second, names)?;
        let parts = seed_parts(2, &[first, &[usize::MAX], second].concat());
        let fit = em_fit(&shape, data, &cfg.search_em_for(&parts))?;
        Ok(score(&fit.model, fit.loglik, n))
    };
    let mut current = fit_search(&first, &second)?;
    while first.len() > 2 {
        let scores: Vec<f64> = (0..first.len())
            .into_par_iter()
            .map(|i| {
                let mut f = first.clone();
                let moved = f.remove(i);
                let mut s = second.clone();
                s.push(moved);
                fit_search(&f, &s)
            })
            .collect::<Result<_>>()?;
        let (best, &best_score) =
            scores.iter().enumerate().fold(
                (0, &f64::NEG_INFINITY),
                |acc, (i, s)| {
                    if *s > *acc.1 {
                        (i, s)
                    } else {
                        acc
                    }
                },
            );
        if best_score <= current {
            break;
        }
        current = best_score;
        second.push(first.remove(best));
    }

    let shape = two_latent_model(&first, &second, names)?;
    let m2 = em_fit(
        &shape,
        data,
        &cfg.em_for(&seed_parts(3, &[&first[..], &[usize::MAX], &second].concat())),
    )?;
    let bic2 = score(&m2.model, m2.loglik, n).max(current);
    let gap = bic2 - bic1;
    Ok(UdTest {
        pass: gap <= cfg.delta,
        gap,
        m1: m1.model,
        m2: Some(m2.model),
        second,
    })
}

/// A finalized variable group and the gap of the last UD-test it passed or failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub members: Vec<usize>,
    pub gap: Option<f64>,
}

/// Greedy partition of `cols` into unidimensional groups. `mi` is indexed
/// by position in `cols`.
pub fn build_groups(
    data: &BinaryColumns,
    cols: &[usize],
    mi: &MiMatrix,
    names: &[String],
    cfg: &SkeletonConfig,
) -> Result<Vec<GroupOutcome>> {
    let n = cols.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least two variables to group, got {n}"
        )));
    }
    if mi.len() != n {
        return Err(Error::Dimension(format!("MI matrix of {} for {n} columns", mi.len())));
    }
    // pairs by descending MI, ties by lexicographic position pair
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| mi.get(b.0, b.1).total_cmp(&mi.get(a.0, a.1)).then(a.cmp(b)));
    let mut cursor = 0;

    let mut in_s = vec![true; n];
    let mut remaining = n;
    let mut groups: Vec<GroupOutcome> = Vec::new();
    let to_cols = |pos: &[usize]| pos.iter().map(|&p| cols[p]).collect::<Vec<_>>();

    while remaining > 0 {
        if remaining == 1 {
            let x = (0..n).find(|&p| in_s[p]).expect("one left");
            let target = groups
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let best = g
                        .members
                        .iter()
                        .map(|&m| mi.get(x, m))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (gi, best)
                })
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (gi, v)| {
                        if v > acc.1 {
                            (gi, v)
                        } else {
                            acc
                        }
                    },
                )
                .0;
            groups[target].members.push(x);
            in_s[x] = false;
            break;
        }
        while !(in_s[pairs[cursor].0] && in_s[pairs[cursor].1]) {
            cursor += 1;
        }
        let (a, b) = pairs[cursor];
        let mut group = vec![a, b];
        let mut in_g = vec![false; n];
        in_g[a] = true;
        in_g[b] = true;
        let mut closeness: Vec<f64> = (0..n).map(|x| mi.get(x, a).max(mi.get(x, b))).collect();
        let mut last_gap = None;

        let finalized: Vec<usize> = loop {
            if group.len() >= cfg.max_group {
                break group.clone();
            }
            let next = (0..n)
                .filter(|&x| in_s[x] && !in_g[x])
                .fold(None, |best: Option<usize>, x| match best {
                    Some(b) if closeness[b] >= closeness[x] => Some(b),
                    _ => Some(x),
                });
            let Some(x) = next else {
                break group.clone();
            };
            let mut candidate = group.clone();
            candidate.push(x);
            let test = ud_test(data, &to_cols(&candidate), names, cfg)?;
            last_gap = Some(test.gap);
            if test.pass {
                group = candidate;
                in_g[x] = true;
                for (y, c) in closeness.iter_mut().enumerate() {
                    *c = c.max(mi.get(y, x));
                }
            } else {
                let second: Vec<usize> = test.second.clone();
                break candidate.into_iter().filter(|&p| !second.contains(&cols[p])).collect();
            }
        };
        for &p in &finalized {
            in_s[p] = false;
        }
        remaining -= finalized.len();
        let mut members = finalized;
        members.sort_unstable();
        groups.push(GroupOutcome { members, gap: last_gap });
    }
    for g in &mut groups {
        g.members = to_cols(&g.members);
    }
    Ok(groups)
}

/// Maximum-weight spanning tree by Kruskal's algorithm. Ties are broken in
/// favour of the lexicographically smaller edge; edges come back sorted.
pub fn chow_liu(mi: &MiMatrix) -> Vec<(usize, usize)> {
    let n = mi.len();
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    edges.sort_by(|a, b| mi.get(b.0, b.1).total_cmp(&mi.get(a.0, a.1)).then(a.cmp(b)));
    let mut uf = UnionFind::new(n);
    let mut tree: Vec<(usize, usize)> = edges.into_iter().filter(|&(i, j)| uf.unite(i, j)).collect();
    tree.truncate(n.saturating_sub(1));
    tree.sort_unstable();
    tree
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut x = x;
        while self.parent[x] != r {
            let next = self.parent[x];
            self.parent[x] = r;
            x = next;
        }
        r
    }

    fn unite(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Index of the latent within its layer.
    pub latent: usize,
    /// Member indices at the layer below.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// 1 for the first latent layer.
    pub level: usize,
    pub names: Vec<String>,
    pub groups: Vec<Group>,
    /// Latents occupy nodes `0..k`; node `k + i` is input variable `i`.
    pub model: TreeModel,
    pub completed: BinaryColumns,
    pub chow_liu_edges: Vec<(usize, usize)>,
    pub gaps: Vec<Option<f64>>,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Latent index owning each input variable.
    pub fn parent_of_inputs(&self, n_inputs: usize) -> Vec<usize> {
        let mut p = vec![usize::MAX; n_inputs];
        for g in &self.groups {
            for &m in &g.members {
                p[m] = g.latent;
            }
        }
        p
    }
}

/// Stacked layers over the observed variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub observed_names: Vec<String>,
    /// Binary data the structure was learned from.
    pub observed: BinaryColumns,
    pub layers: Vec<Layer>,
}

impl Hierarchy {
    /// Unit counts per level, observed first.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.observed_names.len())
            .chain(self.layers.iter().map(Layer::len))
            .collect()
    }

    /// Data at `level` (0 = observed).
    pub fn data_at(&self, level: usize) -> &BinaryColumns {
        if level == 0 {
            &self.observed
        } else {
            &self.layers[level - 1].completed
        }
    }

    /// Only the top layer's latent links survive stacking.
    pub fn skeleton_top_edges(&self) -> &[(usize, usize)] {
        self.layers.last().map_or(&[], |l| &l.chow_liu_edges)
    }

    /// Group index at `level` that each observed variable descends from.
    pub fn ancestors_at(&self, level: usize) -> Result<Vec<usize>> {
        if level > self.layers.len() {
            return Err(Error::Validation(format!(
                "hierarchy has {} latent layers, asked for level {level}",
                self.layers.len()
            )));
        }
        let mut current: Vec<usize> = (0..self.observed_names.len()).collect();
        for (i, layer) in self.layers.iter().take(level).enumerate() {
            let below = if i == 0 {
                self.observed_names.len()
            } else {
                self.layers[i - 1].len()
            };
            let parents = layer.parent_of_inputs(below);
            current = current.into_iter().map(|u| parents[u]).collect();
        }
        Ok(current)
    }
}

/// One two-layer tree over `data`'s columns.
pub fn build_layer(data: &BinaryColumns, names: &[String], level: usize, cfg: &SkeletonConfig) -> Result<Layer> {
    let n_in = data.n_cols();
    let cols: Vec<usize> = (0..n_in).collect();
    let mi = mi_matrix(data, &cols)?;
    let outcomes = build_groups(data, &cols, &mi, names, cfg)?;
    let k = outcomes.len();
    let latent_names: Vec<String> = (0..k).map(|j| format!("L{level}_{j}")).collect();

    // per-group one-latent fits seed the joint model
    let group_fits: Vec<TreeModel> = outcomes
        .par_iter()
        .map(|g| {
            let shape = TreeModel::latent_class("H", &g.members, &labels(&g.members, names))?;
            Ok(em_fit(
                &shape,
                data,
                &cfg.em_for(&seed_parts(4 + level as u64 * 16, &g.members)),
            )?
            .model)
        })
        .collect::<Result<_>>()?;
    let mut provisional = BinaryColumns::empty(data.n_rows());
    for fit in &group_fits {
        let col = fit.map_completion(data, &[0])?;
        provisional.push_column(col.column(0).to_vec())?;
    }
    let latent_mi = if k > 1 {
        mi_matrix(&provisional, &(0..k).collect::<Vec<_>>())?
    } else {
        MiMatrix::from_fn(1, |_, _| 0.0)
    };
    let edges = chow_liu(&latent_mi);
    let root = (0..k)
        .map(|j| (j, latent_mi.row(j).iter().sum::<f64>()))
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (j, s)| if s > acc.1 { (j, s) } else { acc },
        )
        .0;

    // orient latent links away from the root
    let mut adj = vec![Vec::new(); k];
    for &(a, b) in &edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent: Vec<Option<usize>> = vec![None; k + n_in];
    let mut seen = vec![false; k];
    let mut queue = std::collections::VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some(v);
                queue.push_back(w);
            }
        }
    }
    let mut nodes: Vec<Node> = latent_names.iter().map(Node::latent).collect();
    for (i, name) in names.iter().enumerate() {
        nodes.push(Node::observed(name.clone(), i));
    }
    let groups: Vec<Group> = outcomes
        .iter()
        .enumerate()
        .map(|(j, g)| Group {
            latent: j,
            members: g.members.clone(),
        })
        .collect();
    for g in &groups {
        for &m in &g.members {
            parent[k + m] = Some(g.latent);
        }
    }
    let mut model = TreeModel::new(nodes, parent)?;
    for (g, fit) in groups.iter().zip(&group_fits) {
        for (slot, &m) in g.members.iter().enumerate() {
            // latent_class puts member `slot` at node `slot + 1`
            model.set_cpt(k + m, *fit.cpt(slot + 1))?;
        }
    }
    model.set_prior(group_fits[root].prior())?;
    for c in 0..k {
        if let Some(p) = model.parent(c) {
            let t = Contingency2x2::from_bits(provisional.column(p), provisional.column(c), data.n_rows()).cells();
            let a = cfg.em.smoothing;
            let row = |r: [u64; 2]| {
                let tot = (r[0] + r[1]) as f64 + 2.0 * a;
                [(r[0] as f64 + a) / tot, (r[1] as f64 + a) / tot]
            };
            model.set_cpt(c, [row(t[0]), row(t[1])])?;
        }
    }
    let refit_cfg = EmConfig {
        restarts: 1,
        max_iter: cfg.refit_max_iter,
        ..cfg.em_for(&[5, level as u64])
    };
    let model = em_refine(&model, data, &refit_cfg)?.model;
    let completed = model.map_completion(data, &(0..k).collect::<Vec<_>>())?;
    Ok(Layer {
        level,
        names: latent_names,
        groups,
        model,
        completed,
        chow_liu_edges: edges,
        gaps: outcomes.iter().map(|g| g.gap).collect(),
    })
}

/// Stacks layers until the top has at most `top_threshold` latents.
pub fn stack(data: &BinaryColumns, names: &[String], cfg: &SkeletonConfig) -> Result<Hierarchy> {
    cfg.validate()?;
    if data.n_cols() < 2 {
        return Err(Error::Validation(format!(
            "need at least two variables, got {}",
            data.n_cols()
        )));
    }
    if names.len() != data.n_cols() {
        return Err(Error::Dimension(format!(
            "{} names for {} columns",
            names.len(),
            data.n_cols()
        )));
    }
    let mut layers: Vec<Layer> = Vec::new();
    loop {
        let (input, input_names) = match layers.last() {
            None => (data, names),
            Some(l) => (&l.completed, &l.names[..]),
        };
        let level = layers.len() + 1;
        let layer = build_layer(input, input_names, level, cfg)?;
        log::info!("layer {level}: {} inputs -> {} latents", input.n_cols(), layer.len());
        if layer.len() >= input.n_cols() {
            return Err(Error::Structure(format!(
                "layer {level} did not shrink: {} inputs gave {} groups",
                input.n_cols(),
                layer.len()
            )));
        }
        let k = layer.len();
        layers.push(layer);
        if k <= cfg.top_threshold || k < 2 {
            break;
        }
    }
    Ok(Hierarchy {
        observed_names: names.to_vec(),
        observed: data.clone(),
        layers,
    })
}
