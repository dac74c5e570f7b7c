//! Synthetic data from planted latent trees.
//!
//! Used by the test suites and by the fixture generator of the command line.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryColumns, Dataset};
use crate::error::Result;
use crate::ltm::{Node, TreeModel};
use crate::rng;
use crate::skeleton::{Group, Hierarchy, Layer};

/// A planted multi-level tree and the ground-truth groups at each level.
#[derive(Debug, Clone)]
pub struct Planted {
    pub model: TreeModel,
    /// `groups[l]` lists, for each latent at level `l + 1`, the indices of
    /// its children at level `l` (level 0 = observed columns).
    pub groups: Vec<Vec<Vec<usize>>>,
    /// Node ids per level, level 0 = observed.
    pub level_nodes: Vec<Vec<usize>>,
}

impl Planted {
    pub fn true_partition(&self) -> Vec<Vec<usize>> {
        self.groups[0].clone()
    }

    /// The planted structure as a hierarchy whose completed data are the
    /// sampled latent states themselves (`nodes` from [`sample_nodes`]).
    pub fn oracle_hierarchy(&self, nodes: &BinaryColumns) -> Result<Hierarchy> {
        let observed = observed_view(&self.model, nodes);
        let observed_names = names("x", observed.n_cols());
        let mut layers = Vec::new();
        for level in 1..self.level_nodes.len() {
            let ids = &self.level_nodes[level];
            let k = ids.len();
            let n_in = self.level_nodes[level - 1].len();
            let layer_names: Vec<String> = (0..k).map(|j| format!("L{level}_{j}")).collect();
            let groups: Vec<Group> = self.groups[level - 1]
                .iter()
                .enumerate()
                .map(|(latent, m)| Group {
                    latent,
                    members: m.clone(),
                })
                .collect();
            let mut tree_nodes: Vec<Node> = layer_names.iter().map(Node::latent).collect();
            let mut parent: Vec<Option<usize>> = (0..k).map(|j| (j > 0).then_some(0)).collect();
            let mut owner = vec![0; n_in];
            for g in &groups {
                for &m in &g.members {
                    owner[m] = g.latent;
                }
            }
            for (i, &o) in owner.iter().enumerate() {
                tree_nodes.push(Node::observed(format!("in{i}"), i));
                parent.push(Some(o));
            }
            layers.push(Layer {
                level,
                names: layer_names,
                groups,
                model: TreeModel::new(tree_nodes, parent)?,
                completed: nodes.select_columns(ids),
                chow_liu_edges: (1..k).map(|j| (0, j)).collect(),
                gaps: vec![None; k],
            });
        }
        Ok(Hierarchy {
            observed_names,
            observed,
            layers,
        })
    }
}

/// Symmetric noisy-copy table.
pub fn copy_cpt(fidelity: f64) -> [[f64; 2]; 2] {
    [[fidelity, 1.0 - fidelity], [1.0 - fidelity, fidelity]]
}

/// Builds a tree top-down: `top` latents (the first is the root, the rest
/// its children), then every unit of each level gets `branching[i]`
/// children at the level below. All edges copy their parent with
/// probability `fidelity`.
pub fn layered_tree(top: usize, branching: &[usize], fidelity: f64) -> Planted {
    let depth = branching.len();
    let mut nodes = Vec::new();
    let mut parent = Vec::new();
    let mut level_nodes: Vec<Vec<usize>> = vec![Vec::new(); depth + 1];
    for j in 0..top {
        level_nodes[depth].push(nodes.len());
        nodes.push(Node::latent(format!("T{j}")));
        parent.push(if j == 0 { None } else { Some(0) });
    }
    let mut groups = vec![Vec::new(); depth];
    let mut obs = 0;
    for (step, &b) in branching.iter().enumerate() {
        let level = depth - step - 1;
        let uppers = level_nodes[level + 1].clone();
        for &u in &uppers {
            let mut g = Vec::new();
            for _ in 0..b {
                g.push(level_nodes[level].len());
                level_nodes[level].push(nodes.len());
                if level == 0 {
                    nodes.push(Node::observed(format!("x{obs}"), obs));
                    obs += 1;
                } else {
                    nodes.push(Node::latent(format!("h{level}_{}", level_nodes[level].len() - 1)));
                }
                parent.push(Some(u));
            }
            groups[level].push(g);
        }
    }
    let mut model = TreeModel::new(nodes, parent).expect("layered construction is a tree");
    for v in 0..model.len() {
        if v != model.root() {
            model.set_cpt(v, copy_cpt(fidelity)).expect("valid table");
        }
    }
    Planted {
        model,
        groups,
        level_nodes,
    }
}

/// Ancestral sample. Returns the states of every node (column = node id).
pub fn sample_nodes(model: &TreeModel, n: usize, seed: u64) -> BinaryColumns {
    let mut rng = rng::stream(seed, &[0x5A]);
    let order = bfs(model);
    let mut rows = vec![vec![0u8; model.len()]; n];
    for row in rows.iter_mut() {
        for &v in &order {
            let p1 = match model.parent(v) {
                None => model.prior()[1],
                Some(p) => model.cpt(v)[usize::from(row[p])][1],
            };
            row[v] = u8::from(rng.gen_bool(p1));
        }
    }
    BinaryColumns::from_rows(&rows)
}

/// Observed columns of a sample, ordered by their bound data column.
pub fn observed_view(model: &TreeModel, nodes: &BinaryColumns) -> BinaryColumns {
    let mut obs: Vec<(usize, usize)> = model
        .observed()
        .iter()
        .map(|&v| (model.nodes()[v].column.expect("observed"), v))
        .collect();
    obs.sort_unstable();
    nodes.select_columns(&obs.into_iter().map(|(_, v)| v).collect::<Vec<_>>())
}

fn bfs(model: &TreeModel) -> Vec<usize> {
    let mut order = vec![model.root()];
    let mut i = 0;
    while i < order.len() {
        order.extend_from_slice(model.children(order[i]));
        i += 1;
    }
    order
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Word counts: absent words are 0, present words 1 + geometric extra.
    Counts,
    /// Latent-driven Gaussian measurements.
    Continuous,
}

/// A labelled classification task whose inputs come from a three-level
/// latent hierarchy: class → topic latents → group latents → inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicTask {
    pub n_classes: usize,
    pub n_vars: usize,
    /// Inputs per group latent.
    pub group_size: usize,
    /// Group latents per topic latent.
    pub groups_per_topic: usize,
    /// Topics switched on by each class.
    pub topics_per_class: usize,
    /// P(topic on | class uses it), P(topic on | class does not).
    pub topic_on: f64,
    pub topic_off: f64,
    /// Group latent copies its topic with this probability.
    pub group_fidelity: f64,
    /// P(input on | group on), P(input on | group off).
    pub emit_on: f64,
    pub emit_off: f64,
    pub kind: FeatureKind,
}

impl TopicTask {
    pub fn n_groups(&self) -> usize {
        self.n_vars.div_ceil(self.group_size)
    }

    pub fn n_topics(&self) -> usize {
        self.n_groups().div_ceil(self.groups_per_topic)
    }

    /// Group latent of each input.
    pub fn group_of(&self, var: usize) -> usize {
        var / self.group_size
    }

    pub fn topic_of_group(&self, g: usize) -> usize {
        g / self.groups_per_topic
    }

    fn class_topics(&self, c: usize) -> Vec<usize> {
        // classes take disjoint-as-possible contiguous topic blocks
        let t = self.n_topics();
        (0..self.topics_per_class)
            .map(|i| (c * self.topics_per_class + i) % t)
            .collect()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
        let mut rng = rng::stream(seed, &[0x7A5C]);
        let noise = Normal::new(0.0, 0.6).expect("valid sigma");
        let (nt, ng) = (self.n_topics(), self.n_groups());
        let topic_sets: Vec<Vec<usize>> = (0..self.n_classes).map(|c| self.class_topics(c)).collect();
        let mut labels = Vec::with_capacity(n);
        let mut values = Array2::<f32>::zeros((n, self.n_vars));
        let mut topics = vec![false; nt];
        let mut groups = vec![false; ng];
        for r in 0..n {
            let c = rng.gen_range(0..self.n_classes);
            labels.push(c);
            for (t, on) in topics.iter_mut().enumerate() {
                let p = if topic_sets[c].contains(&t) {
                    self.topic_on
                } else {
                    self.topic_off
                };
                *on = rng.gen_bool(p);
            }
            for (g, on) in groups.iter_mut().enumerate() {
                let t = topics[self.topic_of_group(g)];
                *on = if rng.gen_bool(self.group_fidelity) { t } else { !t };
            }
            for j in 0..self.n_vars {
                let g = groups[self.group_of(j)];
                let present = rng.gen_bool(if g { self.emit_on } else { self.emit_off });
                values[[r, j]] = match self.kind {
                    FeatureKind::Counts => {
                        if present {
                            let mut k = 1.0;
                            while rng.gen_bool(0.3) {
                                k += 1.0;
                            }
                            k
                        } else {
                            0.0
                        }
                    }
                    FeatureKind::Continuous => f32::from(u8::from(present)) + noise.sample(&mut rng),
                };
            }
        }
        let prefix = match self.kind {
            FeatureKind::Counts => "w",
            FeatureKind::Continuous => "f",
        };
        Ok((Dataset::new(names(prefix, self.n_vars), values)?, labels))
    }
}
