//! Skeleton expansion into the layered sparse connectivity ("PGM core").
//!
//! Every latent keeps its skeleton children and gains links to the lower
//! variables that the tree explains worst: those with the largest empirical
//! conditional mutual information given their own skeleton parent.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::write_atomic;
use crate::error::{Error, Result};
use crate::skeleton::Hierarchy;
use crate::stats::{cmi_from_counts, counts3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Fraction of the layer below each unit connects to, skeleton edges included.
    pub fan_in_fraction: f64,
    /// Candidates scoring below this are never added.
    pub cmi_floor: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            fan_in_fraction: 0.05,
            cmi_floor: 0.0,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fan_in_fraction > 0.0 && self.fan_in_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fan_in_fraction must be in (0, 1], got {}",
                self.fan_in_fraction
            )));
        }
        if self.cmi_floor.is_nan() || self.cmi_floor < 0.0 {
            return Err(Error::Config(format!("cmi_floor must be >= 0, got {}", self.cmi_floor)));
        }
        Ok(())
    }

    /// Total fan-in budget for units above a layer of `lower` units.
    pub fn budget(&self, lower: usize) -> usize {
        ((self.fan_in_fraction * lower as f64 - 1e-9).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeOrigin {
    Skeleton,
    Expansion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreEdge {
    pub lower: usize,
    pub origin: EdgeOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmCore {
    /// Units per layer, observed layer first.
    pub layer_sizes: Vec<usize>,
    pub names: Vec<Vec<String>>,
    /// `adjacency[l][u]`: edges from layer `l` into unit `u` of layer `l + 1`,
    /// sorted by lower index.
    pub adjacency: Vec<Vec<Vec<CoreEdge>>>,
}

impl PgmCore {
    /// Number of layers including the observed one.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().flatten().map(Vec::len).sum()
    }

    pub fn count_origin(&self, origin: EdgeOrigin) -> usize {
        self.adjacency
            .iter()
            .flatten()
            .flatten()
            .filter(|e| e.origin == origin)
            .count()
    }

    /// All edges as `(layer below, lower, upper, origin)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize, EdgeOrigin)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(l, ups)| {
            ups.iter()
                .enumerate()
                .flat_map(move |(u, es)| es.iter().map(move |e| (l, e.lower, u, e.origin)))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.adjacency.len() + 1 != self.layer_sizes.len() || self.names.len() != self.layer_sizes.len() {
            return Err(Error::Validation("core layer bookkeeping is inconsistent".into()));
        }
        for (l, ups) in self.adjacency.iter().enumerate() {
            if ups.len() != self.layer_sizes[l + 1] {
                return Err(Error::Validation(format!(
                    "layer {} has {} adjacency rows",
                    l + 1,
                    ups.len()
                )));
            }
            for (u, es) in ups.iter().enumerate() {
                if es.is_empty() {
                    return Err(Error::Validation(format!("unit {u} of layer {} has no inputs", l + 1)));
                }
                if es.windows(2).any(|w| w[0].lower >= w[1].lower) || es.iter().any(|e| e.lower >= self.layer_sizes[l])
                {
                    return Err(Error::Validation(format!("unit {u} of layer {} has bad edges", l + 1)));
                }
            }
        }
        Ok(())
    }
}

/// Expansion candidates of latent `unit` at `level` (>= 1), ranked by
/// descending CMI and then ascending index. Own skeleton children are excluded.
pub fn ranked_candidates(h: &Hierarchy, level: usize, unit: usize) -> Vec<(usize, f64)> {
    let layer = &h.layers[level - 1];
    let below = h.data_at(level - 1);
    let here = h.data_at(level);
    let parent_of = layer.parent_of_inputs(below.n_cols());
    let v = here.column(unit);
    let mut scored: Vec<(usize, f64)> = (0..below.n_cols())
        .filter(|&c| parent_of[c] != unit)
        .map(|c| {
            let z = here.column(parent_of[c]);
            (c, cmi_from_counts(&counts3(v, below.column(c), z, below.n_rows())))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Skeleton edges plus the best-ranked candidates up to the fan-in budget.
/// Links among top-layer latents are not carried over.
pub fn expand(h: &Hierarchy, cfg: &ExpansionConfig) -> Result<PgmCore> {
    cfg.validate()?;
    let sizes = h.layer_sizes();
    let mut names = vec![h.observed_names.clone()];
    let mut adjacency = Vec::with_capacity(h.layers.len());
    for (i, layer) in h.layers.iter().enumerate() {
        let level = i + 1;
        names.push(layer.names.clone());
        let budget = cfg.budget(sizes[level - 1]);
        let rows: Vec<Vec<CoreEdge>> = layer
            .groups
            .par_iter()
            .map(|g| {
                let mut edges: Vec<CoreEdge> = g
                    .members
                    .iter()
                    .map(|&m| CoreEdge {
                        lower: m,
                        origin: EdgeOrigin::Skeleton,
                    })
                    .collect();
                if budget < edges.len() {
                    log::warn!(
                        "{}: fan-in budget {budget} is below its {} skeleton edges; adding none",
                        layer.names[g.latent],
                        edges.len()
                    );
                } else {
                    let room = budget - edges.len();
                    edges.extend(
                        ranked_candidates(h, level, g.latent)
                            .into_iter()
                            .filter(|&(_, s)| s >= cfg.cmi_floor)
                            .take(room)
                            .map(|(c, _)| CoreEdge {
                                lower: c,
                                origin: EdgeOrigin::Expansion,
                            }),
                    );
                }
                edges.sort_by_key(|e| e.lower);
                edges
            })
            .collect();
        adjacency.push(rows);
    }
    let core = PgmCore {
        layer_sizes: sizes,
        names,
        adjacency,
    };
    core.validate()?;
    Ok(core)
}

/// Graphviz rendering, bottom-to-top; skeleton edges solid, expansion edges dashed.
pub fn to_dot(core: &PgmCore) -> String {
    let mut s = String::from("digraph pgm_core {\n  rankdir=BT;\n  node [shape=circle, fontsize=10];\n");
    for (l, names) in core.names.iter().enumerate() {
        let _ = writeln!(s, "  subgraph layer_{l} {{\n    rank=same;");
        for (i, name) in names.iter().enumerate() {
            let style = if l == 0 {
                ", style=filled, fillcolor=black, fontcolor=white"
            } else {
                ""
            };
            let _ = writeln!(s, "    n{l}_{i} [label=\"{}\"{style}];", name.replace('"', "\\\""));
        }
        s.push_str("  }\n");
    }
    for (l, lower, upper, origin) in core.edges() {
        let style = match origin {
            EdgeOrigin::Skeleton => "solid",
            EdgeOrigin::Expansion => "dashed",
        };
        let _ = writeln!(s, "  n{l}_{lower} -> n{}_{upper} [style={style}];", l + 1);
    }
    s.push_str("}\n");
    s
}

pub fn export_graph(core: &PgmCore, path: &Path) -> Result<()> {
    write_atomic(path, to_dot(core).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PgmCore {
        let e = |lower, origin| CoreEdge { lower, origin };
        PgmCore {
            layer_sizes: vec![4, 2, 1],
            names: vec![
                vec!["a".into(), "b".into(), "c".into(), "d".into()],
                vec!["L1_0".into(), "L1_1".into()],
                vec!["L2_0".into()],
            ],
            adjacency: vec![
                vec![
                    vec![
                        e(0, EdgeOrigin::Skeleton),
                        e(1, EdgeOrigin::Skeleton),
                        e(2, EdgeOrigin::Expansion),
                    ],
                    vec![e(2, EdgeOrigin::Skeleton), e(3, EdgeOrigin::Skeleton)],
                ],
                vec![vec![e(0, EdgeOrigin::Skeleton), e(1, EdgeOrigin::Skeleton)]],
            ],
        }
    }

    #[test]
    fn budget_rounding() {
        let c = ExpansionConfig::default();
        assert_eq!(c.budget(2000), 100);
        assert_eq!(c.budget(1644), 83);
        assert_eq!(c.budget(3), 1);
        assert!(ExpansionConfig {
            fan_in_fraction: 0.0,
            ..c
        }
        .validate()
        .is_err());
        assert!(ExpansionConfig {
            fan_in_fraction: 1.5,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dot_counts_and_styles() {
        let core = toy();
        core.validate().unwrap();
        let dot = to_dot(&core);
        assert_eq!(dot.matches("[label=").count(), 7);
        assert_eq!(dot.matches(" -> ").count(), core.edge_count());
        assert_eq!(dot.matches("style=dashed").count(), 1);
        assert_eq!(to_dot(&core), dot);
    }

    #[test]
    fn validate_rejects_empty_units() {
        let mut core = toy();
        core.adjacency[1][0].clear();
        assert!(core.validate().is_err());
    }
}
