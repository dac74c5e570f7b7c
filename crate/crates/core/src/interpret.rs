//! Hidden-unit interpretability and partition pictures.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::skeleton::Hierarchy;

/// Word vectors, one per token, all the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_pairs(pairs: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = pairs.first().map_or(0, |p| p.1.len());
        if dim == 0 {
            return Err(Error::Validation("embedding table is empty".into()));
        }
        let mut index = HashMap::with_capacity(pairs.len());
        let mut vectors = Vec::with_capacity(pairs.len());
        for (token, v) in pairs {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "{token} has {} components, expected {dim}",
                    v.len()
                )));
            }
            if index.insert(token.clone(), vectors.len()).is_some() {
                return Err(Error::Validation(format!("duplicate embedding token {token}")));
            }
            vectors.push(v);
        }
        Ok(Self { dim, index, vectors })
    }

    /// Text format: `token x1 x2 ... xD` per line, D fixed by the first line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut pairs = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let v = parts
                .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("{p}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(parse_err(format!("expected {d} components, found {}", v.len())));
            }
            pairs.push((token.to_string(), v));
        }
        if pairs.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "no embeddings".into(),
            });
        }
        Self::from_pairs(pairs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.vectors[i][..])
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sample Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    // the centred sums of a constant vector can be rounding noise, not zero
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if a.is_empty() || constant(a) || constant(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCharacterization {
    pub unit: usize,
    /// Descending correlation, ties by word index.
    pub top_words: Vec<(String, f64)>,
    pub score: Option<f64>,
}

/// Top-`k` words by Pearson correlation with one unit's activations.
pub fn unit_top_words(unit: usize, activations: &[f64], d: &Dataset, k: usize) -> Result<UnitCharacterization> {
    let acts = Array2::from_shape_vec((activations.len(), 1), activations.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let mut out = characterize_units(&acts, d, k)?;
    let mut c = out.pop().expect("one unit");
    c.unit = unit;
    Ok(c)
}

/// [`unit_top_words`] for every column of `activations` (cases × units).
pub fn characterize_units(activations: &Array2<f64>, d: &Dataset, k: usize) -> Result<Vec<UnitCharacterization>> {
    let n = activations.nrows();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 cases to correlate, got {n}"
        )));
    }
    if n != d.n_cases() {
        return Err(Error::Dimension(format!(
            "{n} activation rows for {} cases",
            d.n_cases()
        )));
    }
    let columns: Vec<Vec<f64>> = d
        .values()
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let units: Vec<ArrayView1<f64>> = activations.columns().into_iter().collect();
    Ok(units
        .par_iter()
        .enumerate()
        .map(|(unit, a)| {
            let a = a.to_vec();
            let mut scored: Vec<(usize, f64)> = columns.iter().map(|c| pearson(c, &a)).enumerate().collect();
            scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            scored.truncate(k);
            UnitCharacterization {
                unit,
                top_words: scored.into_iter().map(|(i, r)| (d.names()[i].clone(), r)).collect(),
                score: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretScore {
    pub units: Vec<UnitCharacterization>,
    /// Mean over units with at least two embedded top words.
    pub model: f64,
    pub scored_units: usize,
}

/// Mean pairwise cosine of each unit's embedded top words, then the mean over units.
pub fn interpretability_score(units: Vec<UnitCharacterization>, emb: &EmbeddingTable) -> Result<InterpretScore> {
    if units.is_empty() {
        return Err(Error::Validation("no units to score".into()));
    }
    let units: Vec<UnitCharacterization> = units
        .into_iter()
        .map(|mut u| {
            let vecs: Vec<&[f64]> = u.top_words.iter().filter_map(|(w, _)| emb.get(w)).collect();
            u.score = (vecs.len() >= 2).then(|| {
                let mut total = 0.0;
                let mut pairs = 0usize;
                for i in 0..vecs.len() {
                    for j in i + 1..vecs.len() {
                        total += cosine(vecs[i], vecs[j]);
                        pairs += 1;
                    }
                }
                total / pairs as f64
            });
            u
        })
        .collect();
    let scored: Vec<f64> = units.iter().filter_map(|u| u.score).collect();
    if scored.is_empty() {
        return Err(Error::Validation("no unit has two or more embedded top words".into()));
    }
    Ok(InterpretScore {
        model: scored.iter().sum::<f64>() / scored.len() as f64,
        scored_units: scored.len(),
        units,
    })
}

/// Colour of group `g`: golden-angle hues at fixed saturation and value.
pub fn palette(g: usize) -> [u8; 3] {
    let h = (g as f64 * 137.507_764_050_037_85).rem_euclid(360.0) / 60.0;
    let (s, v) = (0.65, if g.is_multiple_of(2) { 0.95 } else { 0.75 });
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, gg, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(gg), q(b)]
}

/// Binary PPM (P6) of `groups` laid out row-major on a `height × width` grid.
pub fn render_partition(groups: &[usize], height: usize, width: usize) -> Result<Vec<u8>> {
    if groups.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} variables cannot fill a {height}x{width} image",
            groups.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &g in groups {
        out.extend_from_slice(&palette(g));
    }
    Ok(out)
}

/// Colours each observed variable by its ancestor at `layer`.
pub fn partition_image(h: &Hierarchy, layer: usize, dims: (usize, usize), path: &Path) -> Result<()> {
    let groups = h.ancestors_at(layer)?;
    write_atomic(path, &render_partition(&groups, dims.0, dims.1)?)
}
