//! Plug-in information measures over binary columns, in nats.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryColumns;
use crate::error::{Error, Result};

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Validation(format!(
            "negative or non-finite probability in {dist:?}"
        )));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("probabilities sum to {total}")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Joint counts of two binary variables; `cxy` counts first = x, second = y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency2x2 {
    pub c00: u64,
    pub c01: u64,
    pub c10: u64,
    pub c11: u64,
}

impl Contingency2x2 {
    pub fn new(c00: u64, c01: u64, c10: u64, c11: u64) -> Self {
        Self { c00, c01, c10, c11 }
    }

    pub fn total(&self) -> u64 {
        self.c00 + self.c01 + self.c10 + self.c11
    }

    pub fn cells(&self) -> [[u64; 2]; 2] {
        [[self.c00, self.c01], [self.c10, self.c11]]
    }

    /// Counts from two bit columns over the same `n` rows.
    pub fn from_bits(a: &[u64], b: &[u64], n: usize) -> Self {
        let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
        for (x, y) in a.iter().zip(b) {
            na += u64::from(x.count_ones());
            nb += u64::from(y.count_ones());
            nab += u64::from((x & y).count_ones());
        }
        joint_from_marginals(n as u64, na, nb, nab)
    }
}

fn joint_from_marginals(n: u64, na: u64, nb: u64, nab: u64) -> Contingency2x2 {
    Contingency2x2 {
        c11: nab,
        c10: na - nab,
        c01: nb - nab,
        c00: n + nab - na - nb,
    }
}

/// `Σ_xy p(x,y) ln[p(x,y) / (p(x) p(y))]` over any 2-D count table. Zero
/// cells contribute nothing; an all-zero table yields 0.
fn mi_of_counts<const A: usize, const B: usize>(cells: &[[u64; B]; A]) -> f64 {
    let total: u64 = cells.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let rows: Vec<f64> = cells.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..B).map(|j| cells.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let mut mi = 0.0;
    for (i, row) in cells.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

pub fn mutual_information(t: &Contingency2x2) -> Result<f64> {
    if t.total() == 0 {
        return Err(Error::Validation("contingency table is empty".into()));
    }
    Ok(mi_of_counts(&t.cells()))
}

/// Symmetric pairwise MI over a set of columns, indexed by position in
/// that set. The diagonal holds zeros and is not meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiMatrix {
    n: usize,
    data: Vec<f64>,
}

impl MiMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

const TILE: usize = 32;

/// Pairwise MI of the selected columns. Pair counts are accumulated in
/// column tiles so a tile's bit words stay cache resident; tiles run in
/// parallel and every entry is computed by exactly one task, so results do
/// not depend on the worker count.
pub fn mi_matrix(data: &BinaryColumns, columns: &[usize]) -> Result<MiMatrix> {
    if columns.is_empty() {
        return Err(Error::Validation("mutual information over an empty column set".into()));
    }
    let n = columns.len();
    let rows = data.n_rows();
    let ones: Vec<u64> = columns.iter().map(|&c| data.count_ones(c)).collect();
    let tiles = n.div_ceil(TILE);
    let tile_pairs: Vec<(usize, usize)> = (0..tiles).flat_map(|a| (a..tiles).map(move |b| (a, b))).collect();

    let blocks: Vec<Vec<(usize, usize, f64)>> = tile_pairs
        .par_iter()
        .map(|&(ta, tb)| {
            let mut out = Vec::with_capacity(TILE * TILE);
            for i in ta * TILE..((ta + 1) * TILE).min(n) {
                let a = data.column(columns[i]);
                let j0 = if ta == tb { i + 1 } else { tb * TILE };
                for j in j0..((tb + 1) * TILE).min(n) {
                    let b = data.column(columns[j]);
                    let nab: u64 = a.iter().zip(b).map(|(x, y)| u64::from((x & y).count_ones())).sum();
                    let t = joint_from_marginals(rows as u64, ones[i], ones[j], nab);
                    out.push((i, j, mi_of_counts(&t.cells())));
                }
            }
            out
        })
        .collect();

    let mut data_out = vec![0.0; n * n];
    for (i, j, v) in blocks.into_iter().flatten() {
        data_out[i * n + j] = v;
        data_out[j * n + i] = v;
    }
    Ok(MiMatrix { n, data: data_out })
}

/// Counts `[z][a][b]` of three binary columns.
pub fn counts3(a: &[u64], b: &[u64], z: &[u64], n: usize) -> [[[u64; 2]; 2]; 2] {
    let tail = match n % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    };
    let words = a.len();
    let mut out = [[[0u64; 2]; 2]; 2];
    for w in 0..words {
        let valid = if w + 1 == words { tail } else { u64::MAX };
        for (zs, zw) in [(0, !z[w] & valid), (1, z[w])] {
            let (aw, bw) = (a[w] & zw, b[w] & zw);
            let nz = u64::from(zw.count_ones());
            let na = u64::from(aw.count_ones());
            let nb = u64::from(bw.count_ones());
            let nab = u64::from((aw & bw).count_ones());
            let cell = &mut out[zs];
            cell[1][1] += nab;
            cell[1][0] += na - nab;
            cell[0][1] += nb - nab;
            cell[0][0] += nz + nab - na - nb;
        }
    }
    out
}

/// `Σ_z p(z) I(a; b | Z = z)` from `[z][a][b]` counts.
pub fn cmi_from_counts(counts: &[[[u64; 2]; 2]; 2]) -> f64 {
    let total: u64 = counts.iter().flatten().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .map(|stratum| {
            let nz: u64 = stratum.iter().flatten().sum();
            nz as f64 / n * mi_of_counts(stratum)
        })
        .sum::<f64>()
        .max(0.0)
}

/// Empirical conditional mutual information `I(a; b | z)` of three columns.
pub fn conditional_mi(data: &BinaryColumns, a: usize, b: usize, z: usize) -> Result<f64> {
    if a == b || a == z || b == z {
        return Err(Error::Validation(format!(
            "conditional MI needs distinct columns, got ({a}, {b}, {z})"
        )));
    }
    Ok(cmi_from_counts(&counts3(
        data.column(a),
        data.column(b),
        data.column(z),
        data.n_rows(),
    )))
}
