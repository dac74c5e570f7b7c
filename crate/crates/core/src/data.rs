//! Dataset ingestion: tables, binarization, splits.
//!
//! A [`Dataset`] keeps two views of the same observations. The real-valued
//! view feeds network training; the bit-packed binary view feeds every
//! structure-learning statistic.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Column-major bit matrix. Bits past `n_rows` in the last word of every
/// column are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryColumns {
    n_rows: usize,
    cols: Vec<Vec<u64>>,
}

impl BinaryColumns {
    pub fn words_for(n_rows: usize) -> usize {
        n_rows.div_ceil(64)
    }

    pub fn empty(n_rows: usize) -> Self {
        Self {
            n_rows,
            cols: Vec::new(),
        }
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let words = Self::words_for(n_rows);
        let cols = (0..n_cols)
            .map(|c| {
                let mut col = vec![0u64; words];
                for r in 0..n_rows {
                    if f(r, c) {
                        col[r / 64] |= 1 << (r % 64);
                    }
                }
                col
            })
            .collect();
        Self { n_rows, cols }
    }

    /// Builds from row-major 0/1 states.
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        Self::from_fn(rows.len(), n_cols, |r, c| rows[r][c] != 0)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, c: usize) -> &[u64] {
        &self.cols[c]
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cols[col][row / 64] >> (row % 64) & 1 == 1
    }

    pub fn count_ones(&self, col: usize) -> u64 {
        self.cols[col].iter().map(|w| u64::from(w.count_ones())).sum()
    }

    /// Mask of valid bits in the last word.
    pub fn tail_mask(&self) -> u64 {
        match self.n_rows % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    pub fn push_column(&mut self, bits: Vec<u64>) -> Result<()> {
        if bits.len() != Self::words_for(self.n_rows) {
            return Err(Error::Dimension(format!(
                "column has {} words, expected {}",
                bits.len(),
                Self::words_for(self.n_rows)
            )));
        }
        if let Some(last) = bits.last() {
            if last & !self.tail_mask() != 0 {
                return Err(Error::Validation("column has bits set past the last row".into()));
            }
        }
        self.cols.push(bits);
        Ok(())
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            n_rows: self.n_rows,
            cols: cols.iter().map(|&c| self.cols[c].clone()).collect(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::from_fn(rows.len(), self.n_cols(), |r, c| self.get(rows[r], c))
    }

    /// States of the given columns for one row.
    pub fn row_states(&self, row: usize, cols: &[usize]) -> Vec<u8> {
        cols.iter().map(|&c| u8::from(self.get(row, c))).collect()
    }

    pub fn is_constant(&self, col: usize) -> bool {
        let ones = self.count_ones(col);
        ones == 0 || ones == self.n_rows as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableFormat {
    /// Comma separated, header row of variable names.
    DenseCsv,
    /// Whitespace separated `row col value` lines, 0-based.
    SparseTriplet,
    /// Sparse triplets whose columns are named by a vocabulary file.
    BagOfWordsVocab,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-csv" => Ok(Self::DenseCsv),
            "sparse-triplet" => Ok(Self::SparseTriplet),
            "bag-of-words-vocab" => Ok(Self::BagOfWordsVocab),
            other => Err(Error::Config(format!("unknown table format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizePolicy {
    /// 1 iff value > 0.
    Positive,
    /// 1 iff value > the column's empirical median.
    Median,
}

impl std::str::FromStr for BinarizePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Self::Positive),
            "median" => Ok(Self::Median),
            other => Err(Error::Config(format!("unknown binarization policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    names: Vec<String>,
    values: Array2<f32>,
    binary: Option<BinaryColumns>,
    dropped: Vec<String>,
}

impl Dataset {
    pub fn new(names: Vec<String>, values: Array2<f32>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(names.len());
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Validation(format!("duplicate variable name `{n}`")));
            }
        }
        Ok(Self {
            names,
            values,
            binary: None,
            dropped: Vec::new(),
        })
    }

    /// A dataset whose binary view is given directly; values mirror the bits.
    pub fn from_binary(names: Vec<String>, binary: BinaryColumns) -> Result<Self> {
        let values = Array2::from_shape_fn((binary.n_rows(), binary.n_cols()), |(r, c)| {
            f32::from(u8::from(binary.get(r, c)))
        });
        let mut d = Self::new(names, values)?;
        d.binary = Some(binary);
        Ok(d)
    }

    pub fn n_cases(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn binary(&self) -> Option<&BinaryColumns> {
        self.binary.as_ref()
    }

    pub fn require_binary(&self) -> Result<&BinaryColumns> {
        self.binary
            .as_ref()
            .ok_or_else(|| Error::Validation("dataset has not been binarized".into()))
    }

    /// Names of columns removed as constant during binarization.
    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    pub fn binarize(&self, policy: BinarizePolicy) -> Result<Dataset> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite value in table".into()));
        }
        let n = self.n_cases();
        let thresholds: Vec<f32> = match policy {
            BinarizePolicy::Positive => vec![0.0; self.n_vars()],
            BinarizePolicy::Median => self
                .values
                .axis_iter(Axis(1))
                .map(|col| median(col.iter().copied()))
                .collect(),
        };
        let full = BinaryColumns::from_fn(n, self.n_vars(), |r, c| self.values[[r, c]] > thresholds[c]);

        let keep: Vec<usize> = (0..self.n_vars()).filter(|&c| !full.is_constant(c)).collect();
        let mut dropped = self.dropped.clone();
        for c in (0..self.n_vars()).filter(|c| full.is_constant(*c)) {
            log::warn!("dropping constant column `{}`", self.names[c]);
            dropped.push(self.names[c].clone());
        }
        Ok(Dataset {
            names: keep.iter().map(|&c| self.names[c].clone()).collect(),
            values: self.values.select(Axis(1), &keep),
            binary: Some(full.select_columns(&keep)),
            dropped,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            values: self.values.select(Axis(0), rows),
            binary: self.binary.as_ref().map(|b| b.select_rows(rows)),
            dropped: self.dropped.clone(),
        }
    }
}

fn median(it: impl Iterator<Item = f32>) -> f32 {
    let mut v: Vec<f32> = it.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f32::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Loads a table. `vocab` names the columns and is required for
/// [`TableFormat::BagOfWordsVocab`]; for sparse triplets it is optional.
pub fn load_table(path: &Path, format: TableFormat, vocab: Option<&Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if text.trim().is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: "empty input".into(),
        });
    }
    match format {
        TableFormat::DenseCsv => parse_dense_csv(path, &text),
        TableFormat::SparseTriplet => {
            let names = vocab.map(load_vocab).transpose()?;
            parse_triplets(path, &text, names)
        }
        TableFormat::BagOfWordsVocab => {
            let vocab = vocab.ok_or_else(|| Error::Config("bag-of-words input needs a vocabulary file".into()))?;
            parse_triplets(path, &text, Some(load_vocab(vocab)?))
        }
    }
}

fn parse_dense_csv(path: &Path, text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_owned())
        .collect();
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != names.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", names.len(), rec.len()),
            ));
        }
        for field in rec.iter() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: `{field}`")))?;
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    let values = Array2::from_shape_vec((rows, names.len()), flat).expect("row lengths checked");
    Dataset::new(names, values)
}

fn parse_triplets(path: &Path, text: &str, names: Option<Vec<String>>) -> Result<Dataset> {
    let mut entries = Vec::new();
    let (mut max_row, mut max_col) = (0usize, 0usize);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            msg,
        };
        let mut it = line.split_whitespace();
        let (Some(r), Some(c), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(err("expected `row col value`".into()));
        };
        let r: usize = r.parse().map_err(|_| err(format!("bad row index `{r}`")))?;
        let c: usize = c.parse().map_err(|_| err(format!("bad column index `{c}`")))?;
        let v: f32 = v.parse().map_err(|_| err(format!("bad value `{v}`")))?;
        if let Some(names) = &names {
            if c >= names.len() {
                return Err(err(format!("column {c} outside vocabulary of {}", names.len())));
            }
        }
        max_row = max_row.max(r);
        max_col = max_col.max(c);
        entries.push((r, c, v));
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: "no entries".into(),
        });
    }
    let names = names.unwrap_or_else(|| (0..=max_col).map(|j| format!("v{j}")).collect());
    let mut values = Array2::zeros((max_row + 1, names.len()));
    // repeated coordinates accumulate, as repeated tokens do
    for (r, c, v) in entries {
        values[[r, c]] += v;
    }
    Dataset::new(names, values)
}

pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_owned())
        .filter(|l| !l.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: "empty vocabulary".into(),
        });
    }
    Ok(names)
}

/// One integer class label per line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: format!("bad label `{line}`"),
        })?);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: "no labels".into(),
        });
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Random disjoint split of `n` cases. Set sizes are `floor(fraction * n)`.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    let f = [fractions.train, fractions.validation, fractions.test];
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Config(format!("split fractions {f:?} outside [0, 1]")));
    }
    if f.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions {f:?} sum past 1")));
    }
    let sizes: Vec<usize> = f.iter().map(|x| ((x * n as f64) + 1e-9).floor() as usize).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x5917]));
    let take = |from: usize, len: usize| {
        let mut v = perm[from..from + len].to_vec();
        v.sort_unstable();
        v
    };
    let train = take(0, sizes[0]);
    let validation = take(sizes[0], sizes[1]);
    let test = take(sizes[0] + sizes[1], sizes[2]);
    Ok(SplitSpec {
        train,
        validation,
        test,
        seed,
    })
}

/// Per-column affine rescaling to zero mean and unit variance, fitted on a
/// subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn fit(values: &Array2<f32>, rows: &[usize]) -> Self {
        let d = values.ncols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0f64; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(values.row(r)) {
                *m += f64::from(*v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *s += (f64::from(*v) - m).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        }
    }

    pub fn apply(&self, values: &Array2<f32>) -> Array2<f32> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn dense_csv_readback() {
        let f = write_tmp("a,b\n1,0\n0,2\n1,1\n");
        let d = load_table(f.path(), TableFormat::DenseCsv, None).unwrap();
        assert_eq!((d.n_cases(), d.n_vars()), (3, 2));
        assert_eq!(d.names(), ["a", "b"]);
        assert_eq!(d.values()[[1, 1]], 2.0);
        assert!(d.binary().is_none());
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("a,b\n1,0\n0,x\n");
        match load_table(f.path(), TableFormat::DenseCsv, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let f = write_tmp("a,a\n1,0\n");
        assert!(matches!(
            load_table(f.path(), TableFormat::DenseCsv, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_file_is_parse_error() {
        let f = write_tmp("");
        for fmt in [TableFormat::DenseCsv, TableFormat::SparseTriplet] {
            assert!(matches!(load_table(f.path(), fmt, None), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn triplet_width_from_max_index() {
        let f = write_tmp("0 0 1\n3 9999 2\n");
        let d = load_table(f.path(), TableFormat::SparseTriplet, None).unwrap();
        assert_eq!(d.n_vars(), 10_000);
        assert_eq!(d.n_cases(), 4);
        assert_eq!(d.values()[[3, 9999]], 2.0);
    }

    #[test]
    fn bag_of_words_uses_vocab() {
        let v = write_tmp("apple\nbanana\ncherry\n");
        let f = write_tmp("0 1 2\n1 0 1\n");
        let d = load_table(f.path(), TableFormat::BagOfWordsVocab, Some(v.path())).unwrap();
        assert_eq!(d.names(), ["apple", "banana", "cherry"]);
        let bad = write_tmp("0 3 1\n");
        assert!(load_table(bad.path(), TableFormat::BagOfWordsVocab, Some(v.path())).is_err());
        assert!(load_table(f.path(), TableFormat::BagOfWordsVocab, None).is_err());
    }

    #[test]
    fn positive_and_median_binarization() {
        let values = ndarray::array![[0.0, 1.0, 5.0], [3.0, 2.0, 5.0], [1.0, 3.0, 5.0]];
        let d = Dataset::new(vec!["c".into(), "m".into(), "k".into()], values).unwrap();
        let pos = d.binarize(BinarizePolicy::Positive).unwrap();
        // m is all positive, k all equal: both constant once binarized
        assert_eq!(pos.names(), ["c"]);
        assert_eq!(pos.dropped(), ["m", "k"]);
        let b = pos.binary().unwrap();
        assert_eq!((0..3).map(|r| b.get(r, 0)).collect::<Vec<_>>(), [false, true, true]);
        let med = d.binarize(BinarizePolicy::Median).unwrap();
        let b = med.binary().unwrap();
        assert_eq!((0..3).map(|r| b.get(r, 1)).collect::<Vec<_>>(), [false, false, true]);
    }

    #[test]
    fn split_sizes_and_errors() {
        let f = SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        };
        let s = split(10, f, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split(10, f, 7).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10);
        let bad = SplitFractions {
            train: 0.9,
            validation: 0.2,
            test: 0.0,
        };
        assert!(split(10, bad, 7).is_err());
        let neg = SplitFractions {
            train: -0.1,
            validation: 0.2,
            test: 0.0,
        };
        assert!(split(10, neg, 7).is_err());
    }

    #[test]
    fn bit_columns_keep_tail_clear() {
        let b = BinaryColumns::from_fn(70, 2, |_, _| true);
        assert_eq!(b.count_ones(0), 70);
        assert_eq!(b.column(0)[1] & !b.tail_mask(), 0);
        let mut e = BinaryColumns::empty(70);
        assert!(e.push_column(vec![0, u64::MAX]).is_err());
        assert!(e.push_column(vec![0, 1]).is_ok());
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let v = ndarray::array![[1.0f32, 4.0], [3.0, 4.0], [5.0, 4.0]];
        let s = Standardizer::fit(&v, &[0, 1, 2]);
        let z = s.apply(&v);
        assert!((z.column(0).sum()).abs() < 1e-6);
        assert!((z.column(0).mapv(|x| x * x).sum() / 3.0 - 1.0).abs() < 1e-5);
        assert_eq!(z.column(1).to_vec(), [0.0, 0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn positive_binarization_idempotent(bits in proptest::collection::vec(proptest::bool::ANY, 24)) {
            let values = Array2::from_shape_fn((8, 3), |(r, c)| f32::from(u8::from(bits[r * 3 + c])));
            let d = Dataset::new(vec!["a".into(), "b".into(), "c".into()], values).unwrap();
            let once = d.binarize(BinarizePolicy::Positive).unwrap();
            let twice = once.binarize(BinarizePolicy::Positive).unwrap();
            proptest::prop_assert_eq!(once.binary(), twice.binary());
            proptest::prop_assert_eq!(once.names(), twice.names());
        }
    }
}
