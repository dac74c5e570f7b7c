//! Binary latent tree models.
//!
//! A [`TreeModel`] is a rooted tree of binary variables. Observed nodes are
//! bound to columns of a [`BinaryColumns`] table; every other node is latent.
//! Inference is exact two-pass message passing with per-message rescaling,
//! so likelihoods are accumulated in the log domain without underflow.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BinaryColumns;
use crate::error::{Error, Result};
use crate::rng;

/// Two-state conditional table, `cpt[parent_state][child_state]`.
pub type Cpt = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub label: String,
    /// Data column for observed nodes, `None` for latents.
    pub column: Option<usize>,
}

impl Node {
    pub fn observed(label: impl Into<String>, column: usize) -> Self {
        Self {
            label: label.into(),
            column: Some(column),
        }
    }

    pub fn latent(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            column: None,
        }
    }

    pub fn is_observed(&self) -> bool {
        self.column.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawTree {
    nodes: Vec<Node>,
    parent: Vec<Option<usize>>,
    prior: [f64; 2],
    cpt: Vec<Cpt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct TreeModel {
    nodes: Vec<Node>,
    parent: Vec<Option<usize>>,
    prior: [f64; 2],
    /// Indexed by node; the root's entry is unused.
    cpt: Vec<Cpt>,
    root: usize,
    children: Vec<Vec<usize>>,
    /// Breadth-first from the root.
    order: Vec<usize>,
    /// Observed node ids, in node order; a case lists their states in this order.
    observed: Vec<usize>,
    obs_slot: Vec<Option<usize>>,
}

impl TryFrom<RawTree> for TreeModel {
    type Error = Error;

    fn try_from(raw: RawTree) -> Result<Self> {
        let mut m = TreeModel::new(raw.nodes, raw.parent)?;
        m.set_prior(raw.prior)?;
        if raw.cpt.len() != m.len() {
            return Err(Error::Validation("one conditional table per node expected".into()));
        }
        for (v, t) in raw.cpt.into_iter().enumerate() {
            if v != m.root {
                m.set_cpt(v, t)?;
            }
        }
        Ok(m)
    }
}

impl From<TreeModel> for RawTree {
    fn from(m: TreeModel) -> Self {
        RawTree {
            nodes: m.nodes,
            parent: m.parent,
            prior: m.prior,
            cpt: m.cpt,
        }
    }
}

const UNIFORM: Cpt = [[0.5, 0.5], [0.5, 0.5]];

impl TreeModel {
    /// A model with uniform parameters. `parent` must describe a single
    /// rooted tree.
    pub fn new(nodes: Vec<Node>, parent: Vec<Option<usize>>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || parent.len() != n {
            return Err(Error::Validation("tree needs one parent entry per node".into()));
        }
        let roots: Vec<usize> = (0..n).filter(|&v| parent[v].is_none()).collect();
        let [root] = roots[..] else {
            return Err(Error::Validation(format!(
                "tree must have exactly one root, found {}",
                roots.len()
            )));
        };
        let mut children = vec![Vec::new(); n];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == v {
                    return Err(Error::Validation(format!("node {v} has invalid parent {p}")));
                }
                children[p].push(v);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            queue.extend(children[v].iter().copied());
        }
        if order.len() != n {
            return Err(Error::Validation("edges do not form a connected acyclic tree".into()));
        }
        let observed: Vec<usize> = (0..n).filter(|&v| nodes[v].is_observed()).collect();
        let mut obs_slot = vec![None; n];
        for (slot, &v) in observed.iter().enumerate() {
            obs_slot[v] = Some(slot);
        }
        Ok(Self {
            nodes,
            parent,
            prior: [0.5, 0.5],
            cpt: vec![UNIFORM; n],
            root,
            children,
            order,
            observed,
            obs_slot,
        })
    }

    /// One latent root with the given observed columns as children.
    pub fn latent_class(latent_label: &str, columns: &[usize], labels: &[String]) -> Result<Self> {
        let mut nodes = vec![Node::latent(latent_label)];
        let mut parent = vec![None];
        for (&c, l) in columns.iter().zip(labels) {
            nodes.push(Node::observed(l.clone(), c));
            parent.push(Some(0));
        }
        Self::new(nodes, parent)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn latents(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| !self.nodes[v].is_observed()).collect()
    }

    pub fn prior(&self) -> [f64; 2] {
        self.prior
    }

    pub fn cpt(&self, v: usize) -> &Cpt {
        &self.cpt[v]
    }

    pub fn set_prior(&mut self, p: [f64; 2]) -> Result<()> {
        check_dist(&p)?;
        self.prior = p;
        Ok(())
    }

    pub fn set_cpt(&mut self, v: usize, t: Cpt) -> Result<()> {
        if v == self.root {
            return Err(Error::Validation(
                "the root has a prior, not a conditional table".into(),
            ));
        }
        check_dist(&t[0])?;
        check_dist(&t[1])?;
        self.cpt[v] = t;
        Ok(())
    }

    /// Free parameters: one for the root, two per conditional table.
    pub fn free_params(&self) -> usize {
        1 + 2 * (self.len() - 1)
    }

    fn check_data(&self, data: &BinaryColumns) -> Result<()> {
        for &v in &self.observed {
            let c = self.nodes[v].column.expect("observed");
            if c >= data.n_cols() {
                return Err(Error::Validation(format!(
                    "observed node `{}` maps to column {c}, data has {}",
                    self.nodes[v].label,
                    data.n_cols()
                )));
            }
        }
        Ok(())
    }

    fn columns(&self) -> Vec<usize> {
        self.observed
            .iter()
            .map(|&v| self.nodes[v].column.expect("observed"))
            .collect()
    }

    /// `Σ_cases ln P(x_case)`.
    pub fn log_likelihood(&self, data: &BinaryColumns) -> Result<f64> {
        self.check_data(data)?;
        let patterns = Patterns::from_columns(data, &self.columns());
        Ok(self.expectation(&patterns, false).0)
    }

    pub fn bic(&self, data: &BinaryColumns) -> Result<ScoreReport> {
        Ok(ScoreReport::new(
            self.log_likelihood(data)?,
            self.free_params(),
            data.n_rows(),
        ))
    }

    /// `P(h | x)` for every latent `h`, for one case given as observed
    /// states in [`TreeModel::observed`] order.
    pub fn posterior_marginals(&self, case: &[u8]) -> Result<Vec<(usize, [f64; 2])>> {
        if case.len() != self.observed.len() {
            return Err(Error::Dimension(format!(
                "case has {} states, model observes {}",
                case.len(),
                self.observed.len()
            )));
        }
        let mut ws = Workspace::new(self.len());
        self.upward(case, &mut ws);
        self.downward(&mut ws);
        Ok(self.latents().into_iter().map(|v| (v, ws.posterior(v))).collect())
    }

    /// MAP state of each requested latent for every row of `data`; a
    /// posterior of exactly one half completes to state 0.
    pub fn map_completion(&self, data: &BinaryColumns, latents: &[usize]) -> Result<BinaryColumns> {
        self.check_data(data)?;
        if let Some(&v) = latents
            .iter()
            .find(|&&v| v >= self.len() || self.nodes[v].is_observed())
        {
            return Err(Error::Validation(format!("node {v} is not a latent of this model")));
        }
        let patterns = Patterns::from_columns(data, &self.columns());
        let states: Vec<Vec<bool>> = patterns
            .cases()
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut ws = Workspace::new(self.len());
                chunk
                    .iter()
                    .map(|case| {
                        self.upward(case, &mut ws);
                        self.downward(&mut ws);
                        latents.iter().map(|&v| ws.posterior(v)[1] > 0.5).collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(BinaryColumns::from_fn(data.n_rows(), latents.len(), |r, k| {
            states[patterns.row_pattern[r]][k]
        }))
    }

    /// Upward pass. Leaves `ws.lambda[v]` proportional to P(evidence below v | v)
    /// and returns `ln P(case)`.
    fn upward(&self, case: &[u8], ws: &mut Workspace) -> f64 {
        ws.case.clear();
        ws.case.extend_from_slice(case);
        let mut log_scale = 0.0;
        let mut scale = 1.0f64;
        for &v in self.order.iter().rev() {
            let mut lam = match self.obs_slot[v] {
                Some(s) if case[s] == 0 => [1.0, 0.0],
                Some(_) => [0.0, 1.0],
                None => [1.0, 1.0],
            };
            for &c in &self.children[v] {
                lam[0] *= ws.msg[c][0];
                lam[1] *= ws.msg[c][1];
            }
            ws.lambda[v] = lam;
            if v != self.root {
                let t = &self.cpt[v];
                let mut m = [t[0][0] * lam[0] + t[0][1] * lam[1], t[1][0] * lam[0] + t[1][1] * lam[1]];
                let s = m[0].max(m[1]);
                if s > 0.0 {
                    m[0] /= s;
                    m[1] /= s;
                    // one log per case; fold the running product before it underflows
                    scale *= s;
                    if scale < 1e-280 {
                        log_scale += scale.ln();
                        scale = 1.0;
                    }
                } else {
                    log_scale = f64::NEG_INFINITY;
                }
                ws.msg[v] = m;
            }
        }
        let r = self.root;
        let p = self.prior[0] * ws.lambda[r][0] + self.prior[1] * ws.lambda[r][1];
        p.ln() + scale.ln() + log_scale
    }

    /// Downward pass after [`Self::upward`]. Fills `ws.alpha[v]` proportional
    /// to P(v, evidence outside the subtree of v) and `ws.outside[c]`, the
    /// parent-side factor of the edge into `c`.
    fn downward(&self, ws: &mut Workspace) {
        ws.alpha[self.root] = self.prior;
        for &v in &self.order {
            let ch = &self.children[v];
            if ch.is_empty() {
                continue;
            }
            let ev = self.evidence_of(v, ws);
            let base = [ws.alpha[v][0] * ev[0], ws.alpha[v][1] * ev[1]];
            // prefix/suffix products of sibling messages
            ws.prefix.clear();
            let mut acc = [1.0, 1.0];
            for &c in ch {
                ws.prefix.push(acc);
                acc = [acc[0] * ws.msg[c][0], acc[1] * ws.msg[c][1]];
            }
            let mut suffix = [1.0, 1.0];
            for (i, &c) in ch.iter().enumerate().rev() {
                if self.is_leaf_evidence(c) {
                    // nothing downstream needs the outside factor of an observed leaf
                    suffix = [suffix[0] * ws.msg[c][0], suffix[1] * ws.msg[c][1]];
                    continue;
                }
                let pre = ws.prefix[i];
                let mut out = [base[0] * pre[0] * suffix[0], base[1] * pre[1] * suffix[1]];
                let s = out[0] + out[1];
                if s > 0.0 {
                    out[0] /= s;
                    out[1] /= s;
                }
                ws.outside[c] = out;
                let t = &self.cpt[c];
                let mut a = [out[0] * t[0][0] + out[1] * t[1][0], out[0] * t[0][1] + out[1] * t[1][1]];
                let s = a[0] + a[1];
                if s > 0.0 {
                    a[0] /= s;
                    a[1] /= s;
                }
                ws.alpha[c] = a;
                suffix = [suffix[0] * ws.msg[c][0], suffix[1] * ws.msg[c][1]];
            }
        }
    }

    fn is_leaf_evidence(&self, v: usize) -> bool {
        self.obs_slot[v].is_some() && self.children[v].is_empty()
    }

    fn evidence_of(&self, v: usize, ws: &Workspace) -> [f64; 2] {
        match self.obs_slot[v] {
            Some(s) => {
                if ws.case_state(s) == 0 {
                    [1.0, 0.0]
                } else {
                    [0.0, 1.0]
                }
            }
            None => [1.0, 1.0],
        }
    }

    /// E-step over all patterns. Returns the log-likelihood and, when
    /// requested, expected counts: `root[s]` and `edge[c][p][x]`.
    fn expectation(&self, patterns: &Patterns, with_stats: bool) -> (f64, Option<Stats>) {
        let cases: Vec<(&[u8], f64)> = patterns.cases().zip(patterns.weights.iter().copied()).collect();
        let work = |chunk: &[(&[u8], f64)]| {
            let mut ws = Workspace::new(self.len());
            let mut ll = 0.0;
            let mut stats = with_stats.then(|| Stats::zeros(self.len()));
            for &(case, w) in chunk {
                ll += w * self.upward(case, &mut ws);
                if let Some(st) = stats.as_mut() {
                    self.downward(&mut ws);
                    let post = ws.posterior(self.root);
                    st.root[0] += w * post[0];
                    st.root[1] += w * post[1];
                    for v in 0..self.len() {
                        let Some(p) = self.parent[v] else {
                            continue;
                        };
                        if self.is_leaf_evidence(v) {
                            // the leaf's state is known, so its edge posterior is the parent's
                            let x = ws.case_state(self.obs_slot[v].expect("observed")) as usize;
                            let post = ws.posterior(p);
                            st.edge[v][0][x] += w * post[0];
                            st.edge[v][1][x] += w * post[1];
                            continue;
                        }
                        let out = ws.outside[v];
                        let lam = ws.lambda[v];
                        let t = &self.cpt[v];
                        let mut pair = [
                            [out[0] * t[0][0] * lam[0], out[0] * t[0][1] * lam[1]],
                            [out[1] * t[1][0] * lam[0], out[1] * t[1][1] * lam[1]],
                        ];
                        let s: f64 = pair.iter().flatten().sum();
                        if s > 0.0 {
                            for row in &mut pair {
                                row[0] *= w / s;
                                row[1] *= w / s;
                            }
                            for (e, row) in st.edge[v].iter_mut().zip(&pair) {
                                e[0] += row[0];
                                e[1] += row[1];
                            }
                        }
                    }
                }
            }
            (ll, stats)
        };
        // small E-steps are dominated by scheduling, so they stay on this thread
        let partials: Vec<(f64, Option<Stats>)> = if cases.len() <= CHUNK || rayon::current_num_threads() == 1 {
            cases.chunks(CHUNK).map(work).collect()
        } else {
            cases.par_chunks(CHUNK).map(work).collect()
        };
        // chunk order is fixed, so the reduction is independent of scheduling
        let mut ll = 0.0;
        let mut total: Option<Stats> = with_stats.then(|| Stats::zeros(self.len()));
        for (l, st) in partials {
            ll += l;
            if let (Some(t), Some(s)) = (total.as_mut(), st) {
                t.add(&s);
            }
        }
        (ll, total)
    }

    fn maximize(&mut self, stats: &Stats, smoothing: f64) {
        let a = smoothing;
        let n = stats.root[0] + stats.root[1];
        self.prior = [(stats.root[0] + a) / (n + 2.0 * a), (stats.root[1] + a) / (n + 2.0 * a)];
        for v in 0..self.len() {
            if v == self.root {
                continue;
            }
            for p in 0..2 {
                let c = stats.edge[v][p];
                let np = c[0] + c[1];
                if np + 2.0 * a > 0.0 {
                    self.cpt[v][p] = [(c[0] + a) / (np + 2.0 * a), (c[1] + a) / (np + 2.0 * a)];
                }
            }
        }
    }

    /// `α Σ ln θ` over every table entry: the log density of the symmetric
    /// Dirichlet prior whose MAP estimate is Laplace smoothing with pseudo-count α.
    pub fn log_prior(&self, smoothing: f64) -> f64 {
        if smoothing == 0.0 {
            return 0.0;
        }
        let mut s = self.prior.iter().map(|p| p.ln()).sum::<f64>();
        for v in 0..self.len() {
            if v != self.root {
                s += self.cpt[v].iter().flatten().map(|p| p.ln()).sum::<f64>();
            }
        }
        smoothing * s
    }

    /// Swaps the two states of latent `v`; the represented distribution over
    /// observed nodes is unchanged.
    pub fn flip_latent(&mut self, v: usize) {
        if v == self.root {
            self.prior.swap(0, 1);
        } else {
            for row in &mut self.cpt[v] {
                row.swap(0, 1);
            }
        }
        for &c in &self.children[v] {
            self.cpt[c].swap(0, 1);
        }
    }

    /// Orients every latent so that state 1 makes state 1 of its first child
    /// more likely.
    pub fn canonicalize(&mut self) {
        for v in self.latents() {
            if let Some(&c) = self.children[v].first() {
                if self.cpt[c][1][1] < self.cpt[c][0][1] {
                    self.flip_latent(v);
                }
            }
        }
    }

    fn has_latents(&self) -> bool {
        self.observed.len() < self.len()
    }

    /// Seeded starting point: observed children start near their empirical
    /// marginal, latents near uniform, each entry perturbed by up to ±0.1.
    fn randomize(&mut self, patterns: &Patterns, rng: &mut impl Rng) {
        let marg = patterns.marginals();
        let jitter = |rng: &mut dyn rand::RngCore, centre: f64| (centre + rng.gen_range(-0.1..=0.1)).clamp(0.02, 0.98);
        let root_centre = match self.obs_slot[self.root] {
            Some(s) => marg[s],
            None => 0.5,
        };
        let p1 = jitter(rng, root_centre);
        self.prior = [1.0 - p1, p1];
        for v in self.order.clone() {
            if v == self.root {
                continue;
            }
            let centre = match self.obs_slot[v] {
                Some(s) => marg[s],
                None => 0.5,
            };
            for p in 0..2 {
                let q = jitter(rng, centre);
                self.cpt[v][p] = [1.0 - q, q];
            }
        }
    }
}

fn check_dist(p: &[f64; 2]) -> Result<()> {
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("{p:?} is not a probability distribution")));
    }
    Ok(())
}

const CHUNK: usize = 256;

struct Workspace {
    lambda: Vec<[f64; 2]>,
    msg: Vec<[f64; 2]>,
    alpha: Vec<[f64; 2]>,
    outside: Vec<[f64; 2]>,
    prefix: Vec<[f64; 2]>,
    case: Vec<u8>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            lambda: vec![[1.0; 2]; n],
            msg: vec![[1.0; 2]; n],
            alpha: vec![[1.0; 2]; n],
            outside: vec![[1.0; 2]; n],
            prefix: Vec::new(),
            case: Vec::new(),
        }
    }

    fn case_state(&self, slot: usize) -> u8 {
        self.case[slot]
    }

    fn posterior(&self, v: usize) -> [f64; 2] {
        let p = [
            self.alpha[v][0] * self.lambda[v][0],
            self.alpha[v][1] * self.lambda[v][1],
        ];
        let s = p[0] + p[1];
        [p[0] / s, p[1] / s]
    }
}

#[derive(Clone)]
struct Stats {
    root: [f64; 2],
    edge: Vec<Cpt>,
}

impl Stats {
    fn zeros(n: usize) -> Self {
        Self {
            root: [0.0; 2],
            edge: vec![[[0.0; 2]; 2]; n],
        }
    }

    fn add(&mut self, o: &Stats) {
        self.root[0] += o.root[0];
        self.root[1] += o.root[1];
        for (a, b) in self.edge.iter_mut().zip(&o.edge) {
            for p in 0..2 {
                a[p][0] += b[p][0];
                a[p][1] += b[p][1];
            }
        }
    }
}

/// Distinct observed-state patterns with multiplicities, in order of first
/// appearance.
struct Patterns {
    width: usize,
    states: Vec<u8>,
    weights: Vec<f64>,
    row_pattern: Vec<usize>,
}

impl Patterns {
    fn from_columns(data: &BinaryColumns, columns: &[usize]) -> Self {
        let width = columns.len();
        if width <= 64 {
            return Self::packed(data, columns);
        }
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut weights = Vec::new();
        let mut row_pattern = Vec::with_capacity(data.n_rows());
        for r in 0..data.n_rows() {
            let key = data.row_states(r, columns);
            let next = weights.len();
            let id = *index.entry(key.clone()).or_insert_with(|| {
                states.extend_from_slice(&key);
                next
            });
            if id == next {
                weights.push(0.0);
            }
            weights[id] += 1.0;
            row_pattern.push(id);
        }
        Self {
            width,
            states,
            weights,
            row_pattern,
        }
    }

    /// Same result as the generic path, with each row packed into one word.
    fn packed(data: &BinaryColumns, columns: &[usize]) -> Self {
        let width = columns.len();
        let n = data.n_rows();
        let mut codes = vec![0u64; n];
        for (slot, &c) in columns.iter().enumerate() {
            for (w, &word) in data.column(c).iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let r = w * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    if r < n {
                        codes[r] |= 1 << slot;
                    }
                }
            }
        }
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut row_pattern = Vec::with_capacity(n);
        for &code in &codes {
            let id = *index.entry(code).or_insert_with(|| {
                states.extend((0..width).map(|s| (code >> s & 1) as u8));
                weights.push(0.0);
                weights.len() - 1
            });
            weights[id] += 1.0;
            row_pattern.push(id);
        }
        Self {
            width,
            states,
            weights,
            row_pattern,
        }
    }

    fn cases(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.weights.len()).map(move |i| &self.states[i * self.width..(i + 1) * self.width])
    }

    fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for (case, w) in self.cases().zip(&self.weights) {
            for (acc, &s) in m.iter_mut().zip(case) {
                *acc += w * f64::from(s);
            }
        }
        let n = self.total().max(1.0);
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub loglik: f64,
    pub d: usize,
    pub n: usize,
    pub bic: f64,
}

impl ScoreReport {
    pub fn new(loglik: f64, d: usize, n: usize) -> Self {
        let penalty = if n == 0 { 0.0 } else { d as f64 / 2.0 * (n as f64).ln() };
        Self {
            loglik,
            d,
            n,
            bic: loglik - penalty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the relative log-likelihood change falls below this.
    pub tol: f64,
    /// Laplace pseudo-count added to every table cell.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iter: 100,
            tol: 1e-4,
            smoothing: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: TreeModel,
    pub loglik: f64,
    /// Per restart: log-likelihood of the parameters at the start of each iteration.
    pub traces: Vec<Vec<f64>>,
    /// Per restart: log-likelihood plus log prior, the quantity EM with
    /// smoothing ascends.
    pub objective_traces: Vec<Vec<f64>>,
}

/// EM from `restarts` seeded random starts; returns the best restart,
/// canonically oriented. A model without latents is fitted in closed form.
pub fn em_fit(model: &TreeModel, data: &BinaryColumns, cfg: &EmConfig) -> Result<EmFit> {
    model.check_data(data)?;
    let patterns = Patterns::from_columns(data, &model.columns());
    if !model.has_latents() {
        let mut m = model.clone();
        let (_, stats) = m.expectation(&patterns, true);
        m.maximize(&stats.expect("requested"), cfg.smoothing);
        let (ll, _) = m.expectation(&patterns, false);
        return Ok(EmFit {
            model: m,
            loglik: ll,
            traces: vec![vec![ll]],
            objective_traces: vec![vec![ll + model.log_prior(cfg.smoothing)]],
        });
    }
    let runs: Vec<(TreeModel, f64, Vec<f64>, Vec<f64>)> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut m = model.clone();
            m.randomize(&patterns, &mut rng::stream(cfg.seed, &[0xE3, r as u64]));
            run_em(m, &patterns, cfg)
        })
        .collect();
    let mut traces = Vec::new();
    let mut objective_traces = Vec::new();
    let mut best: Option<(TreeModel, f64)> = None;
    for (m, ll, t, o) in runs {
        traces.push(t);
        objective_traces.push(o);
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((m, ll));
        }
    }
    let (mut m, ll) = best.expect("at least one restart");
    m.canonicalize();
    Ok(EmFit {
        model: m,
        loglik: ll,
        traces,
        objective_traces,
    })
}

/// EM starting from the parameters already in `model` (single run).
pub fn em_refine(model: &TreeModel, data: &BinaryColumns, cfg: &EmConfig) -> Result<EmFit> {
    model.check_data(data)?;
    let patterns = Patterns::from_columns(data, &model.columns());
    let (mut m, ll, t, o) = run_em(model.clone(), &patterns, cfg);
    m.canonicalize();
    Ok(EmFit {
        model: m,
        loglik: ll,
        traces: vec![t],
        objective_traces: vec![o],
    })
}

fn run_em(mut m: TreeModel, patterns: &Patterns, cfg: &EmConfig) -> (TreeModel, f64, Vec<f64>, Vec<f64>) {
    let mut trace = Vec::new();
    let mut objective = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        let (ll, stats) = m.expectation(patterns, true);
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tol);
        trace.push(ll);
        objective.push(ll + m.log_prior(cfg.smoothing));
        if converged {
            return (m, ll, trace, objective);
        }
        m.maximize(&stats.expect("requested"), cfg.smoothing);
    }
    let (ll, _) = m.expectation(patterns, false);
    trace.push(ll);
    objective.push(ll + m.log_prior(cfg.smoothing));
    (m, ll, trace, objective)
}
