//! Trainable architectures, looked up by name at run time.
//!
//! Each [`TrainStrategy`] builds its networks from a [`TrainContext`], trains
//! them with the shared loop in [`crate::nn`] and reports every candidate it
//! tried together with the one it selects.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::expansion::PgmCore;
use crate::nn::{
    build_backbone, build_fnn, build_tse_net, evaluate, magnitude_prune, resume, FeatureWidths, GridPoint, Metrics,
    Net, TrainConfig, TrainReport, TrainState,
};

/// Where a strategy may park and pick up partially trained state.
pub trait Checkpointer {
    fn load(&self, key: &str) -> Result<Option<TrainState<f32>>>;
    fn save(&self, key: &str, state: &TrainState<f32>) -> Result<()>;
    fn clear(&self, key: &str) -> Result<()>;
}

impl Checkpointer for crate::bundle::Bundle {
    fn load(&self, key: &str) -> Result<Option<TrainState<f32>>> {
        self.load_checkpoint(key)
    }

    fn save(&self, key: &str, state: &TrainState<f32>) -> Result<()> {
        self.save_checkpoint(key, state)
    }

    fn clear(&self, key: &str) -> Result<()> {
        self.clear_checkpoint(key)
    }
}

pub struct TrainContext<'a> {
    pub x: &'a Array2<f32>,
    pub labels: &'a [usize],
    pub n_classes: usize,
    pub split: &'a SplitSpec,
    pub core: Option<&'a PgmCore>,
    pub widths: FeatureWidths,
    pub train: &'a TrainConfig,
    pub grid: &'a [GridPoint],
    /// Dense network to prune.
    pub base: Option<&'a Net<f32>>,
    /// Parameter count the pruned network must hit.
    pub target_params: Option<usize>,
    pub checkpoints: Option<&'a dyn Checkpointer>,
    /// Stop after this many epochs per network, leaving a checkpoint behind.
    pub max_epochs: Option<usize>,
}

impl TrainContext<'_> {
    fn core(&self) -> Result<&PgmCore> {
        self.core
            .ok_or_else(|| Error::Config("this strategy needs a PGM core; run `expand` first".into()))
    }

    fn head(&self) -> crate::nn::Head {
        self.train.head_for(self.n_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub param_count: usize,
    pub validation: Metrics,
    pub test: Option<Metrics>,
    pub report: TrainReport,
}

pub struct TrainOutcome {
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    /// Best-validation weights of the selected candidate.
    pub net: Net<f32>,
    /// True when some network stopped at `max_epochs` before finishing.
    pub interrupted: bool,
}

pub trait TrainStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn run(&self, ctx: &TrainContext) -> Result<TrainOutcome>;
}

/// Trains `net` to completion, or for `ctx.max_epochs` more epochs, under
/// checkpoint `key`. Returns the best snapshot, its report and whether the
/// run finished.
fn fit(ctx: &TrainContext, key: &str, net: Net<f32>) -> Result<(Net<f32>, TrainReport, bool)> {
    let mut state = match ctx.checkpoints.map(|c| c.load(key)).transpose()?.flatten() {
        Some(s) => {
            if s.net.param_count() != net.param_count() || s.net.label != net.label {
                return Err(Error::Bundle(format!(
                    "checkpoint {key} does not match the network being trained"
                )));
            }
            log::info!("{key}: resuming after {} epochs", s.epochs_done());
            s
        }
        None => TrainState::start(net, ctx.x, ctx.labels, ctx.split)?,
    };
    resume(&mut state, ctx.x, ctx.labels, ctx.split, ctx.train, ctx.max_epochs)?;
    let done = state.finished(ctx.train);
    if let Some(c) = ctx.checkpoints {
        if done {
            c.clear(key)?;
        } else {
            c.save(key, &state)?;
        }
    }
    Ok((state.best, state.report, done))
}

fn candidate(ctx: &TrainContext, net: &Net<f32>, report: TrainReport) -> Result<Candidate> {
    let validation = evaluate(net, ctx.x, ctx.labels, &ctx.split.validation)?;
    let test = if ctx.split.test.is_empty() {
        None
    } else {
        Some(evaluate(net, ctx.x, ctx.labels, &ctx.split.test)?)
    };
    Ok(Candidate {
        label: net.label.clone(),
        param_count: net.param_count(),
        validation,
        test,
        report,
    })
}

fn single(ctx: &TrainContext, net: Net<f32>) -> Result<TrainOutcome> {
    let key = net.label.clone();
    let (best, report, done) = fit(ctx, &key, net)?;
    Ok(TrainOutcome {
        candidates: vec![candidate(ctx, &best, report)?],
        selected: 0,
        net: best,
        interrupted: !done,
    })
}

struct Tse;

impl TrainStrategy for Tse {
    fn name(&self) -> &'static str {
        "tse"
    }

    fn summary(&self) -> &'static str {
        "sparse core with a dense top feature group and one skip group per lower layer"
    }

    fn run(&self, ctx: &TrainContext) -> Result<TrainOutcome> {
        let net = build_tse_net(ctx.core()?, ctx.widths, ctx.n_classes, ctx.head(), ctx.train.seed)?;
        single(ctx, net)
    }
}

struct Backbone;

impl TrainStrategy for Backbone {
    fn name(&self) -> &'static str {
        "backbone"
    }

    fn summary(&self) -> &'static str {
        "sparse core with a dense top feature group, no skip groups"
    }

    fn run(&self, ctx: &TrainContext) -> Result<TrainOutcome> {
        let net = build_backbone(ctx.core()?, ctx.widths, ctx.n_classes, ctx.head(), ctx.train.seed)?;
        single(ctx, net)
    }
}

struct FnnGrid;

impl TrainStrategy for FnnGrid {
    fn name(&self) -> &'static str {
        "fnn-grid"
    }

    fn summary(&self) -> &'static str {
        "dense networks over the configured grid, best validation score wins"
    }

    fn run(&self, ctx: &TrainContext) -> Result<TrainOutcome> {
        if ctx.grid.is_empty() {
            return Err(Error::Config("the FNN grid is empty".into()));
        }
        let in_dim = ctx.x.ncols();
        let mut candidates = Vec::with_capacity(ctx.grid.len());
        let mut best: Option<(usize, Net<f32>)> = None;
        let mut interrupted = false;
        for &point in ctx.grid {
            let net = build_fnn(point, in_dim, ctx.n_classes, ctx.head(), ctx.train.seed)?;
            let (trained, report, done) = fit(ctx, &point.label(), net)?;
            interrupted |= !done;
            let c = candidate(ctx, &trained, report)?;
            log::info!(
                "{}: validation score {:.4}, {} params",
                c.label,
                c.validation.score(),
                c.param_count
            );
            // higher score wins, then fewer parameters, then grid order
            let wins = best.as_ref().is_none_or(|(i, _)| {
                let b: &Candidate = &candidates[*i];
                c.validation.score() > b.validation.score()
                    || (c.validation.score() == b.validation.score() && c.param_count < b.param_count)
            });
            if wins {
                best = Some((candidates.len(), trained));
            }
            candidates.push(c);
        }
        let (selected, net) = best.expect("grid is non-empty");
        Ok(TrainOutcome {
            candidates,
            selected,
            net,
            interrupted,
        })
    }
}

struct Prune;

impl TrainStrategy for Prune {
    fn name(&self) -> &'static str {
        "prune"
    }

    fn summary(&self) -> &'static str {
        "magnitude-prunes the selected dense network to the TSE-Net parameter count, then retrains"
    }

    fn run(&self, ctx: &TrainContext) -> Result<TrainOutcome> {
        let base = ctx
            .base
            .ok_or_else(|| Error::Config("pruning needs a trained dense network; run `train fnn-grid` first".into()))?;
        let target = ctx
            .target_params
            .ok_or_else(|| Error::Config("pruning needs a target count; run `train tse` first".into()))?;
        single(ctx, magnitude_prune(base, target)?)
    }
}

/// Name-indexed strategies.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn TrainStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    /// `tse`, `backbone`, `fnn-grid` and `prune`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Tse));
        r.register(Box::new(Backbone));
        r.register(Box::new(FnnGrid));
        r.register(Box::new(Prune));
        r
    }

    /// Adds `s`, replacing any strategy of the same name.
    pub fn register(&mut self, s: Box<dyn TrainStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainStrategy> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown strategy `{name}`; known: {}", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}
