//! The stages behind the command line. Every stage reads its inputs from the
//! configuration and the output bundle, writes its artifacts atomically and
//! records them in the manifest. Reports carry no timestamps or timings, so
//! reruns with the same configuration give byte-identical files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::{save_json, write_atomic, Bundle};
use crate::config::PipelineConfig;
use crate::data::{load_labels, load_table, split, BinarizePolicy, Dataset, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::expansion::{expand, export_graph, EdgeOrigin};
use crate::interpret::{characterize_units, interpretability_score, partition_image, EmbeddingTable, InterpretScore};
use crate::nn::{evaluate, Metrics, Net, Site};
use crate::registry::{Candidate, StrategyRegistry, TrainContext};
use crate::rng;
use crate::skeleton::{stack, Hierarchy};
use crate::synth::{FeatureKind, TopicTask};

/// A loaded table with its split and the binary view used for structure
/// learning.
pub struct Prepared {
    pub raw: Dataset,
    /// Binarized training rows; constant columns are dropped.
    pub binary: Dataset,
    pub labels: Option<Vec<usize>>,
    pub split: SplitSpec,
}

impl Prepared {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let path = cfg
            .data
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("no data file given (set data.path or pass --data)".into()))?;
        let raw = load_table(path, cfg.data.format, cfg.data.vocab.as_deref())?;
        let labels = cfg.data.labels.as_deref().map(load_labels).transpose()?;
        if let Some(l) = &labels {
            if l.len() != raw.n_cases() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} rows",
                    l.len(),
                    raw.n_cases()
                )));
            }
        }
        let split = split(raw.n_cases(), cfg.data.split, cfg.seed)?;
        if split.train.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let policy = cfg.data.binarize.unwrap_or_else(|| default_policy(&raw));
        let binary = raw.select_rows(&split.train).binarize(policy)?;
        Ok(Self {
            raw,
            binary,
            labels,
            split,
        })
    }

    /// Raw values of `names`, in that order, for every row.
    pub fn columns(&self, names: &[String]) -> Result<Array2<f32>> {
        let index: HashMap<&str, usize> = self
            .raw
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let cols = names
            .iter()
            .map(|n| {
                index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::Bundle(format!("column `{n}` is not in the data table")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(self.raw.values().select(Axis(1), &cols))
    }
}

/// `positive` for count-like tables, `median` otherwise.
pub fn default_policy(d: &Dataset) -> BinarizePolicy {
    if d.values().iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
        BinarizePolicy::Positive
    } else {
        BinarizePolicy::Median
    }
}

fn report_path(name: &str) -> String {
    format!("reports/{name}")
}

fn prepare(cfg: &PipelineConfig) -> Result<(PipelineConfig, Bundle)> {
    let cfg = cfg.clone().effective();
    cfg.validate()?;
    let bundle = Bundle::new(&cfg.out);
    Ok((cfg, bundle))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub level: usize,
    pub group_sizes: Vec<usize>,
    /// UD-test gaps of groups that stopped on the test, by group.
    pub gaps: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonReport {
    pub cases: usize,
    pub layer_sizes: Vec<usize>,
    pub dropped_columns: Vec<String>,
    pub layers: Vec<LayerSummary>,
}

pub fn cmd_skeleton(cfg: &PipelineConfig) -> Result<SkeletonReport> {
    let (cfg, bundle) = prepare(cfg)?;
    let data = Prepared::load(&cfg)?;
    let h = stack(data.binary.require_binary()?, data.binary.names(), &cfg.skeleton)?;
    let report = SkeletonReport {
        cases: h.observed.n_rows(),
        layer_sizes: h.layer_sizes(),
        dropped_columns: data.binary.dropped().to_vec(),
        layers: h
            .layers
            .iter()
            .map(|l| LayerSummary {
                level: l.level,
                group_sizes: l.groups.iter().map(|g| g.members.len()).collect(),
                gaps: l.gaps.clone(),
            })
            .collect(),
    };
    bundle.save_hierarchy(&h)?;
    save_json(&bundle.path(&report_path("skeleton.json")), &report)?;
    bundle.record(
        "skeleton",
        &[Bundle::HIERARCHY.into(), report_path("skeleton.json")],
        &cfg,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub layer_sizes: Vec<usize>,
    pub skeleton_edges: usize,
    pub expansion_edges: usize,
    /// Edge budget per unit for each connection layer.
    pub budgets: Vec<usize>,
}

pub fn cmd_expand(cfg: &PipelineConfig) -> Result<ExpansionReport> {
    let (cfg, bundle) = prepare(cfg)?;
    let h = bundle.load_hierarchy()?;
    let core = expand(&h, &cfg.expansion)?;
    let report = ExpansionReport {
        layer_sizes: core.layer_sizes.clone(),
        skeleton_edges: core.count_origin(EdgeOrigin::Skeleton),
        expansion_edges: core.count_origin(EdgeOrigin::Expansion),
        budgets: core.layer_sizes[..core.depth() - 1]
            .iter()
            .map(|&n| cfg.expansion.budget(n))
            .collect(),
    };
    bundle.save_core(&core)?;
    export_graph(&core, &bundle.path(Bundle::GRAPH))?;
    save_json(&bundle.path(&report_path("expansion.json")), &report)?;
    bundle.record(
        "expand",
        &[Bundle::CORE.into(), Bundle::GRAPH.into(), report_path("expansion.json")],
        &cfg,
    )?;
    Ok(report)
}

/// Network inputs: the structure-learning columns, optionally standardized
/// with statistics from the training rows.
struct Inputs {
    x: Array2<f32>,
    labels: Vec<usize>,
    n_classes: usize,
    split: SplitSpec,
    names: Vec<String>,
}

fn inputs(cfg: &PipelineConfig, bundle: &Bundle) -> Result<(Prepared, Inputs)> {
    let data = Prepared::load(cfg)?;
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::Config("training needs class labels (set data.labels)".into()))?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::Validation("labels must cover at least two classes".into()));
    }
    let names = match bundle.path(Bundle::HIERARCHY).exists() {
        true => bundle.load_hierarchy()?.observed_names,
        false => data.binary.names().to_vec(),
    };
    let mut x = data.columns(&names)?;
    if cfg.data.standardize {
        x = Standardizer::fit(&x, &data.split.train).apply(&x);
    }
    let split = data.split.clone();
    Ok((
        data,
        Inputs {
            x,
            labels,
            n_classes,
            split,
            names,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub strategy: String,
    pub selected: usize,
    pub candidates: Vec<Candidate>,
}

/// Outcome of one `train` invocation.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Done(TrainSummary),
    /// Stopped at the epoch limit; rerun to continue from the checkpoint.
    Paused,
}

pub fn cmd_train(
    cfg: &PipelineConfig,
    registry: &StrategyRegistry,
    strategy: &str,
    max_epochs: Option<usize>,
) -> Result<TrainStatus> {
    let (cfg, bundle) = prepare(cfg)?;
    let strat = registry.get(strategy)?;
    let (_, inp) = inputs(&cfg, &bundle)?;
    let core = match bundle.path(Bundle::CORE).exists() {
        true => Some(bundle.load_core()?),
        false => None,
    };
    if let Some(c) = &core {
        if c.names[0] != inp.names {
            return Err(Error::Bundle("the PGM core was built over different columns".into()));
        }
    }
    let base = match strategy == "prune" && bundle.has_net("fnn-grid") {
        true => Some(bundle.load_net("fnn-grid")?),
        false => None,
    };
    let target_params = match strategy == "prune" && bundle.has_net("tse") {
        true => Some(bundle.load_net("tse")?.param_count()),
        false => None,
    };
    let ctx = TrainContext {
        x: &inp.x,
        labels: &inp.labels,
        n_classes: inp.n_classes,
        split: &inp.split,
        core: core.as_ref(),
        widths: cfg.net,
        train: &cfg.train,
        grid: &cfg.grid.points,
        base: base.as_ref(),
        target_params,
        checkpoints: Some(&bundle),
        max_epochs,
    };
    let outcome = strat.run(&ctx)?;
    if outcome.interrupted {
        return Ok(TrainStatus::Paused);
    }
    let summary = TrainSummary {
        strategy: strategy.to_string(),
        selected: outcome.selected,
        candidates: outcome.candidates,
    };
    let mut files = bundle.save_net(strategy, &outcome.net)?;
    let report = report_path(&format!("train-{strategy}.json"));
    save_json(&bundle.path(&report), &summary)?;
    files.push(report);
    files.extend(write_comparison(&bundle, registry)?);
    bundle.record(&format!("train-{strategy}"), &files, &cfg)?;
    Ok(TrainStatus::Done(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub label: String,
    /// `auc` for a single sigmoid output, `accuracy` otherwise.
    pub metric: String,
    pub validation: f64,
    pub test: Option<f64>,
    pub params: usize,
    /// Parameters relative to the selected dense network.
    pub ratio: Option<f64>,
}

/// Rebuilds the comparison table from every train report in the bundle.
fn write_comparison(bundle: &Bundle, registry: &StrategyRegistry) -> Result<Vec<String>> {
    let mut selected = Vec::new();
    for name in registry.names() {
        let p = bundle.path(&report_path(&format!("train-{name}.json")));
        if p.exists() {
            let s: TrainSummary = crate::bundle::load_json(&p)?;
            let c = s
                .candidates
                .get(s.selected)
                .cloned()
                .ok_or_else(|| Error::Bundle(format!("{} selects a missing candidate", p.display())))?;
            selected.push((name, c));
        }
    }
    let dense = selected
        .iter()
        .find(|(n, _)| *n == "fnn-grid")
        .map(|(_, c)| c.param_count);
    let rows: Vec<ComparisonRow> = selected
        .into_iter()
        .map(|(name, c)| {
            let auc = c.validation.auc.is_some();
            let pick = |m: &Metrics| {
                if auc {
                    m.auc.unwrap_or(f64::NAN)
                } else {
                    m.accuracy
                }
            };
            ComparisonRow {
                model: name.to_string(),
                label: c.label.clone(),
                metric: if auc { "auc" } else { "accuracy" }.into(),
                validation: pick(&c.validation),
                test: c.test.as_ref().map(pick),
                params: c.param_count,
                ratio: dense.map(|d| c.param_count as f64 / d as f64),
            }
        })
        .collect();
    let mut md = String::from("| model | network | metric | validation | test | params | ratio |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let fmt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {} | {} | {} |",
            r.model,
            r.label,
            r.metric,
            r.validation,
            fmt(r.test, 4),
            r.params,
            fmt(r.ratio.map(|x| 100.0 * x), 2).to_string() + if r.ratio.is_some() { "%" } else { "" }
        );
    }
    save_json(&bundle.path(&report_path("comparison.json")), &rows)?;
    write_atomic(&bundle.path(&report_path("comparison.md")), md.as_bytes())?;
    Ok(vec![report_path("comparison.json"), report_path("comparison.md")])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub label: String,
    pub test: Metrics,
}

pub fn cmd_eval(cfg: &PipelineConfig, model: &str) -> Result<EvalReport> {
    let (cfg, bundle) = prepare(cfg)?;
    let net = load_trained(&bundle, model)?;
    let (_, inp) = inputs(&cfg, &bundle)?;
    if inp.split.test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let report = EvalReport {
        model: model.to_string(),
        label: net.label.clone(),
        test: evaluate(&net, &inp.x, &inp.labels, &inp.split.test)?,
    };
    let rel = report_path(&format!("eval-{model}.json"));
    save_json(&bundle.path(&rel), &report)?;
    bundle.record(&format!("eval-{model}"), &[rel], &cfg)?;
    Ok(report)
}

fn load_trained(bundle: &Bundle, model: &str) -> Result<Net<f32>> {
    if !bundle.has_net(model) {
        return Err(Error::Config(format!(
            "no trained `{model}` network in {}; run `train {model}` first",
            bundle.root().display()
        )));
    }
    bundle.load_net(model)
}

/// The top feature group of a TSE-Net or Backbone, the last hidden layer
/// of anything else.
pub fn default_site<F>(net: &Net<F>) -> Site {
    if !net.taps.is_empty() {
        Site::Tap(0)
    } else if !net.trunk.is_empty() {
        Site::Trunk(net.trunk.len() - 1)
    } else {
        Site::Logits
    }
}

fn check_site<F>(net: &Net<F>, site: Site) -> Result<()> {
    let ok = match site {
        Site::Trunk(i) => i < net.trunk.len(),
        Site::Tap(t) => t < net.taps.len(),
        Site::Logits => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{} has no site {site:?}", net.label)))
    }
}

pub fn cmd_interpret(cfg: &PipelineConfig, model: &str) -> Result<InterpretScore> {
    let (cfg, bundle) = prepare(cfg)?;
    let emb_path = cfg
        .interpret
        .embeddings
        .as_deref()
        .ok_or_else(|| Error::Config("no embedding file given (set interpret.embeddings)".into()))?;
    let emb = EmbeddingTable::load(emb_path)?;
    let net = load_trained(&bundle, model)?;
    let (data, inp) = inputs(&cfg, &bundle)?;
    let site = cfg.interpret.site.unwrap_or_else(|| default_site(&net));
    check_site(&net, site)?;
    let rows = &inp.split.test;
    let acts = net.activations(&inp.x, rows, site)?.mapv(f64::from);
    // correlate against raw counts, not the standardized inputs
    let words = Dataset::new(inp.names.clone(), data.columns(&inp.names)?.select(Axis(0), rows))?;
    let units = characterize_units(&acts, &words, cfg.interpret.top_k)?;
    let score = interpretability_score(units, &emb)?;
    let rel = report_path(&format!("interpret-{model}.json"));
    save_json(&bundle.path(&rel), &score)?;
    bundle.record(&format!("interpret-{model}"), &[rel], &cfg)?;
    Ok(score)
}

/// Height and width of the image; unset dimensions pick the most square
/// exact factorization.
pub fn image_dims(cfg: &PipelineConfig, n: usize) -> Result<(usize, usize)> {
    let (h, w) = (cfg.viz.height, cfg.viz.width);
    if h == 0 && w == 0 {
        let h = (1..=n)
            .take_while(|k| k * k <= n)
            .filter(|&k| n.is_multiple_of(k))
            .last()
            .unwrap_or(1);
        return Ok((h, n / h));
    }
    if h * w != n {
        return Err(Error::Dimension(format!("a {h}x{w} image cannot show {n} variables")));
    }
    Ok((h, w))
}

pub fn cmd_viz(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let (cfg, bundle) = prepare(cfg)?;
    let h: Hierarchy = bundle.load_hierarchy()?;
    let dims = image_dims(&cfg, h.observed_names.len())?;
    let mut rels = Vec::new();
    for level in 1..=h.layers.len() {
        let rel = format!("images/layer-{level}.ppm");
        partition_image(&h, level, dims, &bundle.path(&rel))?;
        rels.push(rel);
    }
    bundle.record("viz", &rels, &cfg)?;
    Ok(rels.iter().map(|r| bundle.path(r)).collect())
}

/// Writes a small labelled word-count corpus with topic-clustered word
/// vectors and a configuration that runs every stage quickly.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    let task = TopicTask {
        n_classes: 3,
        n_vars: 36,
        group_size: 3,
        groups_per_topic: 2,
        topics_per_class: 2,
        topic_on: 0.85,
        topic_off: 0.1,
        group_fidelity: 0.9,
        emit_on: 0.7,
        emit_off: 0.05,
        kind: FeatureKind::Counts,
    };
    let (d, labels) = task.generate(600, seed)?;
    let mut csv = d.names().join(",");
    csv.push('\n');
    for row in d.values().rows() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    write_atomic(&dir.join("data.csv"), csv.as_bytes())?;
    let labels: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&dir.join("labels.txt"), labels.as_bytes())?;

    let mut g = rng::stream(seed, &[0xF1C5]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..task.n_topics())
        .map(|_| (0..16).map(|_| normal.sample(&mut g)).collect())
        .collect();
    let mut emb = String::new();
    for (j, name) in d.names().iter().enumerate() {
        let c = &centres[task.topic_of_group(task.group_of(j))];
        let v: Vec<String> = c
            .iter()
            .map(|x| format!("{:.6}", x + 0.5 * normal.sample(&mut g)))
            .collect();
        let _ = writeln!(emb, "{name} {}", v.join(" "));
    }
    write_atomic(&dir.join("embeddings.txt"), emb.as_bytes())?;

    let mut cfg = PipelineConfig {
        seed,
        out: dir.join("out"),
        ..PipelineConfig::default()
    };
    cfg.data.path = Some(dir.join("data.csv"));
    cfg.data.labels = Some(dir.join("labels.txt"));
    cfg.skeleton.top_threshold = 6;
    cfg.expansion.fan_in_fraction = 0.2;
    cfg.net.top = 16;
    cfg.net.skip = 4;
    cfg.train.epochs = 15;
    cfg.train.batch_size = 32;
    cfg.train.dropout_rate = 0.2;
    cfg.grid.points = crate::nn::fnn_grid(&[16, 32], 2);
    cfg.interpret.embeddings = Some(dir.join("embeddings.txt"));
    cfg.interpret.top_k = 5;
    cfg.viz.height = 6;
    cfg.viz.width = 6;
    let path = dir.join("config.json");
    save_json(&path, &cfg)?;
    Ok(path)
}
