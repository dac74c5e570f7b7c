use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsenet::config::PipelineConfig;
use tsenet::data::{BinarizePolicy, TableFormat};
use tsenet::nn::Site;
use tsenet::pipeline::{self, TrainStatus};
use tsenet::registry::StrategyRegistry;

/// Worker threads for the parallel stages; unset means one per core.
const THREADS_ENV: &str = "TSENET_THREADS";

#[derive(Parser)]
#[command(name = "tsenet", version, about = "Tree skeleton expansion networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output bundle directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Data table.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// dense-csv, sparse-triplet or bag-of-words-vocab.
    #[arg(long, global = true)]
    format: Option<TableFormat>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    /// One integer class label per line.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// positive or median.
    #[arg(long, global = true)]
    binarize: Option<BinarizePolicy>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the latent tree hierarchy.
    Skeleton {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        top_threshold: Option<usize>,
        #[arg(long)]
        max_group: Option<usize>,
    },
    /// Widen the skeleton into a PGM core and export it as DOT.
    Expand {
        /// Fan-in budget as a fraction of the layer below.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        cmi_floor: Option<f64>,
    },
    /// Train one strategy: tse, backbone, fnn-grid or prune.
    Train {
        strategy: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        top_width: Option<usize>,
        #[arg(long)]
        skip_width: Option<usize>,
        /// Stop after this many epochs per network and keep a checkpoint;
        /// rerunning resumes from it.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Test-split metrics of a trained network.
    Eval { model: String },
    /// Interpretability score of a trained network's hidden units.
    Interpret {
        model: String,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        /// trunk:I, tap:I or logits.
        #[arg(long)]
        site: Option<Site>,
    },
    /// Partition images of every latent layer.
    Viz {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// List the training strategies.
    Strategies,
    /// Write a small synthetic corpus and a matching config into DIR.
    Fixture { dir: PathBuf },
}

fn load_config(g: &Global) -> tsenet::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &g.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(f) = g.format {
        cfg.data.format = f;
    }
    if let Some(v) = &g.vocab {
        cfg.data.vocab = Some(v.clone());
    }
    if let Some(l) = &g.labels {
        cfg.data.labels = Some(l.clone());
    }
    if let Some(b) = g.binarize {
        cfg.data.binarize = Some(b);
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> tsenet::Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let registry = StrategyRegistry::with_defaults();
    match cli.command {
        Command::Skeleton {
            delta,
            top_threshold,
            max_group,
        } => {
            set(&mut cfg.skeleton.delta, delta);
            set(&mut cfg.skeleton.top_threshold, top_threshold);
            set(&mut cfg.skeleton.max_group, max_group);
            let r = pipeline::cmd_skeleton(&cfg)?;
            println!("layer sizes {:?} from {} cases", r.layer_sizes, r.cases);
        }
        Command::Expand { rho, cmi_floor } => {
            set(&mut cfg.expansion.fan_in_fraction, rho);
            set(&mut cfg.expansion.cmi_floor, cmi_floor);
            let r = pipeline::cmd_expand(&cfg)?;
            println!(
                "core {:?}: {} skeleton edges, {} expansion edges",
                r.layer_sizes, r.skeleton_edges, r.expansion_edges
            );
        }
        Command::Train {
            strategy,
            epochs,
            learning_rate,
            batch_size,
            dropout,
            top_width,
            skip_width,
            max_epochs,
        } => {
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.dropout_rate, dropout);
            set(&mut cfg.net.top, top_width);
            set(&mut cfg.net.skip, skip_width);
            match pipeline::cmd_train(&cfg, &registry, &strategy, max_epochs)? {
                TrainStatus::Paused => println!("{strategy}: paused; rerun to resume from the checkpoint"),
                TrainStatus::Done(s) => {
                    let c = &s.candidates[s.selected];
                    println!(
                        "{strategy}: selected {} ({} params, validation score {:.4})",
                        c.label,
                        c.param_count,
                        c.validation.score()
                    );
                    let table = cfg.out.join("reports/comparison.md");
                    if let Ok(text) = std::fs::read_to_string(&table) {
                        print!("{text}");
                    }
                }
            }
        }
        Command::Eval { model } => {
            let r = pipeline::cmd_eval(&cfg, &model)?;
            println!("{model} ({}): {}", r.label, serde_json::to_string(&r.test)?);
        }
        Command::Interpret {
            model,
            embeddings,
            top_k,
            site,
        } => {
            if embeddings.is_some() {
                cfg.interpret.embeddings = embeddings;
            }
            set(&mut cfg.interpret.top_k, top_k);
            if site.is_some() {
                cfg.interpret.site = site;
            }
            let s = pipeline::cmd_interpret(&cfg, &model)?;
            println!("{model}: interpretability {:.4} over {} units", s.model, s.scored_units);
        }
        Command::Viz { height, width } => {
            set(&mut cfg.viz.height, height);
            set(&mut cfg.viz.width, width);
            for p in pipeline::cmd_viz(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Strategies => {
            for name in registry.names() {
                println!("{name:<10} {}", registry.get(name)?.summary());
            }
        }
        Command::Fixture { dir } => {
            let p = pipeline::write_fixture(&dir, cli.global.seed.unwrap_or(0))?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
