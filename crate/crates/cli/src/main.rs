//! `gcl`: generate datasets, train, embed, evaluate and inspect graphs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gcl_core::encoders::{embeddings_to_tsv, read_embeddings};
use gcl_core::evalkit::{align_to_graph, evaluate, Rows, DEFAULT_RUNS};
use gcl_core::hetgraph::{
    generate_synthetic, gromov_hyperbolicity_capped, load_dataset, save_dataset, SynthSpec, DEFAULT_HYPERBOLICITY_CAP,
};
use gcl_core::ndtensor::load_checkpoint;
use gcl_core::trainer::{model_from_checkpoint, run_training, TrainConfig, PRESETS};

#[derive(Parser, Debug)]
#[command(name = "gcl", version, about = "Geometry contrastive learning on heterogeneous graphs")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-partition dataset from a JSON spec.
    Synth {
        /// Synthetic spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed [default: seed in spec, else 0].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset; writes checkpoint, embeddings, losses and report.
    Train {
        /// key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Start from a dataset preset before applying the config file.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: Option<String>,
        /// Overrides `seed` [default: seed in config, else 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `dataset_dir`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an embeddings TSV against a labeled dataset.
    Eval {
        /// Embeddings TSV (node id, then values).
        #[arg(long)]
        embeddings: PathBuf,
        /// Dataset directory with labels and splits.
        #[arg(long)]
        dataset: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probe and k-means repetitions.
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
    },
    /// Recompute embeddings from a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the TSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print Gromov δ of every meta-path subgraph.
    Hyperbolicity {
        #[arg(long)]
        dataset: PathBuf,
        /// Largest component size to attempt.
        #[arg(long, default_value_t = DEFAULT_HYPERBOLICITY_CAP)]
        cap: usize,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { spec, out, seed } => synth(&spec, &out, seed),
        Command::Train {
            config,
            preset,
            seed,
            dataset,
            out,
        } => train(&config, preset.as_deref(), seed, dataset, out),
        Command::Eval {
            embeddings,
            dataset,
            out,
            seed,
            runs,
        } => eval(&embeddings, &dataset, out.as_deref(), seed, runs),
        Command::Embed { checkpoint, dataset, out } => embed(&checkpoint, &dataset, out.as_deref()),
        Command::Hyperbolicity { dataset, cap } => hyperbolicity(&dataset, cap),
        Command::Selftest => Ok(selftest()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut spec: SynthSpec =
        serde_json::from_str(&read(spec_path)?).with_context(|| format!("parsing {}", spec_path.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let g = generate_synthetic(&spec)?;
    save_dataset(&g, out)?;
    println!(
        "wrote {} ({} nodes, {} meta-paths)",
        out.display(),
        g.num_nodes(),
        g.num_relations()
    );
    Ok(ExitCode::SUCCESS)
}

/// Relative paths in a config file are taken relative to the file.
fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p
    }
}

fn train(
    config: &Path,
    preset: Option<&str>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let base = match preset {
        Some(name) => TrainConfig::preset(name).with_context(|| format!("unknown preset `{name}`"))?,
        None => TrainConfig::default(),
    };
    let mut cfg = base
        .apply_text(&read(config)?)
        .with_context(|| format!("parsing {}", config.display()))?;
    let dir = config.parent().unwrap_or(Path::new("."));
    cfg.dataset_dir = dataset.or(cfg.dataset_dir.map(|p| resolve(dir, p)));
    cfg.out_dir = out.or(cfg.out_dir.map(|p| resolve(dir, p)));
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let Some(data_dir) = cfg.dataset_dir.clone() else {
        bail!("no dataset: set dataset_dir in the config or pass --dataset");
    };
    let Some(out_dir) = cfg.out_dir.clone() else {
        bail!("no output directory: set out_dir in the config or pass --out");
    };
    let g = load_dataset(&data_dir)?;
    let report = run_training(&g, &cfg, &out_dir)?;
    println!(
        "trained {} epochs, best epoch {} ({:?} {:.6}); outputs in {}",
        report.epochs.len(),
        report.best_epoch,
        report.monitor,
        report.best_value,
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(embeddings: &Path, dataset: &Path, out: Option<&Path>, seed: u64, runs: usize) -> Result<ExitCode> {
    let g = load_dataset(dataset)?;
    let file = fs::File::open(embeddings).with_context(|| format!("opening {}", embeddings.display()))?;
    let table = read_embeddings(std::io::BufReader::new(file)).with_context(|| format!("reading {}", embeddings.display()))?;
    let x = align_to_graph(&table, &g)?;
    let report = evaluate(Rows::new(&x, table.dim)?, &g, runs, seed)?;
    emit(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn embed(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let g = load_dataset(dataset)?;
    let ckpt = load_checkpoint::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = model_from_checkpoint(ckpt)?;
    if model.config.feature_dim != g.feature_dim() || model.config.num_metapaths != g.num_relations() {
        bail!(
            "checkpoint expects {} features and {} meta-paths, dataset has {} and {}",
            model.config.feature_dim,
            model.config.num_metapaths,
            g.feature_dim(),
            g.num_relations()
        );
    }
    let h = model.embed(&g)?;
    let ids: Vec<String> = (0..g.num_nodes()).map(|i| g.node_label(i)).collect();
    emit(out, &embeddings_to_tsv(&ids, &h))?;
    Ok(ExitCode::SUCCESS)
}

fn hyperbolicity(dataset: &Path, cap: usize) -> Result<ExitCode> {
    let g = load_dataset(dataset)?;
    let mut failed = false;
    for m in g.metapaths() {
        match gromov_hyperbolicity_capped(m, cap) {
            Ok(h) if h.degenerate => {
                println!("{}: δ={} (largest component has {} nodes)", m.name, h.delta, h.component_size)
            }
            Ok(h) => println!("{}: δ={}", m.name, h.delta),
            Err(e) => {
                eprintln!("{}: {e}", m.name);
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn selftest() -> ExitCode {
    let outcomes = gcl_core::selftest::run_all();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
