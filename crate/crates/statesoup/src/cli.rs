//! Command-line interface: training, library construction, and the four
//! experiment runners below one binary.
//!
//! Exit codes: 0 success, 1 runtime error (one machine-parsable line on
//! stderr), 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::exp::{
    build_library, run_mixing_experiment, run_retrieval_experiment,
    run_retrieve_and_mix_experiment, run_sequential_mixing_experiment, write_mixing_csv,
    write_retrieval_csv, write_retrieve_mix_csv, write_sequential_csv, write_task_audit,
    ExperimentConfig,
};
use crate::io::{atomic_write, load_model, save_model};
use crate::mix::MixStrategy;
use crate::model::{process_sequence, zero_state};
use crate::store::{export_states_csv, load_library, save_library, StateKind};
use crate::tasks::{eval_icl_accuracy, make_sequential_corpus, sample_demonstrations, CorpusSource};
use crate::train::{metrics_to_jsonl, train, TrainConfig};

#[derive(Parser)]
#[command(name = "statesoup", version, about = "Gated-linear recurrent LM with a skill library of reusable states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model checkpoint path override.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model on ICL streams mixed with the synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training steps override.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the skill library from task demonstrations.
    BuildLibrary {
        #[command(flatten)]
        common: Common,
        /// Library file path (default <out>/library.ssoup).
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Retrieval experiment: same-task top-1 rate per task and shot count.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Library file (default <out>/library.ssoup).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Retrieval layer override (0-indexed; default mid-depth).
        #[arg(long)]
        layer: Option<usize>,
        /// State tensor to flatten: ssm | conv.
        #[arg(long)]
        kind: Option<StateKind>,
    },
    /// State-mixing experiment; with --library, the retrieve-and-mix variant.
    Mix {
        #[command(flatten)]
        common: Common,
        /// Library file; switches to the retrieve-and-mix experiment.
        #[arg(long)]
        library: Option<PathBuf>,
        /// Soup combination strategy: mean | weighted.
        #[arg(long, default_value = "mean")]
        strategy: MixStrategy,
        /// Retrieval layer override (retrieve-and-mix only).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Evaluate k-shot ICL accuracy per task.
    EvalIcl {
        #[command(flatten)]
        common: Common,
        /// Shots in the demonstration.
        #[arg(long, default_value_t = 32)]
        k: usize,
    },
    /// Sequential-chunk mixing experiment over (c1, c2, c_test) triples.
    EvalSeq {
        #[command(flatten)]
        common: Common,
    },
    /// Export flattened library states as CSV for external projection.
    ExportStates {
        #[command(flatten)]
        common: Common,
        /// Library file (default <out>/library.ssoup).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Layer to flatten (default mid-depth).
        #[arg(long)]
        layer: Option<usize>,
        /// State tensor to flatten: ssm | conv.
        #[arg(long)]
        kind: Option<StateKind>,
    },
}

impl clap::ValueEnum for StateKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[StateKind::Ssm, StateKind::Conv]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(match self {
            StateKind::Ssm => clap::builder::PossibleValue::new("ssm"),
            StateKind::Conv => clap::builder::PossibleValue::new("conv"),
        })
    }
}

impl clap::ValueEnum for MixStrategy {
    fn value_variants<'a>() -> &'a [Self] {
        &[MixStrategy::Mean, MixStrategy::Weighted, MixStrategy::ADecay]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(match self {
            MixStrategy::Mean => clap::builder::PossibleValue::new("mean"),
            MixStrategy::Weighted => clap::builder::PossibleValue::new("weighted"),
            MixStrategy::ADecay => clap::builder::PossibleValue::new("adecay"),
        })
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("cannot parse config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(model) = &common.model {
        cfg.model_path = model.clone();
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output dir {}", cfg.out_dir.display()))?;
    Ok(cfg)
}

fn library_path(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join("library.ssoup"))
}

fn load_model_at(cfg: &ExperimentConfig) -> Result<crate::model::ModelParams> {
    load_model(&cfg.model_path)
        .with_context(|| format!("cannot load model {}", cfg.model_path.display()))
}

fn corpus_for(cfg: &ExperimentConfig) -> Result<Vec<crate::tasks::ChunkTriple>> {
    let source = match &cfg.text_corpus {
        Some(path) => CorpusSource::TextFile(path),
        None => CorpusSource::Synthetic,
    };
    Ok(make_sequential_corpus(
        source,
        cfg.seed ^ 0x5345_5143,
        cfg.n_sequences,
        cfg.chunk_len,
    )?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, steps } => {
            let cfg = load_config(&common)?;
            let tasks = cfg.resolve_tasks();
            let mut tcfg = TrainConfig {
                seed: cfg.seed,
                ..TrainConfig::default()
            };
            if let Some(s) = steps {
                tcfg.steps = s;
            }
            // training corpus: same generator family as the eval corpus but
            // a disjoint seed stream, with chunks long enough that every
            // sequence covers a full training window
            let train_chunk = cfg.chunk_len.max(tcfg.seq_len.div_ceil(3));
            let corpus: Vec<Vec<u32>> = make_sequential_corpus(
                CorpusSource::Synthetic,
                cfg.seed ^ 0x7452_4149_4e43,
                cfg.n_sequences,
                train_chunk,
            )?
            .into_iter()
            .map(|t| t.concat())
            .collect();
            let model_cfg = crate::model::ModelConfig::default();
            let (model, metrics) = train(&model_cfg, &tcfg, &tasks, &corpus)?;
            save_model(&model, &cfg.model_path)?;
            atomic_write(&cfg.out_dir.join("metrics.jsonl"), metrics_to_jsonl(&metrics).as_bytes())?;
            write_task_audit(&tasks, &cfg.out_dir.join("tasks.jsonl"))?;
            println!(
                "trained {} steps, final loss {:.4}, model at {}",
                tcfg.steps,
                metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
                cfg.model_path.display()
            );
            Ok(())
        }
        Command::BuildLibrary { common, library } => {
            let cfg = load_config(&common)?;
            let model = load_model_at(&cfg)?;
            let tasks = cfg.resolve_tasks();
            let lib = build_library(&model, &tasks, &cfg)?;
            let path = library_path(&cfg, &library);
            save_library(&lib, &path)?;
            println!("library with {} entries at {}", lib.len(), path.display());
            Ok(())
        }
        Command::Retrieve { common, library, layer, kind } => {
            let mut cfg = load_config(&common)?;
            if layer.is_some() {
                cfg.retrieval_layer = layer;
            }
            if let Some(kind) = kind {
                cfg.state_kind = kind;
            }
            let model = load_model_at(&cfg)?;
            let lib = load_library(&library_path(&cfg, &library))?;
            let tasks = cfg.resolve_tasks();
            let table = run_retrieval_experiment(&model, &lib, &tasks, &cfg)?;
            let path = cfg.out_dir.join("retrieval.csv");
            write_retrieval_csv(&table, &cfg, &path)?;
            println!("retrieval rows: {} at {}", table.rows.len(), path.display());
            Ok(())
        }
        Command::Mix { common, library, strategy, layer } => {
            let mut cfg = load_config(&common)?;
            if layer.is_some() {
                cfg.retrieval_layer = layer;
            }
            let model = load_model_at(&cfg)?;
            let tasks = cfg.resolve_tasks();
            match library {
                Some(lib_path) => {
                    let lib = load_library(&lib_path)?;
                    let rows = run_retrieve_and_mix_experiment(&model, &lib, &tasks, &cfg)?;
                    let path = cfg.out_dir.join("retrieve_mix.csv");
                    write_retrieve_mix_csv(&rows, &path)?;
                    println!("retrieve+mix rows: {} at {}", rows.len(), path.display());
                }
                None => {
                    let rows = run_mixing_experiment(&model, &tasks, &cfg, strategy)?;
                    let path = cfg.out_dir.join("mixing.csv");
                    write_mixing_csv(&rows, &path)?;
                    println!("mixing rows: {} at {}", rows.len(), path.display());
                }
            }
            Ok(())
        }
        Command::EvalIcl { common, k } => {
            let cfg = load_config(&common)?;
            let model = load_model_at(&cfg)?;
            let tasks = cfg.resolve_tasks();
            let mut out = String::from("task_id,k,n_test,accuracy\n");
            for (ti, task) in tasks.iter().enumerate() {
                let mut rng = crate::exp::cell_rng(cfg.seed, "eval-icl", &[ti as u64]);
                let shots = k.min(task.len().saturating_sub(8).max(1));
                let demo = sample_demonstrations(task, shots, &mut rng, &Default::default())?;
                let zero = zero_state(&model.config)?;
                let (state, _) = process_sequence(&model, &zero, &demo.tokens, true)?;
                let exclude: std::collections::HashSet<usize> =
                    demo.example_ids.iter().copied().collect();
                let n = cfg.n_test.min(task.len() - exclude.len());
                let acc = eval_icl_accuracy(&model, &state, task, n, &mut rng, &exclude)?;
                println!("{}: k={} accuracy {:.4} over {} queries", task.task_id, shots, acc, n);
                out.push_str(&format!("{},{},{},{}\n", task.task_id, shots, n, acc));
            }
            atomic_write(&cfg.out_dir.join("eval_icl.csv"), out.as_bytes())?;
            Ok(())
        }
        Command::EvalSeq { common } => {
            let cfg = load_config(&common)?;
            let model = load_model_at(&cfg)?;
            let corpus = corpus_for(&cfg)?;
            let rows = run_sequential_mixing_experiment(&model, &corpus, &cfg)?;
            let path = cfg.out_dir.join("sequential.csv");
            write_sequential_csv(&rows, &path)?;
            for r in &rows {
                println!("{}: {:.4} ± {:.4} (n={})", r.condition, r.mean_nll, r.stderr, r.n);
            }
            println!("csv at {}", path.display());
            Ok(())
        }
        Command::ExportStates { common, library, layer, kind } => {
            let cfg = load_config(&common)?;
            let lib = load_library(&library_path(&cfg, &library))?;
            let layer = layer
                .unwrap_or_else(|| crate::store::default_retrieval_layer(&lib.config));
            let kind = kind.unwrap_or(cfg.state_kind);
            let path = cfg.out_dir.join("states.csv");
            let rows = export_states_csv(&lib, layer, kind, &path)?;
            println!("exported {} rows at {}", rows, path.display());
            Ok(())
        }
    }
}

/// Entry point used by `main` and by tests. Returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage errors, 0 for --help/--version
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
