use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dpta::harness::{
    build_stream, comparison_table, dump_embeddings, prepare, run_ablation_suite, run_prepared,
    write_run, EmbeddingSource, ExperimentConfig, Method, RunResult,
};
use dpta::model::weights::{load_checkpoint, save_checkpoint, Checkpoint};
use dpta::model::AdapterRegistry;
use dpta::prototypes::DualPrototypeStore;
use dpta::training::{check_gradients, GRAD_TOL};

#[derive(Parser)]
#[command(name = "dpta", version, about = "Class-incremental learning with per-task adapters and dual prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shortlist size.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone and save it.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run one method over the whole task stream.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run every ablation arm on one shared stream.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients.
    CheckGrads {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write test-set representations to a CSV.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        /// raw, own, or adapter:<task>
        #[arg(long, default_value = "raw")]
        source: String,
        /// Weights file from a previous run; trains afresh when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print a comparison table for result files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn load_config(common: &Common, method: Option<Method>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_result(r: &RunResult) {
    for s in &r.stages {
        println!(
            "stage {:>2}  acc {:6.2}  top-{} {:6.2}  cond {:6.2}",
            s.stage,
            100.0 * s.accuracy,
            r.k,
            100.0 * s.topk_accuracy,
            100.0 * s.conditional_accuracy
        );
    }
    println!(
        "{}: mean {:.2}  final {:.2}",
        r.method,
        100.0 * r.mean_accuracy,
        100.0 * r.final_accuracy
    );
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common, None)?;
            let p = prepare(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let ck = Checkpoint {
                backbone: p.backbone,
                adapters: AdapterRegistry::new(),
                store: DualPrototypeStore::new(),
            };
            let path = cfg.out_dir.join("backbone.txt");
            save_checkpoint(&path, &ck)?;
            if let Some(acc) = p.pretrain_accuracy {
                println!("pretraining accuracy {:.2}", 100.0 * acc);
            }
            println!("wrote {}", path.display());
        }
        Command::Run { common, method } => {
            let cfg = load_config(&common, method)?;
            let p = prepare(&cfg)?;
            let out = run_prepared(&cfg, &p)?;
            write_run(&cfg.out_dir, &out, &p.stream.manifest())?;
            print_result(&out.result);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common, None)?;
            let out = run_ablation_suite(&cfg, Some(&cfg.out_dir))?;
            print!("{}", out.table);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::CheckGrads { configs, seed } => {
            let report = check_gradients(configs, seed)?;
            println!(
                "{} configurations, {} parameter checks, max relative error {:.3e} (tolerance {:.0e})",
                report.configs,
                report.checks.len(),
                report.max_relative_error,
                GRAD_TOL
            );
            if !report.passed() {
                if let Some(w) = report.worst() {
                    println!("worst: configuration {} {}", w.config, w.param);
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpEmbeddings { common, source, weights, output } => {
            let cfg = load_config(&common, Some(Method::Dpta))?;
            let source: EmbeddingSource = source.parse()?;
            let n = match weights {
                Some(w) => {
                    let ck = load_checkpoint(&w).with_context(|| format!("loading {}", w.display()))?;
                    let stream = build_stream(&cfg)?;
                    dump_embeddings(&ck.backbone, &ck.adapters, &stream, source, &output)?
                }
                None => {
                    let p = prepare(&cfg)?;
                    let ck = run_prepared(&cfg, &p)?
                        .checkpoint
                        .context("run produced no checkpoint")?;
                    dump_embeddings(&ck.backbone, &ck.adapters, &p.stream, source, &output)?
                }
            };
            println!("wrote {n} rows to {}", output.display());
        }
        Command::Report { results } => {
            let runs = results
                .iter()
                .map(|p| load_result(p))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", comparison_table(&runs));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_result(path: &Path) -> Result<RunResult> {
    let file = if path.is_dir() { path.join("results.json") } else { path.to_path_buf() };
    let r = RunResult::load(&file).with_context(|| format!("loading {}", file.display()))?;
    r.check_aggregates()?;
    Ok(r)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<dpta::Error>())
                .map_or("other", dpta::Error::kind);
            // Library errors already embed their sources in the message.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}
