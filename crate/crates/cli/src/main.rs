use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use satmem::envs::{generate, TaskKind};
use satmem::harness::{
    self, bench_reads, eval_matrix, gradcheck_suite, load_model, load_selector, strategy_for, train, write_run,
    BenchConfig, BenchReport, RunConfig, MODEL_CHECKPOINT, SELECTOR_CHECKPOINT,
};
use satmem::memory::EvictionStrategy;
use satmem::tensor::Scalar;

#[derive(Parser)]
#[command(name = "satmem", version, about = "Spatially-aware episodic memory transformer toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `gen`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Emit episode dumps
    Gen {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Train a model with a fixed strategy, or jointly with AMA
    Train {
        /// Extra `key=value` overrides applied after the config file
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Held-out accuracy of a trained run
    Eval {
        /// Run directory written by `train`
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        strategy: Option<EvictionStrategy>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Write the attention trace of the first held-out episode as CSV
        #[arg(long, value_name = "FILE")]
        dump_attention: Option<PathBuf>,
    },
    /// Train and evaluate every task-strategy pair plus AMA
    Matrix {
        #[arg(long)]
        no_ama: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Flat versus hierarchical read latency
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256, 512, 1024, 2048])]
        memory: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        chunk_size: usize,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
    },
}

fn load_config(global: &Global, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let outcome = train::<T>(cfg)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.tasks[0].name()));
    write_run(&dir, cfg, &outcome)?;
    for (task, acc) in &outcome.accuracy {
        println!("{task}\t{}\t{acc:.4}", outcome.strategy[task]);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_eval<T: Scalar>(
    run: &Path,
    global: &Global,
    strategy: Option<EvictionStrategy>,
    episodes: Option<usize>,
    dump: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(&run.join("config.txt"))?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    let (model, store) = load_model::<T>(&cfg, &run.join(MODEL_CHECKPOINT))?;
    let selector = if cfg.ama.enabled && strategy.is_none() {
        Some(load_selector(&cfg, &run.join(SELECTOR_CHECKPOINT))?)
    } else {
        None
    };
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    for (i, &task) in cfg.tasks.iter().enumerate() {
        let s = match strategy {
            Some(s) => s,
            None => strategy_for(&cfg, selector.as_ref().map(|(a, b)| (a, b)), task)?,
        };
        let acc = harness::evaluate(&cfg, &model, &store, task, s, episodes)?;
        println!("{task}\t{s}\t{acc:.4}");
        if let (0, Some(path)) = (i, dump) {
            let (_, trace) = harness::attention_trace(&cfg, &model, &store, task, s, 0)?;
            std::fs::write(path, trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn run_bench<T: Scalar>(
    seed: u64,
    memory: &[usize],
    chunk_size: usize,
    top_k: usize,
    repeats: usize,
) -> Result<String> {
    let mut text = format!("{}\n", BenchReport::CSV_HEADER);
    for &n in memory {
        let cfg = BenchConfig {
            memory: n,
            chunk_size,
            top_k,
            repeats,
            seed,
            ..BenchConfig::default()
        };
        text.push_str(&bench_reads::<T>(&cfg)?.csv_row());
        text.push('\n');
    }
    Ok(text)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Gen { task, count } => {
            let cfg = load_config(g, &[])?;
            let seed = g.seed.unwrap_or(cfg.seed);
            let mut text = String::new();
            for i in 0..count {
                text.push_str(&generate(task, seed + i, &cfg.env)?.dump());
            }
            // `--out` names a file here
            write_output(g.out.as_deref(), &text)?;
        }
        Command::Train { overrides } => {
            let cfg = load_config(g, &overrides)?;
            match g.precision {
                Precision::F32 => run_train::<f32>(&cfg)?,
                Precision::F64 => run_train::<f64>(&cfg)?,
            }
        }
        Command::Eval {
            run,
            strategy,
            episodes,
            dump_attention,
        } => match g.precision {
            Precision::F32 => run_eval::<f32>(&run, g, strategy, episodes, dump_attention.as_deref())?,
            Precision::F64 => run_eval::<f64>(&run, g, strategy, episodes, dump_attention.as_deref())?,
        },
        Command::Matrix { no_ama, overrides } => {
            if g.precision == Precision::F64 {
                bail!("matrix runs train in f32 only");
            }
            let cfg = load_config(g, &overrides)?;
            let (m, _) = eval_matrix(&cfg, !no_ama)?;
            print!("{}", m.to_csv());
        }
        Command::Gradcheck { seeds } => {
            if g.precision == Precision::F32 {
                // finite differences are meaningless at 32-bit; always check in f64
                eprintln!("gradcheck runs in f64");
            }
            let mut ok = true;
            println!("op,seeds,max_rel_err,checked,excluded,status");
            for c in gradcheck_suite(seeds)? {
                ok &= c.passes();
                let status = if c.passes() { "ok" } else { "FAIL" };
                println!("{},{},{:.3e},{},{},{status}", c.name, c.seeds, c.max_rel_err, c.checked, c.excluded);
            }
            return Ok(ok);
        }
        Command::Bench {
            memory,
            chunk_size,
            top_k,
            repeats,
        } => {
            let seed = g.seed.unwrap_or(0);
            let text = match g.precision {
                Precision::F32 => run_bench::<f32>(seed, &memory, chunk_size, top_k, repeats)?,
                Precision::F64 => run_bench::<f64>(seed, &memory, chunk_size, top_k, repeats)?,
            };
            print!("{text}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
