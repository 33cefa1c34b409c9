use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use focustrack::commands::{self, BenchmarkRun};
use focustrack::config::RunConfig;
use focustrack::model::TrackerParams;
use focustrack::tracker::InitMode;
use focustrack::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "focustrack", version, about = "Attention-heatmap tracking pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render heatmaps from a directory of YOLO label files.
    GenHeatmaps {
        #[arg(long, value_name = "DIR")]
        labels: PathBuf,
    },
    /// Score predicted heatmaps against ground-truth heatmaps.
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Generate a synthetic sequence with frames, labels and proposals.
    Simulate,
    /// Train the reranking and refinement heads on exported sequences.
    Train {
        /// Sequence directory written by `simulate`; repeatable.
        #[arg(long, value_name = "DIR", required = true)]
        data: Vec<PathBuf>,
        /// Start from these parameters instead of a fresh initialisation.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Track through one sequence and render heatmaps.
    Track {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        /// Start from the ground-truth box instead of the top proposal.
        #[arg(long)]
        gt_init: bool,
        /// Skip the refinement head.
        #[arg(long)]
        no_refine: bool,
    },
    /// Compare oracle selection rules with both tracker variants.
    OracleTable {
        /// Evaluation sequence; defaults to the synthetic scene for the seed.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Use these parameters instead of training on the benchmark scenes.
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        /// Report box statistics only.
        #[arg(long)]
        no_heatmaps: bool,
    },
    /// Recall-at-k curves for confidence and rerank orderings.
    Topk {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
    },
    /// Compare every analytic gradient with central differences.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn benchmark(cfg: &RunConfig, out: &Path, data: Option<&Path>, params: Option<&Path>) -> Result<BenchmarkRun> {
    let supplied = params.map(TrackerParams::load).transpose()?;
    let trained = supplied.is_none();
    let run = commands::run_benchmark(cfg, data, supplied)?;
    if trained {
        std::fs::create_dir_all(out)?;
        run.params.save(out.join(commands::PARAMS_FILE))?;
        write(&out.join(commands::TRAIN_LOG_FILE), &commands::train_log_csv(&run.history))?;
    }
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenHeatmaps { labels } => {
            let m = commands::gen_heatmaps(&labels, out, &cfg.heatmap)?;
            println!("wrote {} heatmaps to {} (config {})", m.frames.len(), out.display(), &m.config_hash[..12]);
        }
        Command::Eval { pred, gt } => {
            let rows = commands::eval(&pred, &gt)?;
            let csv = commands::eval_csv(&rows);
            write(&out.join(commands::METRICS_FILE), &csv)?;
            print!("{csv}");
        }
        Command::Simulate => {
            let files = commands::simulate(&cfg, out)?;
            println!("wrote {} files to {}", files.len() + 1, out.display());
        }
        Command::Train { data, init, epochs, lr } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            let history = commands::train_cmd(&cfg, &data, init.as_deref(), out)?;
            for e in &history {
                println!("epoch {:>3}  loss {:.5}  samples {}  skipped {}", e.epoch, e.mean.total, e.samples, e.skipped);
            }
        }
        Command::Track { data, params, gt_init, no_refine } => {
            if gt_init {
                cfg.track.init = InitMode::Gt;
            }
            if no_refine {
                cfg.track.refine = false;
            }
            let r = commands::track_cmd(&cfg, &data, &params, out)?;
            let held = r.frames.iter().filter(|f| f.held).count();
            println!("tracked {} frames ({held} held) into {}", r.frames.len(), out.display());
        }
        Command::OracleTable { data, params, no_heatmaps } => {
            let run = benchmark(&cfg, out, data.as_deref(), params.as_deref())?;
            let table = commands::oracle_table(&cfg, &run, !no_heatmaps)?;
            write(&out.join(commands::ORACLE_FILE), &table.to_csv())?;
            print!("{}", table.to_text());
        }
        Command::Topk { data, params } => {
            let run = benchmark(&cfg, out, data.as_deref(), params.as_deref())?;
            let points = commands::topk(&cfg, &run)?;
            write(&out.join(commands::TOPK_FILE), &commands::topk_csv(&points))?;
            for p in points.iter().filter(|p| p.k == 1) {
                println!("{:<10} {:<12} {:>5}  recall@1 {:.4}", p.order, p.criterion, p.threshold, p.recall);
            }
        }
        Command::GradCheck { instances } => {
            let results = commands::grad_check(cfg.seed, instances, out)?;
            print!("{}", commands::grad_check_csv(&results));
            if let Some(bad) = results.iter().find(|r| !r.passed()) {
                return Err(Error::Numerical(format!("{} gradient off by {:.3e}", bad.name, bad.max_rel)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
