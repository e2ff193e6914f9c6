use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use freehand::evaluation::EvalConfig;
use freehand::harness::{self, Dataset, ExperimentPlan, WORKERS_ENV};
use freehand::phantom::PhantomConfig;
use freehand::training::RunConfig;
use freehand::Result;

#[derive(Parser)]
#[command(name = "freehand", version, about = "Synthetic freehand reconstruction experiments")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom dataset with its split manifest.
    GenData {
        /// Phantom configuration JSON; defaults to the desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one run configuration and evaluate it on the test split.
    Train {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides the configuration's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluation settings JSON (pixel stride, voxel size).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Main-task models over the eight variance-reduction modes.
    VarianceSweep {
        /// Experiment plan JSON.
        #[arg(long)]
        config: PathBuf,
        /// Master seed; replaces the plan's seed list with derived seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Window length M for every cell.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// No-branch vs 3-class vs 6-class grid over M values and seeds.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Plot-ready CSVs from run directories.
    PlotData {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn load_plan(path: &Path, seed: Option<u64>) -> Result<ExperimentPlan> {
    let plan = ExperimentPlan::load(path)?;
    Ok(match seed {
        Some(s) => plan.with_master_seed(s),
        None => plan,
    })
}

/// Returns whether every requested cell completed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, seed, out, force } => {
            let cfg = match config {
                Some(p) => serde_json::from_str::<PhantomConfig>(&std::fs::read_to_string(&p)?)?,
                None => PhantomConfig::default(),
            };
            let m = harness::gen_data(&cfg, seed, &out, force)?;
            println!("wrote {} scans to {}", m.n_scans, out.display());
            Ok(true)
        }
        Command::Train { config, data, seed, out, force } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if data.is_some() {
                cfg.data_dir = data;
            }
            let dir = cfg
                .data_dir
                .clone()
                .ok_or_else(|| freehand::Error::InvalidParameter("no dataset: pass --data or set data_dir".into()))?;
            let ds = Dataset::open(&dir)?;
            let s = harness::run_train(&cfg, &ds, &out, force)?;
            println!(
                "best epoch {}, test eps_acc {:.3} mm, eps_drift {:.3} mm",
                s.best_epoch, s.test["eps_acc"].mean, s.test["eps_drift"].mean
            );
            Ok(true)
        }
        Command::Eval { checkpoint, data, split, config, out, force } => {
            let eval = match config {
                Some(p) => serde_json::from_str::<EvalConfig>(&std::fs::read_to_string(&p)?)?,
                None => EvalConfig::default(),
            };
            let ds = Dataset::open(&data)?;
            let r = harness::run_eval(&checkpoint, &ds, &split, &eval, &out, force)?;
            println!("{} scans evaluated, {} skipped", r.scans.len(), r.skipped.len());
            Ok(true)
        }
        Command::VarianceSweep { config, seed, m, out, force } => {
            let mut plan = load_plan(&config, seed)?;
            if let Some(m) = m {
                plan.base.seq_len = m;
            }
            let r = harness::variance_sweep(&plan, &out, force)?;
            for (mode, v) in &r.median_eps_acc {
                println!("{mode:>8}  median eps_acc {v:.3} mm");
            }
            Ok(r.complete)
        }
        Command::Ablation { config, seed, out, force } => {
            let plan = load_plan(&config, seed)?;
            let r = harness::ablation(&plan, &out, force)?;
            print!("{}", harness::ablation_table_csv(&r.rows));
            Ok(r.complete)
        }
        Command::PlotData { runs, out, force } => {
            let s = harness::plot_data(&runs, &out, force)?;
            println!("{} runs, {} warnings", s.runs.len(), s.warnings.len());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some cells did not complete");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
