//! `stdet` command-line harness.
//!
//! Every subcommand exits 0 on success. On failure it prints exactly one line
//! `error: <kind>: <message>` to stderr and exits 1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stdet::nqm::{self, NqmConfig, NqmMethod};
use stdet::paramstore::read_snapshot_file;
use stdet::pipeline::{self, artifact, Manifest, Method, RunConfig};
use stdet::toymodel::{generate_batch, Batch, Quantizer, ToyCodec};
use stdet::trainer::CodecTask;
use stdet::{report, Error};

#[derive(Parser)]
#[command(name = "stdet", version, about = "Mode decomposition, parameter embedding and sampled moving averages on a toy codec")]
struct Cli {
    /// Worker threads for the parallel parts (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; a run manifest is accepted as well.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy codec with the configured method and write run artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// sgd, proposed, sgd+ema, sgd+sma or stdet-only.
        #[arg(long)]
        method: Option<String>,
    },
    /// Simulate the noisy quadratic model and compare with the closed forms.
    Nqm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
        /// Also write the loss curve as SVG.
        #[arg(long)]
        plot: bool,
        /// SVG destination (default: <run_dir>/loss_curve.svg).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Write synthetic training patches as CSV, one sample per line.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Instant decomposition loss over a grid of mode and sample counts,
    /// using the head-stage snapshots of a finished run.
    SweepModes {
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        modes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "200,400,800,1600,3200,6400")]
        samples: Vec<usize>,
        /// CSV destination (default: <run_dir>/sweep_modes.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(common: &Common, method: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = method {
        cfg.method = m.parse::<Method>()?;
    }
    Ok(cfg)
}

fn cmd_run(common: &Common, method: Option<&str>) -> Result<(), Error> {
    let cfg = run_config(common, method)?;
    let out = pipeline::run::<f64>(&cfg)?;
    let last = out.metrics.last().expect("at least one epoch");
    println!(
        "run ok: method={} epochs={} eval_loss={} embedded_frac={} dir={}",
        cfg.method.as_str(),
        last.epoch,
        last.eval_loss,
        last.embedded_frac,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_nqm(common: &Common, steps: Option<usize>, seeds: Option<usize>) -> Result<(), Error> {
    let mut cfg: NqmConfig = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => NqmConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seeds {
        cfg.num_seeds = s;
    }
    let results = [NqmMethod::Sgd, NqmMethod::Sma, NqmMethod::Proposed]
        .into_iter()
        .map(|m| nqm::simulate::<f64>(&cfg, m))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/nqm"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("nqm.csv"), nqm::results_csv(&cfg, &results))?;
    for r in &results {
        println!(
            "{}: max_rel_err={:.4} loss_emp={:.6} loss_closed={:.6}",
            r.method.as_str(),
            r.max_relative_error(),
            r.empirical_loss,
            r.closedform_loss
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path, plot: bool, svg: Option<&Path>) -> Result<(), Error> {
    let r = report::report(dir, plot)?;
    print!("{}", r.summary);
    if let Some(text) = r.svg {
        let path = svg.map(Path::to_path_buf).unwrap_or_else(|| dir.join("loss_curve.svg"));
        fs::write(&path, text)?;
        println!("plot: {}", path.display());
    }
    Ok(())
}

fn batch_csv(batch: &Batch<f64>) -> String {
    let mut out = String::new();
    for b in 0..batch.batch_size {
        let row: Vec<String> = batch.sample(b).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn cmd_gen_data(out: &Path, samples: usize, dim: usize, seed: u64) -> Result<(), Error> {
    if samples == 0 || dim == 0 {
        return Err(Error::Config("samples and dim must be at least 1".into()));
    }
    fs::write(out, batch_csv(&generate_batch::<f64>(samples, dim, seed)))?;
    Ok(())
}

fn cmd_sweep(dir: &Path, modes: &[usize], samples: &[usize], out: Option<&Path>) -> Result<(), Error> {
    let manifest = Manifest::read(dir)?;
    let head_path = dir.join(artifact::HEAD_SNAPSHOT);
    if !head_path.is_file() {
        return Err(Error::MissingArtifacts(vec![head_path]));
    }
    let log = read_snapshot_file::<f64>(&head_path)?;
    let cfg = &manifest.config;
    let seeds = cfg.seeds();
    let codec = ToyCodec::<f64>::new(cfg.model.clone())?;
    let task = CodecTask::new(codec, cfg.train.batch_size, seeds.data);
    let set = task.sample_set(cfg.sensitivity.samples.max(1), 0);
    let eval = |w: &[f64]| task.codec.forward_loss(w, &set, Quantizer::Round).map(|l| l.total);
    let cells = pipeline::sweep_modes(&log, modes, samples, eval, seeds.cmd)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("sweep_modes.csv"));
    fs::write(&path, pipeline::sweep_csv(&cells))?;
    println!("sweep: {} cells -> {}", cells.len(), path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Run { common, method } => cmd_run(common, method.as_deref()),
        Command::Nqm { common, steps, seeds } => cmd_nqm(common, *steps, *seeds),
        Command::Report { run_dir, plot, svg } => cmd_report(run_dir, *plot, svg.as_deref()),
        Command::GenData { out, samples, dim, seed } => cmd_gen_data(out, *samples, *dim, *seed),
        Command::SweepModes { run_dir, modes, samples, out } => cmd_sweep(run_dir, modes, samples, out.as_deref()),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: config: {}", one_line(&e.to_string()));
            return ExitCode::FAILURE;
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
