use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pgmgan_core::config::{DatasetKind, ExperimentConfig};
use pgmgan_core::ganmix::read_samples_csv;
use pgmgan_core::metrics::{delta_bound, TheoremOneInstance};
use pgmgan_core::pipeline::{self, DATASET_FILE, PARTITIONER_FILE, SAMPLES_FILE, SCATTER_FILE, VERIFICATION_FILE};
use pgmgan_core::plot::scatter_svg;
use pgmgan_core::synthdata::Point;
use pgmgan_core::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(name = "pgmgan", version, about = "Partition-guided mixture GANs on toy manifolds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; missing fields take the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `dataset.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true, env = "PGMGAN_OUT")]
    out: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, value_enum)]
    dataset: Option<Preset>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Grid,
    Ring,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the toy dataset to CSV.
    GenData,
    /// Run the full pipeline and write checkpoints, metrics and figures.
    Train,
    /// Run the guide verifiers on a partitioner checkpoint.
    VerifyGuide {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the total-variation lower bound for Lipschitz generators.
    Bound {
        /// Comma-separated manifold probabilities.
        #[arg(long, value_delimiter = ',', required = true)]
        pi: Vec<f64>,
        /// Comma-separated separations, one per manifold.
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<f64>,
        #[arg(long)]
        c: f64,
    },
    /// Scatter plot of generated samples over the real data.
    Plot {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// SVG path; defaults to samples.svg in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute metrics from the checkpoints in the output directory.
    Eval,
}

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
    Verification(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let Some(core) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
            return Failure::Stage(e);
        };
        match core.root() {
            Error::Invalid { .. } => Failure::Validation(e),
            Error::Verification(_) | Error::Certificate { .. } | Error::Hypothesis(_) => Failure::Verification(e),
            _ => Failure::Stage(e),
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::preset(match c.dataset {
            Some(Preset::Ring) => DatasetKind::Ring,
            _ => DatasetKind::Grid,
        }),
    };
    if let Some(s) = c.seed {
        cfg.dataset.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating output directory {}", p.display()))
}

fn read_points(path: &Path) -> Result<Vec<Point>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_samples_csv(std::io::BufReader::new(f))?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Bound { pi, d, c } = &cli.command {
        let inst = TheoremOneInstance::new(pi.clone(), d.clone(), *c).map_err(anyhow::Error::from)?;
        let delta = delta_bound(&inst);
        println!("{delta}");
        let doc = serde_json::json!({ "pi": inst.pis, "d": inst.ds, "c": inst.c, "delta": delta });
        println!("{doc}");
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    if cli.common.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Bound { .. } => unreachable!("handled above"),
        Command::GenData => {
            ensure_dir(&out)?;
            let (spec, data) = pipeline::generate_dataset(&cfg).map_err(anyhow::Error::from)?;
            let path = out.join(DATASET_FILE);
            pipeline::write_dataset(&path, &data).map_err(anyhow::Error::from)?;
            println!(
                "wrote {} samples from {} modes to {}",
                data.len(),
                spec.k(),
                path.display()
            );
        }
        Command::Train => {
            let r = pipeline::run_train(&cfg).map_err(anyhow::Error::from)?;
            let m = &r.evaluation.metrics;
            println!("{}", pipeline::MetricsRow::HEADER);
            println!("{}", m.to_csv());
            if !r.verification.all_pass {
                eprintln!("note: verifiers failed on the unconstrained control trunk (recorded only)");
            }
        }
        Command::VerifyGuide { checkpoint, data } => {
            let ck = checkpoint.unwrap_or_else(|| out.join(PARTITIONER_FILE));
            let data_path = data.unwrap_or_else(|| out.join(DATASET_FILE));
            let model =
                pgmgan_core::checkpoint::load_partitioner(&ck).with_context(|| format!("loading {}", ck.display()))?;
            let data =
                pipeline::read_dataset(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
            let mut cfg = cfg;
            cfg.partitioner.trunk = pgmgan_core::partitioner::TrunkKind::Residual;
            let v = pipeline::verify_stage(&cfg, &model, &data).map_err(anyhow::Error::from)?;
            ensure_dir(&out)?;
            let path = out.join(VERIFICATION_FILE);
            pgmgan_core::checkpoint::save_json(&path, &v).map_err(anyhow::Error::from)?;
            for p in &v.report.partitions {
                println!(
                    "partition {:>3}: components {} descent {}/{} floor {}",
                    p.partition,
                    p.components,
                    p.descent.successes,
                    p.descent.starts,
                    p.grad_floor.map_or("-".to_string(), |f| format!("{f:.6}"))
                );
            }
            if !v.all_pass {
                let why = pipeline::verification_failures(&v.report).join("; ");
                return Err(Failure::Verification(anyhow::anyhow!(
                    "guide verification failed: {why}"
                )));
            }
            println!("all partitions pass; report in {}", path.display());
        }
        Command::Plot { samples, data, output } => {
            let sp = samples.unwrap_or_else(|| out.join(SAMPLES_FILE));
            let dp = data.unwrap_or_else(|| out.join(DATASET_FILE));
            let generated = read_points(&sp)?;
            let real: Vec<Point> = pipeline::read_dataset(&dp)
                .with_context(|| format!("reading {}", dp.display()))?
                .into_iter()
                .map(|s| s.x)
                .collect();
            let svg = scatter_svg(&real, &generated).map_err(anyhow::Error::from)?;
            let path = match output {
                Some(p) => p,
                None => {
                    ensure_dir(&out)?;
                    out.join(SCATTER_FILE)
                }
            };
            std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Command::Eval => {
            let ev = pipeline::run_eval(&cfg).map_err(anyhow::Error::from)?;
            println!("{}", pipeline::MetricsRow::HEADER);
            println!("{}", ev.metrics.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Validation(e) => (EXIT_VALIDATION, e),
                Failure::Stage(e) => (EXIT_STAGE, e),
                Failure::Verification(e) => (EXIT_VERIFICATION, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
