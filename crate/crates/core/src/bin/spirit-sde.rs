use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spirit_sde::cxt;
use spirit_sde::experiment::{self, export, ExperimentConfig, Method};
use spirit_sde::metrics::{self, MetricsRow, Roi};
use spirit_sde::{Error, Result};

#[derive(Parser)]
#[command(name = "spirit-sde", version, about = "Multi-coil MRI reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write per-step solver and sampler traces.
    #[arg(long, global = true)]
    trace: bool,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overrides the sampler seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom, coil maps, mask and measurement.
    Simulate,
    /// SPIRiT kernel from the ACS block of a saved measurement.
    Calibrate {
        /// Directory holding the simulation outputs; defaults to the output directory.
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// One reconstruction method on saved inputs.
    Recon {
        #[arg(long)]
        method: String,
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// Metrics of a magnitude image against a reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Line plot of one column of a trace table.
    TracePlot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Column to plot; defaults to `residual`, then `objective`.
        #[arg(long)]
        column: Option<String>,
        /// Linear instead of log10 vertical axis.
        #[arg(long)]
        linear: bool,
    },
    /// Full pipeline for every configured method.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this subcommand needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.sampler.seed = seed;
    }
    Ok(cfg)
}

fn input_dir(dir: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    dir.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn read_image(path: &Path) -> Result<spirit_sde::RealImage> {
    metrics::real_image(&cxt::read(path)?)
}

fn eval(cli: &Cli, reference: &Path, test: &Path) -> Result<()> {
    let r = read_image(reference)?;
    let t = read_image(test)?;
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let roi = match &cfg {
        Some(c) => experiment::resolve_roi(c, &r)?,
        None => Roi::full(&r),
    };
    let report = metrics::evaluate(&r, &t, Some(&roi))?;
    let name = test.file_stem().and_then(|s| s.to_str()).unwrap_or("test").to_string();
    let acceleration = cfg.as_ref().map_or(1.0, |c| c.mask.acceleration);
    let rows = [MetricsRow { method: name, acceleration, report }];
    print!("{}", metrics::metrics_table(&rows));
    let dir = cli.output_dir.clone().or_else(|| cfg.map(|c| c.output_dir));
    if let Some(dir) = dir {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("eval.tsv"), metrics::metrics_tsv(&rows))?;
    }
    Ok(())
}

fn trace_plot(input: &Path, output: &Path, column: Option<&str>, linear: bool) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let (header, cols) = export::parse_table(&text)?;
    let want: Vec<&str> = match column {
        Some(c) => vec![c],
        None => vec!["residual", "objective"],
    };
    let idx = want
        .iter()
        .find_map(|w| header.iter().position(|h| h == w))
        .ok_or_else(|| Error::Format(format!("no column {want:?} in {}", input.display())))?;
    export::save_plot(output, &cols[idx], !linear)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let sim = experiment::run_simulate(&cfg)?;
            println!(
                "simulated {}x{} phantom, {} coils, R = {:.3}",
                cfg.phantom.size.0,
                cfg.phantom.size.1,
                cfg.coils.count,
                sim.data.mask.acceleration()
            );
        }
        Command::Calibrate { input_dir: dir } => {
            let cfg = load_config(cli)?;
            let k = experiment::run_calibrate(&cfg, &input_dir(dir, &cfg))?;
            println!("calib_residual = {:.6e}", k.calib_residual());
        }
        Command::Recon { method, input_dir: dir } => {
            let cfg = load_config(cli)?;
            let m: Method = method.parse()?;
            experiment::run_recon(&cfg, m, &input_dir(dir, &cfg), cli.trace)?;
            println!("wrote {}", cfg.output_dir.join(experiment::recon_file(m)).display());
        }
        Command::Eval { reference, test } => eval(cli, reference, test)?,
        Command::TracePlot { input, output, column, linear } => trace_plot(input, output, column.as_deref(), *linear)?,
        Command::Run => {
            let cfg = load_config(cli)?;
            let out = experiment::run_experiment(&cfg, cli.trace)?;
            print!("{}", metrics::metrics_table(&out.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
