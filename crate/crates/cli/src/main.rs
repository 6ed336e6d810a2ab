use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use murssl::data::{read_dataset_csv, SslDataset};
use murssl::harness::{
    compare_rr, grid_csv, sweep_radius, virtual_point_rows, virtual_points_csv, write_summary,
    ExperimentConfig, MurSettings, RadiusUnit, SensitivityHistogram,
};
use murssl::model::{load_checkpoint, sensitivities};
use murssl::mur::{MurConfig, Solver};
use murssl::objectives::Method;
use murssl::Tensor;

#[derive(Parser)]
#[command(
    name = "murssl",
    version,
    about = "Semi-supervised training with manifold uncertainty regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Train at each radius of a grid.
    SweepRadius(GridArgs),
    /// MUR against the random-sphere baseline on a radius grid.
    CompareRr(GridArgs),
    /// Per-example sensitivities of a checkpoint plus a histogram.
    Sensitivity(SensitivityArgs),
    /// Virtual points and entropies of a checkpoint on a dataset split.
    DumpVirtualPoints(VirtualPointArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SolverArg {
    Direct,
    Pga,
    Laga,
    Random,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    vbi: Option<Toggle>,
    #[arg(long, value_enum)]
    mur_solver: Option<SolverArg>,
    /// Absolute MUR radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Peak MUR coefficient.
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated radii; 0 means no MUR.
    #[arg(long, value_delimiter = ',', required = true)]
    radii: Vec<f64>,
    /// Read radii as multiples of the data-scaled default.
    #[arg(long)]
    scaled: bool,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV as written next to each checkpoint.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VirtualPointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "direct")]
    solver: SolverArg,
    #[arg(long)]
    radius: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn resolve(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = o.method {
        cfg.method = m;
    }
    if let Some(v) = o.vbi {
        cfg.vbi = matches!(v, Toggle::On);
    }
    match o.mur_solver {
        Some(SolverArg::Off) => {
            cfg.mur = None;
            cfg.rr_baseline = false;
            cfg.lambda3.peak = 0.0;
        }
        Some(s) => {
            let m = cfg.mur.get_or_insert_with(MurSettings::default);
            m.solver = solver(s)?;
            cfg.rr_baseline = s == SolverArg::Random;
        }
        None => {}
    }
    if let Some(r) = o.radius {
        let Some(m) = cfg.mur.as_mut() else {
            bail!("--radius given but MUR is off");
        };
        m.radius = Some(r);
    }
    if let Some(l) = o.lambda3 {
        cfg.lambda3.peak = l;
    }
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn solver(s: SolverArg) -> Result<Solver> {
    Ok(match s {
        SolverArg::Direct => Solver::Direct,
        SolverArg::Pga => Solver::Pga,
        SolverArg::Laga => Solver::Laga,
        SolverArg::Random => Solver::Random,
        SolverArg::Off => bail!("solver `off` is not valid here"),
    })
}

fn split(data: &SslDataset, s: SplitArg) -> &Tensor {
    match s {
        SplitArg::Labeled => &data.labeled.inputs,
        SplitArg::Unlabeled => &data.unlabeled.inputs,
        SplitArg::Test => &data.test.inputs,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve(&args.overrides)?;
    if args.overrides.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let result = murssl::harness::run_experiment(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    if let Some(dir) = &cfg.output_dir {
        write_summary(&dir.join("summary.json"), &result.summary)?;
    }
    Ok(())
}

fn grid(args: &GridArgs, rr: bool) -> Result<()> {
    let cfg = resolve(&args.overrides)?;
    if args.overrides.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let unit = if args.scaled {
        RadiusUnit::Scaled
    } else {
        RadiusUnit::Absolute
    };
    let rows = if rr {
        compare_rr(&cfg, &args.radii, unit)?
    } else {
        sweep_radius(&cfg, &args.radii, unit)?
    };
    print!("{}", grid_csv(&rows));
    Ok(())
}

fn checkpoint_data(
    checkpoint: &Path,
    dataset: &Path,
) -> Result<(
    murssl::model::ParamSet,
    murssl::model::ModelSpec,
    SslDataset,
)> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let data = read_dataset_csv(dataset, meta.spec.classes())?;
    if data.dim() != meta.spec.input_dim() {
        bail!(
            "dataset has {} features but the checkpoint expects {}",
            data.dim(),
            meta.spec.input_dim()
        );
    }
    Ok((params, meta.spec, data))
}

fn sensitivity(args: &SensitivityArgs) -> Result<()> {
    let (params, spec, data) = checkpoint_data(&args.checkpoint, &args.dataset)?;
    let hist = SensitivityHistogram::new(
        sensitivities(&spec, &params, split(&data, args.split))?,
        args.bin_width,
    )?;
    write(&args.out.join("sensitivity.csv"), &hist.values_csv())?;
    write(
        &args.out.join("sensitivity_hist.csv"),
        &hist.histogram_csv(),
    )?;
    println!(
        "mean sensitivity {:.6} over {} examples",
        hist.mean(),
        hist.values.len()
    );
    Ok(())
}

fn dump_virtual_points(args: &VirtualPointArgs) -> Result<()> {
    let (params, spec, data) = checkpoint_data(&args.checkpoint, &args.dataset)?;
    let cfg = MurConfig {
        radius: args.radius,
        solver: solver(args.solver)?,
        lr: args.lr,
        steps: args.steps,
    };
    cfg.validate()?;
    let rows = virtual_point_rows(&spec, &params, split(&data, args.split), &cfg, args.seed)?;
    write(&args.out, &virtual_points_csv(&rows))?;
    println!(
        "wrote {} virtual points to {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => train(a),
        Command::SweepRadius(a) => grid(a, false),
        Command::CompareRr(a) => grid(a, true),
        Command::Sensitivity(a) => sensitivity(a),
        Command::DumpVirtualPoints(a) => dump_virtual_points(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
