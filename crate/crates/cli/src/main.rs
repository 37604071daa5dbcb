use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use biophys_core::dataset::{self, Split};
use biophys_core::experiment::{self, Arm, Protocol};
use biophys_core::growth::{simulate, GrowthParams};
use biophys_core::io::{slice_pgm, Checkpoint, Volume};
use biophys_core::nn::Activation;
use biophys_core::synth::SynthConfig;
use biophys_core::train::{evaluate, loss_csv, Region, TrainConfig, Trainer};
use biophys_core::{suite, Field3D};

#[derive(Parser, Debug)]
#[command(
    name = "biophys",
    version,
    about = "Growth-regularised tumour segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the reaction-diffusion solver and write density snapshots.
    Simulate(SimulateArgs),
    /// Build a synthetic dataset of growth-derived cases.
    GenData(GenDataArgs),
    /// Train the segmentation model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Export an axial slice of a volume as a PGM image.
    ExportSlice(ExportSliceArgs),
    /// Run the activation, boundary and train-size ablation grids.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON simulation config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sim_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// JSON synthetic-data config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the first case; later cases use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

/// Overrides shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_parser = ["sine", "relu"])]
    activation: Option<String>,
    #[arg(long)]
    no_bc: bool,
    #[arg(long)]
    no_pde: bool,
    /// Input channels zeroed for training and evaluation, e.g. `0,2`.
    #[arg(long, value_delimiter = ',')]
    drop_channels: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.lambda1 {
            config.weights.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            config.weights.lambda2 = v;
        }
        if let Some(a) = &self.activation {
            config.estimator.activation = a.parse::<Activation>().map_err(anyhow::Error::msg)?;
        }
        if self.no_bc {
            config.use_bc = false;
        }
        if self.no_pde {
            config.use_pde = false;
        }
        if let Some(d) = &self.drop_channels {
            config.drop_channels = d.clone();
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Use only the first N training cases.
    #[arg(long)]
    train_size: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the random inputs; drawn from the clock when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExportSliceArgs {
    /// Volume file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Index along the last axis; the middle slice when absent.
    #[arg(long)]
    slice: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Grid {
    /// Biophysics regulariser against Dice-only over train sizes.
    Size,
    /// Sine against relu and with against without boundary loss.
    Activation,
    All,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// JSON protocol config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the protocol's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "ablation")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Grid::All)]
    grid: Grid,
    /// Run a single train size instead of the protocol's list.
    #[arg(long)]
    train_size: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Initial {
    Constant {
        value: f64,
    },
    Gaussian {
        amplitude: f64,
        sigma: f64,
    },
    /// Independent uniform values in `[0, max)`.
    Random {
        max: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct SimulateConfig {
    dims: [usize; 3],
    spacing: f64,
    d: f64,
    rho: f64,
    dt: f64,
    steps: usize,
    snapshot_every: usize,
    initial: Initial,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            dims: [32, 32, 32],
            spacing: 1.0,
            d: 0.1,
            rho: 0.05,
            dt: 0.5,
            steps: 100,
            snapshot_every: 20,
            initial: Initial::Gaussian {
                amplitude: 0.8,
                sigma: 2.0,
            },
        }
    }
}

fn initial_field(config: &SimulateConfig, seed: u64) -> Result<Field3D> {
    use rand::{Rng, SeedableRng};
    let dims = config.dims;
    let field = match config.initial {
        Initial::Constant { value } => Field3D::constant(dims, value),
        Initial::Gaussian { amplitude, sigma } => {
            let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
            Field3D::from_fn(dims, |x, y, z| {
                let r2 = (x as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (z as f64 - c[2]).powi(2);
                amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            })
        }
        Initial::Random { max } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rng.gen::<f64>() * max).collect();
            Field3D::new(dims, 1.0, data)?
        }
    };
    Ok(field.with_spacing(config.spacing)?)
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let config: SimulateConfig = read_config(args.config.as_deref())?;
    let u0 = initial_field(&config, args.seed.unwrap_or(0))?;
    let params = GrowthParams {
        snapshot_every: config.snapshot_every,
        ..GrowthParams::uniform(config.dims, config.d, config.rho, config.dt, config.steps)
    };
    let result = simulate(&u0, &params)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut csv = String::from("snapshot,time,mass,mean,min,max\n");
    for (i, (t, u)) in result.snapshots.iter().enumerate() {
        Volume::from_field(u).save(args.out_dir.join(format!("snapshot_{i:04}.bvol")))?;
        let mass = u.sum();
        csv.push_str(&format!(
            "{i},{t},{mass},{},{},{}\n",
            mass / u.len() as f64,
            u.min(),
            u.max()
        ));
    }
    write(&args.out_dir.join("mass.csv"), csv)?;
    write(
        &args.out_dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    println!(
        "wrote {} snapshots to {}",
        result.snapshots.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let synth: SynthConfig = read_config(args.config.as_deref())?;
    let index = dataset::write_dataset(&args.out_dir, args.seed, args.cases, &synth)?;
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        index.cases.len(),
        args.out_dir.display(),
        index.splits.train.len(),
        index.splits.val.len(),
        index.splits.test.len()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    args.overrides.apply(&mut config)?;
    let data = dataset::load_split(&args.data, Split::Train, args.train_size)?;
    let mut trainer = Trainer::new(config)?;
    let every = (trainer.config.steps / 10).max(1);
    let log = trainer.run(&data, |_, l| {
        if l.step % every == 0 {
            eprintln!(
                "step {:>5}  lr {:.3e}  total {:.5}  dice {:.5}",
                l.step, l.lr, l.total, l.dice
            );
        }
    })?;
    fs::create_dir_all(&args.out_dir)?;
    trainer
        .checkpoint()?
        .save(args.out_dir.join("checkpoint.bck"))?;
    write(&args.out_dir.join("loss.csv"), loss_csv(&log))?;
    write(
        &args.out_dir.join("config.json"),
        serde_json::to_string_pretty(&trainer.config)?,
    )?;
    println!(
        "trained {} steps on {} cases, final loss {}",
        log.len(),
        data.len(),
        log.last().map_or(f64::NAN, |l| l.total)
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let data = dataset::load_split(&args.data, args.split, None)?;
    let report = evaluate(&trainer.model.segnet, &data, &trainer.config.drop_channels)?;
    write(&args.out_dir.join("metrics.csv"), report.to_csv())?;
    for region in [Region::TC, Region::WT, Region::ET] {
        let s = report.summary(region);
        println!(
            "{}: dice {:.4} +- {:.4}, hd95 {:.2} +- {:.2} mm ({} excluded)",
            region.name(),
            s.dice_mean,
            s.dice_std,
            s.hd95_mean,
            s.hd95_std,
            s.hd95_excluded
        );
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let seed = args.seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    });
    let entries = suite::run(seed)?;
    println!("seed {seed}");
    for e in &entries {
        println!("{:<18} {:.3e}", e.name, e.max_rel_error);
    }
    let max = suite::max_error(&entries);
    let ok = max < suite::TOLERANCE;
    println!(
        "max relative error {max:.3e} ({})",
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn run_export_slice(args: ExportSliceArgs) -> Result<()> {
    let volume = Volume::load(&args.input)?;
    let z = args.slice.unwrap_or(volume.dims[2] / 2);
    write(&args.out, slice_pgm(&volume, args.channel, z)?)?;
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let mut protocol: Protocol = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        protocol.seeds = vec![seed];
    }
    if let Some(size) = args.train_size {
        protocol.train_sizes = vec![size];
    }
    if let Some(steps) = args.overrides.steps {
        protocol.steps = steps;
    }
    args.overrides.apply(&mut protocol.base)?;
    let arms = match args.grid {
        Grid::Size => vec![Arm::biophysics(), Arm::dice_only()],
        Grid::Activation => vec![Arm::biophysics(), Arm::relu(), Arm::no_bc()],
        Grid::All => vec![
            Arm::biophysics(),
            Arm::dice_only(),
            Arm::relu(),
            Arm::no_bc(),
        ],
    };
    let arms: Vec<Arm> = arms
        .into_iter()
        .map(|mut a| {
            a.weights = protocol.base.weights;
            a
        })
        .collect();
    let results = experiment::run_grid(&protocol, &arms, |r| {
        eprintln!(
            "{:<10} size {} seed {}  mean dice {:.4}",
            r.arm, r.train_size, r.seed, r.mean_dice
        );
    })?;
    write(
        &args.out_dir.join("summary.csv"),
        experiment::summary_csv(&results),
    )?;
    write(
        &args.out_dir.join("protocol.json"),
        serde_json::to_string_pretty(&protocol)?,
    )?;
    for arm in &arms {
        println!(
            "{:<10} median mean dice {:.4}",
            arm.name,
            experiment::median_dice(&results, &arm.name, None)
        );
    }
    if args.grid != Grid::Activation && protocol.train_sizes.len() > 1 {
        let v = experiment::size_verdict(&results, "biophys", "dice_only")?;
        println!(
            "size {}: biophys {:.4} vs dice_only {:.4}; gap shrinks with size in {}/{} seeds",
            v.smallest, v.regularised_median, v.baseline_median, v.shrinking_gap_seeds, v.seeds
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(a) => run_simulate(a)?,
        Command::GenData(a) => run_gen_data(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Gradcheck(a) => return run_gradcheck(a),
        Command::ExportSlice(a) => run_export_slice(a)?,
        Command::Ablate(a) => run_ablate(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
