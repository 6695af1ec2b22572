//! The `gf2` command line: dataset generation, training, generation,
//! latent manipulation, evaluation and serving.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gf2_core::config::Config;
use gf2_core::eval::{evaluate, EvalConfig};
use gf2_core::model::{Generator, Which};
use gf2_core::toydata::{write_dataset, Dataset};
use gf2_core::trainer::Trainer;
use gf2_core::visuals::export_visuals;
use gf2_core::{Error, Rng};

/// Exit code of a configuration or usage error.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code of a runtime failure.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "gf2", about = "Two-stage compositional scene generation on toy scenes", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` (and `data.seed` for dataset generation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted `key=value` override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Toy dataset tools.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Trains one phase or the whole schedule.
    Train {
        #[arg(value_enum)]
        phase: TrainPhase,
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; generated in memory from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory for `checkpoint.gf2c` and loss curves.
        #[arg(long)]
        out: PathBuf,
    },
    /// Samples scenes and writes image, layout, depth and segment files.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "generated")]
        out: PathBuf,
    },
    /// Moves one segment's latent towards a random target and exports both scenes.
    Manipulate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        segment: usize,
        #[arg(long)]
        which: Which,
        /// Interpolation weight in `[0, 1]`.
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Seed of the target latent.
        #[arg(long, default_value_t = 1)]
        target_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation budget file (JSON); defaults otherwise.
        #[arg(long)]
        eval_config: Option<PathBuf>,
        /// Writes `report.json` and `per_class.csv` here instead of printing the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the HTTP session service.
    Serve {
        /// Directory of `<name>.gf2c` checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCommand {
    /// Writes a toy dataset with its manifest.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Plan,
    Exec,
    Joint,
    /// Every phase of the configured schedule.
    Pipeline,
}

/// Resolves a configuration from `base`, the file, `GF2_*` variables and overrides.
pub fn resolve(base: Config, args: &ConfigArgs) -> Result<Config, Error> {
    let mut overrides = Vec::new();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("data.seed={seed}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    Config::resolve_from(base, args.config.as_deref(), std::env::vars(), &overrides)
}

fn load_data(path: Option<&Path>, cfg: &Config) -> Result<Dataset<f32>, Error> {
    match path {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(&cfg.data.toy, cfg.data.seed, cfg.data.count, cfg.model.max_segments),
    }
}

/// Scene seed of sample `i` of a `generate` run.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).fork_idx("sample", i as u64).seed()
}

fn train(phase: TrainPhase, args: &ConfigArgs, data: Option<&Path>, ckpt: Option<&Path>, out: &Path) -> Result<(), Error> {
    let mut trainer = match ckpt {
        Some(path) => {
            let mut t = Trainer::<f32>::load(path)?;
            let cfg = resolve(t.config().clone(), args)?;
            t.set_config(cfg)?;
            t
        }
        None => Trainer::new(resolve(Config::default(), args)?)?,
    };
    let data = load_data(data, trainer.config())?;
    trainer.set_curve_dir(Some(out.join("curves")));
    match phase {
        TrainPhase::Plan => trainer.train_planning(&data)?,
        TrainPhase::Exec => trainer.train_execution(&data)?,
        TrainPhase::Joint => trainer.finetune_joint(&data)?,
        TrainPhase::Pipeline => trainer.run_schedule(&data)?,
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(trainer.config())?)?;
    trainer.save(&out.join("checkpoint.gf2c"))
}

fn manipulate(gen: &Generator<f32>, seed: u64, segment: usize, which: Which, t: f64, target_seed: u64, out: &Path) -> Result<(), Error> {
    let scene = gen.scene(seed)?;
    let target = gen.sample_style_z(1, &mut Rng::new(target_seed).fork("edit"))?.into_reshape(&[gen.config.z_dim])?;
    let edited = gen.interpolate(&scene, segment, which, &target, t)?;
    export_visuals(&scene.layout, &scene.image, &out.join("before"))?;
    export_visuals(&edited.layout, &edited.image, &out.join("after"))
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Data { command: DataCommand::Gen { config, out, count } } => {
            let cfg = resolve(Config::default(), &config)?;
            let manifest = write_dataset(&out, &cfg.data.toy, cfg.data.seed, count.unwrap_or(cfg.data.count), cfg.model.max_segments)?;
            println!("{}", serde_json::to_string(&manifest)?);
            Ok(())
        }
        Command::Train { phase, config, data, ckpt, out } => train(phase, &config, data.as_deref(), ckpt.as_deref(), &out),
        Command::Generate { ckpt, n, seed, out } => {
            let gen = Generator::<f32>::load(&ckpt)?;
            for i in 0..n {
                let scene = gen.scene(sample_seed(seed, i))?;
                export_visuals(&scene.layout, &scene.image, &out.join(format!("{i:04}")))?;
            }
            Ok(())
        }
        Command::Manipulate { ckpt, seed, segment, which, t, target_seed, out } => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::BadConfig(format!("--t {t} outside [0, 1]")));
            }
            manipulate(&Generator::load(&ckpt)?, seed, segment, which, t, target_seed, &out)
        }
        Command::Eval { ckpt, data, seed, eval_config, out } => {
            let mut cfg = match eval_config {
                Some(path) => serde_json::from_slice::<EvalConfig>(&std::fs::read(&path)?).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?,
                None => EvalConfig::default(),
            };
            cfg.seed = seed;
            cfg.validate()?;
            let report = evaluate(&Generator::<f32>::load(&ckpt)?, &Dataset::load(&data)?, &cfg)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
                    report.write_class_csv(std::fs::File::create(dir.join("per_class.csv"))?)
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&report)?);
                    Ok(())
                }
            }
        }
        Command::Serve { checkpoints, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(gf2_service::serve(addr, checkpoints))?;
            Ok(())
        }
    }
}

/// Exit code for an error: configuration problems are 2, everything else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::BadConfig(_) | Error::TooFewProbes { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` and runs the command, reporting errors on `stderr`;
/// help and version go to standard output.
pub fn run<I, T>(argv: I, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let _ = write!(stderr, "{}", e.render());
            return EXIT_CONFIG;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

