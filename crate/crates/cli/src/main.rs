//! `mmseg`: synthetic data generation, training, and robustness evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmseg_core::checkpoint;
use mmseg_core::config::RunConfig;
use mmseg_core::data::{
    gen_synthetic, load_split, ModalitySample, NoiseKind, NoiseSpec, Split, SyntheticSpec, KNOWN_MODALITIES,
};
use mmseg_core::evaluation::{all_subsets, results_csv, run_scenarios, Scenario, ScenarioResult};
use mmseg_core::model::Model;
use mmseg_core::numerics::ParamStore;
use mmseg_core::training::train;
use mmseg_core::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "mmseg", version, about = "Multi-modal segmentation with routed LoRA experts")]
struct Cli {
    /// Worker threads; 1 guarantees bit-determinism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training samples; validation and test get a quarter each.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// `N` or `HxW`.
        #[arg(long, default_value = "64")]
        size: String,
        #[arg(long, value_delimiter = ',', default_value = "rgb,depth,event,lidar")]
        modalities: Vec<String>,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one scenario: kept modalities plus optional noise.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of the trained modalities, or `all`.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        #[arg(long)]
        noise: Option<NoiseKind>,
        #[arg(long)]
        noise_modality: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every nonempty subset of the trained modalities.
    Matrix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with its exit category.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 2),
            Failure::Core(e) => match e.kind() {
                ErrorKind::Usage => ("usage", 2),
                ErrorKind::Config => ("config", 3),
                ErrorKind::Data => ("data", 4),
                ErrorKind::Numeric => ("numeric", 5),
                ErrorKind::Internal => ("internal", 1),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    let dims = match s.split_once(['x', 'X']) {
        Some((h, w)) => parse(h).zip(parse(w)),
        None => parse(s).map(|n| (n, n)),
    };
    dims.ok_or_else(|| usage(format!("--size `{s}` is not N or HxW with positive extents")))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| usage(format!("--split `{s}` is not train, val or test")))
}

fn write_csv(path: &Path, results: &[ScenarioResult], classes: usize) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, results_csv(results, classes)).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Loads a checkpoint and the requested split, checking they are compatible.
fn load_for_eval(
    ck_dir: &Path,
    data: &Path,
    split: &str,
) -> Result<(Model, ParamStore<f32>, Vec<ModalitySample>), Failure> {
    let split = parse_split(split)?;
    let ck = checkpoint::load(ck_dir)?;
    let (model, store) = ck.instantiate()?;
    let (manifest, samples) = load_split(data, split, Some(&ck.modalities))?;
    if manifest.classes > model.cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint predicts {}",
            manifest.classes, model.cfg.classes
        ))
        .into());
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{} split of {} is empty", split, data.display())).into());
    }
    Ok((model, store, samples))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData { out, seed, count, classes, size, modalities } => {
            if count == 0 {
                return Err(usage("--count must be positive"));
            }
            if classes == 0 {
                return Err(usage("--classes must be positive"));
            }
            if let Some(bad) = modalities.iter().find(|m| !KNOWN_MODALITIES.contains(&m.as_str())) {
                return Err(usage(format!("unknown modality `{bad}` (known: {})", KNOWN_MODALITIES.join(", "))));
            }
            let (height, width) = parse_size(&size)?;
            let spec = SyntheticSpec { seed, count, classes, height, width, modalities };
            let m = gen_synthetic(&out, &spec)?;
            println!(
                "wrote {}: {} train / {} val / {} test samples, {}x{}, {} classes, modalities {}",
                out.display(),
                m.count,
                m.val_count,
                m.test_count,
                m.height,
                m.width,
                m.classes,
                m.modalities.join(",")
            );
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::read(&config).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
                e => e,
            })?;
            let report = train(&cfg, &out, threads)?;
            match report.history.last() {
                Some(m) => println!(
                    "trained {} epochs: loss {:.4}, train mIoU {:.4}; checkpoint {}",
                    m.epoch,
                    m.loss_total,
                    m.train_miou,
                    report.last.display()
                ),
                None => println!("0 epochs; initial checkpoint {}", report.last.display()),
            }
        }
        Command::Eval { checkpoint, data, modalities, noise, noise_modality, seed, split, out } => {
            let (model, store, samples) = load_for_eval(&checkpoint, &data, &split)?;
            let trained = model.modality_names();
            let keep = match modalities {
                None => trained.clone(),
                Some(m) if m.len() == 1 && m[0] == "all" => trained.clone(),
                Some(m) => {
                    if let Some(bad) = m.iter().find(|x| !trained.contains(x)) {
                        return Err(usage(format!(
                            "modality `{bad}` was not used in training (trained: {})",
                            trained.join(",")
                        )));
                    }
                    m
                }
            };
            let scenario = match (noise, noise_modality) {
                (None, None) => Scenario::clean(&keep),
                (Some(kind), Some(modality)) => {
                    if !keep.contains(&modality) {
                        return Err(usage(format!("--noise-modality `{modality}` is not among the kept modalities")));
                    }
                    Scenario::noisy(&keep, NoiseSpec { kind, modality, seed })
                }
                (Some(_), None) => return Err(usage("--noise requires --noise-modality")),
                (None, Some(_)) => return Err(usage("--noise-modality requires --noise")),
            };
            let results = run_scenarios(&model, &store, &samples, &[scenario], threads)?;
            write_csv(&out, &results, model.cfg.classes)?;
            println!("{} mIoU {:.4} over {} samples", results[0].scenario.name, results[0].miou, samples.len());
        }
        Command::Matrix { checkpoint, data, split, out } => {
            let (model, store, samples) = load_for_eval(&checkpoint, &data, &split)?;
            let scenarios: Vec<Scenario> = all_subsets(&model.modality_names()).iter().map(|s| Scenario::clean(s)).collect();
            let results = run_scenarios(&model, &store, &samples, &scenarios, threads)?;
            write_csv(&out, &results, model.cfg.classes)?;
            for r in &results {
                println!("{:<32} {:.4}", r.scenario.name, r.miou);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("mmseg: error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMSEG_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind();
            eprintln!("mmseg: error[{kind}]: {}", e.message().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
