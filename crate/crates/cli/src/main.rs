use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use multiquant::analysis::{write_msqe_csv, BinModel, ClippingVariant};
use multiquant::topology::{checkpoint, parse_bits, Strategy};
use multiquant::trainer::{evaluate, Method};
use multiquant_cli::config::{worker_threads, ArchChoice, DatasetSpec, RunConfig};
use multiquant_cli::experiment::{
    ablate, audit, checked_bits, msqe_sweep, run_experiment, CHECKPOINT_FILE, CONFIG_FILE, DEFAULT_VARIANTS,
};
use multiquant_cli::report::{load_run, render_comparison, render_run};

#[derive(Parser)]
#[command(
    name = "multiquant",
    version,
    about = "Arbitrary bit-width quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train(RunArgs),
    /// Re-evaluate a saved run's checkpoint on its test set.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Bit-widths to evaluate (default: all candidates).
        #[arg(long)]
        bits: Option<String>,
    },
    /// Serial/amortized x distillation on/off over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Mean squared quantization error, analytic and Monte-Carlo.
    Msqe {
        #[arg(long, default_value = "2,3,4,8")]
        bits: String,
        /// Comma-separated clip bounds.
        #[arg(long, default_value = "1,2,3")]
        u: String,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = Variant::Both)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run, or compare two.
    Report { run: PathBuf, other: Option<PathBuf> },
    /// Cost and storage of a configuration without training.
    Audit {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the audit files into the out directory.
        #[arg(long)]
        write: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Exact,
    Pow2,
    AsWritten,
    Both,
}

impl Variant {
    fn pairs(self) -> Vec<(ClippingVariant, BinModel)> {
        match self {
            Variant::Exact => vec![(ClippingVariant::Squared, BinModel::Exact)],
            Variant::Pow2 => vec![(ClippingVariant::Squared, BinModel::PowerOfTwo)],
            Variant::AsWritten => vec![(ClippingVariant::AsWritten, BinModel::PowerOfTwo)],
            Variant::Both => DEFAULT_VARIANTS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    explicit_map: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_enum)]
    distill: Option<OnOff>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    arch: Option<String>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_subset: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(b) = &self.bits {
            c.bits = parse_bits(b)?;
        }
        if let Some(m) = &self.explicit_map {
            c.explicit_map = Some(m.clone());
            c.strategy = Strategy::Explicit;
        }
        if let Some(s) = &self.strategy {
            c.strategy = s.parse()?;
        }
        if let Some(m) = &self.method {
            c.method = m.parse::<Method>()?;
        }
        if let Some(d) = self.distill {
            c.distill = matches!(d, OnOff::On);
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        if let Some(a) = &self.arch {
            c.arch = ArchChoice::Preset(a.clone());
        }
        if self.data_dir.is_some() || self.train_subset.is_some() {
            match &mut c.dataset {
                DatasetSpec::MnistIdx { dir, train_subset, .. } => {
                    if let Some(d) = &self.data_dir {
                        *dir = d.clone();
                    }
                    if let Some(n) = self.train_subset {
                        *train_subset = Some(n);
                    }
                }
                DatasetSpec::Synthetic { .. } => bail!("--data-dir and --train-subset apply to MNIST datasets only"),
            }
        }
        Ok(c)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} {t:?}: {e}"))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = run_experiment(&cfg)?;
            print!("{}", render_run(&load_run(&s.dir)?));
        }
        Command::Eval { run, bits } => {
            let cfg = RunConfig::from_file(&run.join(CONFIG_FILE))?;
            let model = checkpoint::load(&run.join(CHECKPOINT_FILE))
                .with_context(|| format!("loading checkpoint from {}", run.display()))?;
            let data = cfg.dataset.load(cfg.seed)?;
            let bits = match bits {
                Some(b) => parse_bits(&b)?,
                None => model.candidates().to_vec(),
            };
            for b in bits {
                println!("{b} {:.4}", evaluate(&model, &data.test, b)?);
            }
        }
        Command::Ablate { run, seeds } => {
            let cfg = run.resolve()?;
            let seeds = parse_list::<u64>(&seeds, "seed")?;
            let s = ablate(&cfg, &seeds, worker_threads()?)?;
            print!("{}", s.render());
        }
        Command::Msqe {
            bits,
            u,
            samples,
            variant,
            seed,
            out,
        } => {
            let bits = checked_bits(&parse_list::<u8>(&bits, "bit-width")?)?;
            let us = parse_list::<f64>(&u, "clip bound")?;
            let rows = msqe_sweep(&bits, &us, &variant.pairs(), samples, seed)?;
            println!("b  u      variant              analytic      monte-carlo   rel-gap");
            for r in &rows {
                println!(
                    "{:<2} {:<6} {:<20} {:<13.6e} {:<13} {}",
                    r.b,
                    r.u,
                    r.variant,
                    r.total_analytic,
                    r.total_monte_carlo.map_or("-".into(), |v| format!("{v:.6e}")),
                    r.relative_gap.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            if let Some(p) = out {
                write_msqe_csv(&p, &rows)?;
            }
        }
        Command::Report { run, other } => {
            let a = load_run(&run)?;
            match other {
                Some(o) => print!("{}", render_comparison(&a, &load_run(&o)?)),
                None => print!("{}", render_run(&a)),
            }
        }
        Command::Audit { run, write } => {
            let cfg = run.resolve()?;
            print!("{}", audit(&cfg, write)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
