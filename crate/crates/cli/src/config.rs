//! Run configuration: one flat JSON document, kebab-case keys.

use std::path::{Path, PathBuf};

use multiquant::data::{self, DatasetHandle, Normalization};
use multiquant::engine::{AdamConfig, SgdConfig};
use multiquant::topology::{ArchSpec, Strategy};
use multiquant::trainer::{Method, Schedule, TrainConfig};
use multiquant::{Error, Result};
use serde::{Deserialize, Serialize};

/// A named preset or a full architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Preset(String),
    Spec(ArchSpec),
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<ArchSpec> {
        let a = match self {
            ArchChoice::Preset(name) => ArchSpec::by_name(name)?,
            ArchChoice::Spec(s) => s.clone(),
        };
        a.validate()?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `train-*` and `t10k-*` IDX files in `dir`, optionally gzipped.
    #[serde(rename_all = "kebab-case")]
    MnistIdx {
        dir: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    #[serde(rename_all = "kebab-case")]
    Synthetic {
        classes: usize,
        dim: usize,
        train_n: usize,
        test_n: usize,
    },
}

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

impl DatasetSpec {
    /// `(channels, height, width)` and class count of the samples.
    pub fn sample_shape(&self) -> ([usize; 3], usize) {
        match self {
            DatasetSpec::MnistIdx { .. } => ([1, 28, 28], 10),
            DatasetSpec::Synthetic { classes, dim, .. } => ([*dim, 1, 1], *classes),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        match self {
            DatasetSpec::MnistIdx {
                dir,
                train_subset,
                test_subset,
            } => {
                if !dir.is_dir() {
                    p.push(format!("dataset directory {} does not exist", dir.display()));
                } else {
                    for f in IDX_FILES {
                        if !dir.join(f).exists() && !dir.join(format!("{f}.gz")).exists() {
                            p.push(format!("{} has no {f}[.gz]", dir.display()));
                        }
                    }
                }
                if *train_subset == Some(0) || *test_subset == Some(0) {
                    p.push("subsets must be positive".into());
                }
            }
            DatasetSpec::Synthetic {
                classes,
                dim,
                train_n,
                test_n,
            } => {
                if *classes < 2 {
                    p.push("synthetic data needs at least two classes".into());
                }
                if *dim == 0 || *train_n == 0 || *test_n == 0 {
                    p.push("synthetic dim, train-n and test-n must be positive".into());
                }
            }
        }
        p
    }

    pub fn load(&self, seed: u64) -> Result<DatasetHandle> {
        match self {
            DatasetSpec::MnistIdx {
                dir,
                train_subset,
                test_subset,
            } => {
                let mut h = data::load_mnist_dir(dir, Normalization::MNIST)?;
                if let Some(n) = train_subset {
                    h.train = h.train.subset(*n, seed)?;
                }
                if let Some(n) = test_subset {
                    h.test = h.test.subset(*n, seed)?;
                }
                Ok(h)
            }
            DatasetSpec::Synthetic {
                classes,
                dim,
                train_n,
                test_n,
            } => Ok(DatasetHandle {
                train: data::make_synthetic(*classes, *dim, *train_n, seed)?,
                test: data::make_synthetic(*classes, *dim, *test_n, seed.wrapping_add(1))?,
                normalization: Normalization::IDENTITY,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub bits: Vec<u8>,
    pub strategy: Strategy,
    pub explicit_map: Option<String>,
    pub distill: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub quant_lr: f64,
    pub quant_weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub arch: ArchChoice,
    pub dataset: DatasetSpec,
    pub out: PathBuf,
    /// Evaluate every candidate after each epoch (otherwise only at the end).
    pub eval_each_epoch: bool,
    pub msqe_report: bool,
    pub checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            method: t.method,
            bits: t.bits,
            strategy: t.strategy,
            explicit_map: None,
            distill: t.distill,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.sgd.lr,
            momentum: t.sgd.momentum,
            weight_decay: t.sgd.weight_decay,
            quant_lr: t.adam.lr,
            quant_weight_decay: t.adam.weight_decay,
            schedule: t.schedule,
            seed: t.seed,
            arch: ArchChoice::Preset("tiny".into()),
            dataset: DatasetSpec::MnistIdx {
                dir: PathBuf::from("data/mnist"),
                train_subset: Some(5000),
                test_subset: None,
            },
            out: PathBuf::from("runs/default"),
            eval_each_epoch: true,
            msqe_report: false,
            checkpoint: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            bits: self.bits.clone(),
            strategy: self.strategy,
            explicit_map: self.explicit_map.clone(),
            distill: self.distill,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            adam: AdamConfig {
                lr: self.quant_lr,
                weight_decay: self.quant_weight_decay,
                ..AdamConfig::default()
            },
            schedule: self.schedule,
            seed: self.seed,
        }
    }

    /// Every problem with the configuration, checked without touching the
    /// filesystem beyond reads.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train_config().problems();
        match self.arch.resolve() {
            Ok(a) => {
                let (shape, classes) = self.dataset.sample_shape();
                if [a.in_channels, a.height, a.width] != shape {
                    p.push(format!(
                        "architecture expects {}x{}x{} inputs, dataset has {}x{}x{}",
                        a.in_channels, a.height, a.width, shape[0], shape[1], shape[2]
                    ));
                }
                if a.classes != classes {
                    p.push(format!("architecture has {} classes, dataset has {classes}", a.classes));
                }
            }
            Err(e) => p.push(e.to_string()),
        }
        p.extend(self.dataset.problems());
        if self.out.as_os_str().is_empty() {
            p.push("out directory is empty".into());
        } else if self.out.exists() && !self.out.is_dir() {
            p.push(format!("out {} exists and is not a directory", self.out.display()));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Worker count for parallel runs: `MQ_THREADS` if set, else the number of
/// available cores.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("MQ_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(vec![format!(
                "MQ_THREADS must be a positive integer, got {v:?}"
            )])),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
