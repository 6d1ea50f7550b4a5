//! Training runs, the strategy/distillation grid, audits and error-model
//! sweeps. Every entry point validates fully before creating any file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use multiquant::analysis::{msqe_report, write_msqe_csv, BinModel, ClippingVariant, ErrorModelConfig, MsqeReport};
use multiquant::topology::model::Layout;
use multiquant::topology::{
    build_branch_plan, checkpoint, compute_cost, storage_report, ArchSpec, BodyEncoding, CostRow, MultiQuantModel,
    StorageReport, Strategy,
};
use multiquant::trainer::{build_model, evaluate, train, HistoryRow, Method, TrainReport};
use multiquant::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const COST_FILE: &str = "cost.csv";
pub const STORAGE_FILE: &str = "storage.json";
pub const USAGE_FILE: &str = "usage.csv";
pub const MSQE_FILE: &str = "msqe.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Everything a finished run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// `(bits, test accuracy)` in ascending bits.
    pub accuracy: Vec<(u8, f64)>,
    pub storage: StorageReport,
    pub cost: Vec<CostRow>,
    pub train: TrainReport,
}

impl RunSummary {
    pub fn average(&self) -> f64 {
        self.accuracy.iter().map(|a| a.1).sum::<f64>() / self.accuracy.len() as f64
    }

    pub fn lowest_bit_accuracy(&self) -> f64 {
        self.accuracy[0].1
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "bit", "loss_ce", "loss_kd", "eval_acc"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.bit.to_string(),
            r.loss_ce.to_string(),
            r.loss_kd.map_or(String::new(), |v| v.to_string()),
            r.eval_acc.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-bit rows, then `Avg.` and `Size (MB)` (two decimals).
pub fn write_accuracy(path: &Path, accuracy: &[(u8, f64)], size_mb: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "value"])?;
    for (b, a) in accuracy {
        w.write_record([b.to_string(), a.to_string()])?;
    }
    let avg = accuracy.iter().map(|a| a.1).sum::<f64>() / accuracy.len() as f64;
    w.write_record(["Avg.".to_string(), avg.to_string()])?;
    w.write_record(["Size (MB)".to_string(), format!("{size_mb:.2}")])?;
    w.flush()?;
    Ok(())
}

pub fn write_cost(path: &Path, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bits", "branches", "multiquant", "reference", "parity"])?;
    for r in rows {
        w.write_record([
            r.bits.to_string(),
            r.branches.to_string(),
            r.multiquant.to_string(),
            r.reference.to_string(),
            r.parity().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Branch usage counts of the model's map (empty for a single body).
pub fn usage_rows(model: &MultiQuantModel) -> Vec<(String, String, usize)> {
    match model.layout() {
        Layout::Branches { plan, map } => map
            .usage_counts(plan)
            .into_iter()
            .map(|(id, n)| (map.strategy().name().to_string(), id.to_string(), n))
            .collect(),
        Layout::Single { .. } => Vec::new(),
    }
}

fn write_usage(path: &Path, rows: &[(String, String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "branch", "usage"])?;
    for (s, id, n) in rows {
        w.write_record([s.clone(), id.clone(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// MAC-bit cost per candidate. A single body has no map; its rows use the
/// reference cost.
pub fn cost_rows(model: &MultiQuantModel) -> Result<Vec<CostRow>> {
    let arch = model.arch();
    let full = arch.body_macs(1.0)?;
    let half = arch.body_macs(0.5)?;
    match model.layout() {
        Layout::Branches { map, .. } => model
            .candidates()
            .iter()
            .map(|&b| compute_cost(map, b, full, half))
            .collect(),
        Layout::Single { .. } => Ok(model
            .candidates()
            .iter()
            .map(|&b| {
                let reference = b as u64 * b as u64 * full;
                CostRow {
                    bits: b,
                    branches: 1,
                    multiquant: reference,
                    reference,
                }
            })
            .collect()),
    }
}

/// Storage for a trained model. AdaBit keeps low-bit codes at the largest
/// candidate; Any-Precision keeps full-precision weights.
pub fn storage_for(model: &MultiQuantModel, method: Method) -> StorageReport {
    let enc = match method {
        Method::AdaBit => BodyEncoding::Packed {
            bits: *model.candidates().iter().max().expect("candidates"),
        },
        _ => BodyEncoding::of(model),
    };
    storage_report(model, enc)
}

/// Trains and evaluates one configuration, writing all artifacts into
/// `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let arch = cfg.arch.resolve()?;
    let data = cfg.dataset.load(cfg.seed)?;
    let tcfg = cfg.train_config();
    let mut model = build_model(&arch, &tcfg)?;
    create_out(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;

    let eval = cfg.eval_each_epoch.then_some(&data.test);
    let report = train(&mut model, &data.train, eval, &tcfg)?;
    write_history(&cfg.out.join(HISTORY_FILE), &report.history)?;
    if cfg.checkpoint {
        checkpoint::save(&model, &cfg.out.join(CHECKPOINT_FILE))?;
    }
    if let Some(why) = &report.aborted {
        return Err(Error::NonFinite {
            context: format!("{why}; last good model kept in {}", cfg.out.display()),
        });
    }

    let mut bits = model.candidates().to_vec();
    bits.sort_unstable();
    let accuracy = bits
        .iter()
        .map(|&b| Ok((b, evaluate(&model, &data.test, b)?)))
        .collect::<Result<Vec<_>>>()?;
    let storage = storage_for(&model, cfg.method);
    let cost = cost_rows(&model)?;
    write_accuracy(&cfg.out.join(ACCURACY_FILE), &accuracy, storage.size_mb())?;
    write_cost(&cfg.out.join(COST_FILE), &cost)?;
    fs::write(cfg.out.join(STORAGE_FILE), serde_json::to_string_pretty(&storage)?)?;
    write_usage(&cfg.out.join(USAGE_FILE), &usage_rows(&model))?;
    if cfg.msqe_report {
        write_msqe_csv(
            &cfg.out.join(MSQE_FILE),
            &msqe_sweep(&bits, &[1.0, 2.0, 3.0], &DEFAULT_VARIANTS, 1_000_000, cfg.seed)?,
        )?;
    }
    let summary = RunSummary {
        dir: cfg.out.clone(),
        accuracy,
        storage,
        cost,
        train: report,
    };
    let text = crate::report::render_run(&crate::report::load_run(&cfg.out)?);
    fs::write(cfg.out.join(SUMMARY_FILE), &text)?;
    Ok(summary)
}

/// Both bin models with squared clipping.
pub const DEFAULT_VARIANTS: [(ClippingVariant, BinModel); 2] = [
    (ClippingVariant::Squared, BinModel::Exact),
    (ClippingVariant::Squared, BinModel::PowerOfTwo),
];

/// Analytic and Monte-Carlo error for every `(b, u, variant)`.
pub fn msqe_sweep(
    bits: &[u8],
    us: &[f64],
    variants: &[(ClippingVariant, BinModel)],
    samples: usize,
    seed: u64,
) -> Result<Vec<MsqeReport>> {
    let mut rows = Vec::new();
    for &b in bits {
        for &u in us {
            for &(clip, bins) in variants {
                let c = ErrorModelConfig::new(b, u)
                    .with_variant(clip, bins)
                    .with_samples(samples, seed);
                rows.push(msqe_report(&c)?);
            }
        }
    }
    Ok(rows)
}

/// One cell of the strategy/distillation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub distill: bool,
    pub seed: u64,
    pub bits: u8,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Mean lowest-bit accuracy per `(strategy, distill)`.
    pub lowest_bit_mean: BTreeMap<(String, bool), f64>,
}

impl AblationSummary {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let lowest = rows.iter().map(|r| r.bits).min().unwrap_or(0);
        let mut acc: BTreeMap<(String, bool), (f64, usize)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.bits == lowest) {
            let e = acc.entry((r.strategy.name().to_string(), r.distill)).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        AblationSummary {
            rows,
            lowest_bit_mean: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        }
    }

    fn mean(&self, strategy: &str, distill: bool) -> Option<f64> {
        self.lowest_bit_mean.get(&(strategy.to_string(), distill)).copied()
    }

    /// Amortized minus serial, both with distillation.
    pub fn selection_delta(&self) -> Option<f64> {
        Some(self.mean("amortized", true)? - self.mean("serial", true)?)
    }

    /// With minus without distillation, both amortized.
    pub fn distill_delta(&self) -> Option<f64> {
        Some(self.mean("amortized", true)? - self.mean("amortized", false)?)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("strategy   distill  lowest-bit mean acc\n");
        for ((st, d), m) in &self.lowest_bit_mean {
            s.push_str(&format!("{st:<10} {:<8} {:.4}\n", if *d { "on" } else { "off" }, m));
        }
        if let Some(d) = self.selection_delta() {
            s.push_str(&format!("amortized - serial (distill on): {d:+.4}\n"));
        }
        if let Some(d) = self.distill_delta() {
            s.push_str(&format!("distill on - off (amortized): {d:+.4}\n"));
        }
        s
    }
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "distill", "seed", "bits", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            if r.distill { "on" } else { "off" }.to_string(),
            r.seed.to_string(),
            r.bits.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The four strategy x distillation configurations for every seed, each
/// in its own subdirectory of `base.out`.
pub fn ablation_configs(base: &RunConfig, seeds: &[u64]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for strategy in [Strategy::Amortized, Strategy::Serial] {
        for distill in [true, false] {
            for &seed in seeds {
                let name = format!(
                    "{}-distill-{}/seed-{seed}",
                    strategy.name(),
                    if distill { "on" } else { "off" }
                );
                out.push(RunConfig {
                    method: Method::MultiQuant,
                    strategy,
                    explicit_map: None,
                    distill,
                    seed,
                    out: base.out.join(name),
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Runs `configs` on up to `threads` workers, returning results in input
/// order.
pub fn run_many(configs: &[RunConfig], threads: usize) -> Vec<Result<RunSummary>> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(cfg) = configs.get(i) else { break };
                log::info!("run {} of {}: {}", i + 1, configs.len(), cfg.out.display());
                let r = run_experiment(cfg);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every run finishes"))
        .collect()
}

pub fn ablate(base: &RunConfig, seeds: &[u64], threads: usize) -> Result<AblationSummary> {
    if seeds.is_empty() {
        return Err(Error::Config(vec!["ablation needs at least one seed".into()]));
    }
    if base.method != Method::MultiQuant {
        return Err(Error::Config(vec!["ablation applies to method multiquant".into()]));
    }
    let configs = ablation_configs(base, seeds);
    let mut problems = Vec::new();
    for c in &configs {
        problems.extend(c.problems().into_iter().map(|p| format!("{}: {p}", c.out.display())));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rows = Vec::new();
    for (cfg, r) in configs.iter().zip(run_many(&configs, threads)) {
        let r = r?;
        for &(bits, accuracy) in &r.accuracy {
            rows.push(AblationRow {
                strategy: cfg.strategy,
                distill: cfg.distill,
                seed: cfg.seed,
                bits,
                accuracy,
            });
        }
    }
    write_ablation(&base.out.join(ABLATION_FILE), &rows)?;
    let summary = AblationSummary::from_rows(rows);
    fs::write(base.out.join("ablation.txt"), summary.render())?;
    Ok(summary)
}

/// Cost and storage of an untrained model built from `cfg`, written to
/// `cfg.out` when `write` is set.
pub fn audit(cfg: &RunConfig, write: bool) -> Result<String> {
    let mut problems = cfg.train_config().problems();
    let arch = match cfg.arch.resolve() {
        Ok(a) => Some(a),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    if write && cfg.out.exists() && !cfg.out.is_dir() {
        problems.push(format!("out {} exists and is not a directory", cfg.out.display()));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let arch: ArchSpec = arch.expect("checked");
    let model = build_model(&arch, &cfg.train_config())?;
    let cost = cost_rows(&model)?;
    let storage = storage_for(&model, cfg.method);
    let usage = usage_rows(&model);
    let mut s = String::new();
    if let Layout::Branches { map, plan } = model.layout() {
        s.push_str(&format!(
            "plan: {} full branches, half branch: {}\n",
            plan.n_full_branches(),
            plan.has_half_branch()
        ));
        s.push_str(&format!("selection ({}): {map}\n", map.strategy().name()));
        s.push_str(&format!("max full-branch usage: {}\n", map.max_full_usage(plan)));
    }
    s.push_str("bits  branches  cost(MAC-bit)  reference  parity\n");
    for r in &cost {
        s.push_str(&format!(
            "{:<5} {:<9} {:<14} {:<10} {}\n",
            r.bits,
            r.branches,
            r.multiquant,
            r.reference,
            r.parity()
        ));
    }
    s.push_str(&format!(
        "storage: body {} params, payload {} B, quantizer headers {} B, activation clips {} B, BN {} B, stem+head {} B, total {:.2} MB, body compression {:.2}x\n",
        storage.body_params,
        storage.body_payload_bytes,
        storage.quantizer_header_bytes,
        storage.act_quantizer_bytes,
        storage.bn_bytes,
        storage.stem_head_bytes,
        storage.size_mb(),
        storage.body_compression_ratio()
    ));
    if write {
        create_out(&cfg.out)?;
        write_cost(&cfg.out.join(COST_FILE), &cost)?;
        fs::write(cfg.out.join(STORAGE_FILE), serde_json::to_string_pretty(&storage)?)?;
        write_usage(&cfg.out.join(USAGE_FILE), &usage)?;
        let mut f = fs::File::create(cfg.out.join("audit.txt"))?;
        f.write_all(s.as_bytes())?;
    }
    Ok(s)
}

/// Candidate bits of a plan, for flags that accept a subset.
pub fn checked_bits(bits: &[u8]) -> Result<Vec<u8>> {
    Ok(build_branch_plan(bits)?.candidates().to_vec())
}
