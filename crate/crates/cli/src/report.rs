//! Text reports rebuilt from a run directory's artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use multiquant::topology::{CostRow, StorageReport};
use multiquant::{Error, Result};

use crate::config::RunConfig;
use crate::experiment::{ACCURACY_FILE, CONFIG_FILE, COST_FILE, HISTORY_FILE, STORAGE_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub accuracy: Vec<(u8, f64)>,
    pub size_mb: f64,
    pub cost: Vec<CostRow>,
    pub storage: Option<StorageReport>,
    /// Last recorded `(epoch, bit, loss_ce, loss_kd)` per bit.
    pub final_losses: Vec<(usize, u8, f64, Option<f64>)>,
}

impl RunArtifacts {
    pub fn average(&self) -> f64 {
        self.accuracy.iter().map(|a| a.1).sum::<f64>() / self.accuracy.len().max(1) as f64
    }
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(p))
    }
}

fn bad(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Config(vec![format!("{}: {what}", path.display())])
}

fn read_accuracy(path: &Path) -> Result<(Vec<(u8, f64)>, f64)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut acc = Vec::new();
    let mut size = None;
    for rec in r.records() {
        let rec = rec?;
        let (key, value) = (&rec[0], &rec[1]);
        let v: f64 = value.parse().map_err(|e| bad(path, e))?;
        match key {
            "Avg." => {}
            "Size (MB)" => size = Some(v),
            b => acc.push((b.parse::<u8>().map_err(|e| bad(path, e))?, v)),
        }
    }
    let size = size.ok_or_else(|| bad(path, "no Size (MB) row"))?;
    if acc.is_empty() {
        return Err(bad(path, "no accuracy rows"));
    }
    Ok((acc, size))
}

fn read_cost(path: &Path) -> Result<Vec<CostRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<u64> { rec[i].parse::<u64>().map_err(|e| bad(path, e)) };
        rows.push(CostRow {
            bits: f(0)? as u8,
            branches: f(1)? as usize,
            multiquant: f(2)?,
            reference: f(3)?,
        });
    }
    Ok(rows)
}

fn read_final_losses(path: &Path) -> Result<Vec<(usize, u8, f64, Option<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut last: std::collections::BTreeMap<u8, (usize, f64, Option<f64>)> = Default::default();
    for rec in r.records() {
        let rec = rec?;
        let epoch: usize = rec[0].parse().map_err(|e| bad(path, e))?;
        let bit: u8 = rec[2].parse().map_err(|e| bad(path, e))?;
        let ce: f64 = rec[3].parse().map_err(|e| bad(path, e))?;
        let kd = if rec[4].is_empty() {
            None
        } else {
            Some(rec[4].parse::<f64>().map_err(|e| bad(path, e))?)
        };
        last.insert(bit, (epoch, ce, kd));
    }
    Ok(last.into_iter().map(|(b, (e, ce, kd))| (e, b, ce, kd)).collect())
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let config = RunConfig::from_file(&require(dir, CONFIG_FILE)?)?;
    let (accuracy, size_mb) = read_accuracy(&require(dir, ACCURACY_FILE)?)?;
    let cost = read_cost(&require(dir, COST_FILE)?)?;
    let storage = match dir.join(STORAGE_FILE) {
        p if p.exists() => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        _ => None,
    };
    let final_losses = match dir.join(HISTORY_FILE) {
        p if p.exists() => read_final_losses(&p)?,
        _ => Vec::new(),
    };
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        config,
        accuracy,
        size_mb,
        cost,
        storage,
        final_losses,
    })
}

pub fn render_run(a: &RunArtifacts) -> String {
    let c = &a.config;
    let mut s = format!(
        "run {}\nmethod {} strategy {} distill {} epochs {} seed {}\n\nbits  accuracy  branches  cost(MAC-bit)  parity\n",
        a.dir.display(),
        c.method.name(),
        c.strategy.name(),
        if c.distill { "on" } else { "off" },
        c.epochs,
        c.seed
    );
    for (b, acc) in &a.accuracy {
        let cost = a.cost.iter().find(|r| r.bits == *b);
        s.push_str(&format!(
            "{:<5} {:<9.4} {:<9} {:<14} {}\n",
            b,
            acc,
            cost.map_or("-".to_string(), |r| r.branches.to_string()),
            cost.map_or("-".to_string(), |r| r.multiquant.to_string()),
            cost.map_or("-".to_string(), |r| r.parity().to_string()),
        ));
    }
    s.push_str(&format!("Avg.  {:.4}\nSize (MB) {:.2}\n", a.average(), a.size_mb));
    if let Some(st) = &a.storage {
        s.push_str(&format!("body compression {:.2}x\n", st.body_compression_ratio()));
    }
    if !a.final_losses.is_empty() {
        s.push_str("\nfinal losses\n");
        for (e, b, ce, kd) in &a.final_losses {
            s.push_str(&format!(
                "epoch {e} bit {b}: ce {ce:.4}{}\n",
                kd.map_or(String::new(), |k| format!(" kd {k:.4}"))
            ));
        }
    }
    s
}

/// Per-bit accuracy of `b` minus `a` for the bits both runs share.
pub fn compare(a: &RunArtifacts, b: &RunArtifacts) -> Vec<(u8, f64, f64, f64)> {
    a.accuracy
        .iter()
        .filter_map(|(bit, x)| {
            b.accuracy
                .iter()
                .find(|(c, _)| c == bit)
                .map(|(_, y)| (*bit, *x, *y, y - x))
        })
        .collect()
}

pub fn render_comparison(a: &RunArtifacts, b: &RunArtifacts) -> String {
    let mut s = format!(
        "A {}\nB {}\n\nbits  A         B         B - A\n",
        a.dir.display(),
        b.dir.display()
    );
    for (bit, x, y, d) in compare(a, b) {
        s.push_str(&format!("{bit:<5} {x:<9.4} {y:<9.4} {d:+.4}\n"));
    }
    s.push_str(&format!(
        "Avg.  {:<9.4} {:<9.4} {:+.4}\n",
        a.average(),
        b.average(),
        b.average() - a.average()
    ));
    s.push_str(&format!("Size (MB) {:.2} vs {:.2}\n", a.size_mb, b.size_mb));
    s
}
