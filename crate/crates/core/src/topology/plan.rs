//! Branch inventory and the per-bit-width selection sets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{BRANCH_WEIGHT_BITS, MAX_BITS};

/// A 2-bit body copy. Full branches are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    Full(usize),
    Half,
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchId::Full(i) => write!(f, "{i}"),
            BranchId::Half => f.write_str("H"),
        }
    }
}

impl std::str::FromStr for BranchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("h") {
            return Ok(BranchId::Half);
        }
        match s.parse::<usize>() {
            Ok(i) if i >= 1 => Ok(BranchId::Full(i)),
            _ => Err(Error::Selection(format!("bad branch identifier {s:?}"))),
        }
    }
}

/// Sorted, deduplicated candidate bit-widths.
pub fn normalize_bits(bits: &[u8]) -> Result<Vec<u8>> {
    if bits.is_empty() {
        return Err(Error::Bits("no bit-width candidates".into()));
    }
    if let Some(b) = bits.iter().find(|&&b| !(BRANCH_WEIGHT_BITS..=MAX_BITS).contains(&b)) {
        return Err(Error::Bits(format!(
            "candidate {b} outside {BRANCH_WEIGHT_BITS}..={MAX_BITS}; a 1-bit width has no 2-bit composition"
        )));
    }
    let mut v = bits.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Parses `"2,4,8"`.
pub fn parse_bits(s: &str) -> Result<Vec<u8>> {
    let bits = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<u8>()
                .map_err(|_| Error::Bits(format!("not a bit-width: {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_bits(&bits)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchPlan {
    bit_candidates: Vec<u8>,
    n_full_branches: usize,
    has_half_branch: bool,
}

pub fn build_branch_plan(bits: &[u8]) -> Result<BranchPlan> {
    let bit_candidates = normalize_bits(bits)?;
    let max = *bit_candidates.last().expect("nonempty");
    Ok(BranchPlan {
        n_full_branches: (max / 2) as usize,
        has_half_branch: bit_candidates.iter().any(|b| b % 2 == 1),
        bit_candidates,
    })
}

impl BranchPlan {
    pub fn candidates(&self) -> &[u8] {
        &self.bit_candidates
    }

    pub fn max_bits(&self) -> u8 {
        *self.bit_candidates.last().expect("nonempty")
    }

    pub fn n_full_branches(&self) -> usize {
        self.n_full_branches
    }

    pub fn has_half_branch(&self) -> bool {
        self.has_half_branch
    }

    pub fn contains(&self, b: u8) -> bool {
        self.bit_candidates.binary_search(&b).is_ok()
    }

    /// Every branch in index order: full branches, then the half branch.
    pub fn branches(&self) -> Vec<BranchId> {
        let mut v: Vec<_> = (1..=self.n_full_branches).map(BranchId::Full).collect();
        if self.has_half_branch {
            v.push(BranchId::Half);
        }
        v
    }

    pub fn width_factor(&self, id: BranchId) -> f64 {
        match id {
            BranchId::Full(_) => 1.0,
            BranchId::Half => 0.5,
        }
    }

    fn full_needed(b: u8) -> usize {
        (b / 2) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Serial,
    Amortized,
    Explicit,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::Amortized => "amortized",
            Strategy::Explicit => "explicit",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Strategy::Serial),
            "amortized" => Ok(Strategy::Amortized),
            "explicit" => Ok(Strategy::Explicit),
            _ => Err(Error::Selection(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMap {
    strategy: Strategy,
    sets: BTreeMap<u8, Vec<BranchId>>,
}

impl SelectionMap {
    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Selected branches for `b`, in index order.
    pub fn get(&self, b: u8) -> Result<&[BranchId]> {
        self.sets.get(&b).map(|v| v.as_slice()).ok_or(Error::NotACandidate(b))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &[BranchId])> {
        self.sets.iter().map(|(b, v)| (*b, v.as_slice()))
    }

    /// Number of candidate bit-widths whose set contains `id`.
    pub fn usage_count(&self, id: BranchId) -> usize {
        self.sets.values().filter(|s| s.contains(&id)).count()
    }

    /// Usage count of every branch of `plan`, in index order.
    pub fn usage_counts(&self, plan: &BranchPlan) -> Vec<(BranchId, usize)> {
        plan.branches()
            .into_iter()
            .map(|id| (id, self.usage_count(id)))
            .collect()
    }

    /// Largest usage count over the full branches.
    pub fn max_full_usage(&self, plan: &BranchPlan) -> usize {
        (1..=plan.n_full_branches())
            .map(|i| self.usage_count(BranchId::Full(i)))
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for SelectionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .sets
            .iter()
            .map(|(b, s)| {
                let ids: Vec<String> = s.iter().map(|i| i.to_string()).collect();
                format!("{b}:{{{}}}", ids.join(","))
            })
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

fn with_half(b: u8, mut full: Vec<BranchId>) -> Vec<BranchId> {
    if b % 2 == 1 {
        full.push(BranchId::Half);
    }
    full
}

/// Serial or amortized map for `plan`. Use [`explicit_selection_map`] for a
/// user-supplied map.
pub fn build_selection_map(plan: &BranchPlan, strategy: Strategy) -> Result<SelectionMap> {
    let sets = match strategy {
        Strategy::Serial => plan
            .candidates()
            .iter()
            .map(|&b| {
                let full = (1..=BranchPlan::full_needed(b)).map(BranchId::Full).collect();
                (b, with_half(b, full))
            })
            .collect(),
        Strategy::Amortized => amortized_sets(plan),
        Strategy::Explicit => return Err(Error::Selection("explicit strategy needs a user-supplied map".into())),
    };
    let map = SelectionMap { strategy, sets };
    validate(plan, &map)?;
    Ok(map)
}

/// Greedy load balancing. The largest candidate takes every full branch;
/// the rest are assigned from smallest to largest, each picking the subset
/// of full branches that minimizes, in order: the running maximum usage
/// count, the accumulated error burden `Σ 2^{-2b}` already carried by the
/// chosen branches, and the branch indices lexicographically.
fn amortized_sets(plan: &BranchPlan) -> BTreeMap<u8, Vec<BranchId>> {
    let n = plan.n_full_branches();
    let max = plan.max_bits();
    let mut usage = vec![1usize; n];
    let mut burden = vec![burden_of(max); n];
    let mut sets = BTreeMap::new();
    sets.insert(max, with_half(max, (1..=n).map(BranchId::Full).collect()));
    for &b in plan.candidates().iter().filter(|&&b| b != max) {
        let k = BranchPlan::full_needed(b);
        let mut best: Option<(usize, f64, Vec<usize>)> = None;
        for combo in combinations(n, k) {
            let peak = (0..n)
                .map(|i| usage[i] + combo.contains(&i) as usize)
                .max()
                .unwrap_or(0);
            let load: f64 = combo.iter().map(|&i| burden[i]).sum();
            // Combinations arrive in lexicographic order, so the first
            // minimum wins ties. Burdens are dyadic and sum exactly.
            if best.as_ref().is_none_or(|(p, l, _)| (peak, load) < (*p, *l)) {
                best = Some((peak, load, combo));
            }
        }
        let (_, _, combo) = best.expect("k <= n");
        for &i in &combo {
            usage[i] += 1;
            burden[i] += burden_of(b);
        }
        sets.insert(b, with_half(b, combo.iter().map(|&i| BranchId::Full(i + 1)).collect()));
    }
    sets
}

fn burden_of(b: u8) -> f64 {
    2f64.powi(-2 * b as i32)
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Validates a user-supplied map against `plan`.
pub fn explicit_selection_map(plan: &BranchPlan, sets: BTreeMap<u8, Vec<BranchId>>) -> Result<SelectionMap> {
    let sets = sets
        .into_iter()
        .map(|(b, mut s)| {
            s.sort();
            (b, s)
        })
        .collect();
    let map = SelectionMap {
        strategy: Strategy::Explicit,
        sets,
    };
    validate(plan, &map)?;
    Ok(map)
}

/// Rebuilds a stored map, keeping its strategy tag.
pub(crate) fn restore_selection_map(
    plan: &BranchPlan,
    strategy: Strategy,
    sets: BTreeMap<u8, Vec<BranchId>>,
) -> Result<SelectionMap> {
    let mut map = explicit_selection_map(plan, sets)?;
    map.strategy = strategy;
    Ok(map)
}

/// Parses `"2:1;4:2,3;8:1,2,3,4"` (half branch written `H`).
pub fn parse_explicit_map(s: &str) -> Result<BTreeMap<u8, Vec<BranchId>>> {
    let mut out = BTreeMap::new();
    for entry in s.split(';').filter(|e| !e.trim().is_empty()) {
        let (b, ids) = entry
            .split_once(':')
            .ok_or_else(|| Error::Selection(format!("entry {entry:?} lacks ':'")))?;
        let b: u8 = b
            .trim()
            .parse()
            .map_err(|_| Error::Selection(format!("bad bit-width in {entry:?}")))?;
        let ids = ids
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<BranchId>>>()?;
        if out.insert(b, ids).is_some() {
            return Err(Error::Selection(format!("bit-width {b} listed twice")));
        }
    }
    Ok(out)
}

fn validate(plan: &BranchPlan, map: &SelectionMap) -> Result<()> {
    let keys: Vec<u8> = map.sets.keys().copied().collect();
    if keys != plan.candidates() {
        return Err(Error::Selection(format!(
            "map covers {keys:?}, candidates are {:?}",
            plan.candidates()
        )));
    }
    for (&b, set) in &map.sets {
        let mut seen = set.clone();
        seen.dedup();
        if seen.len() != set.len() {
            return Err(Error::Selection(format!("P({b}) repeats a branch")));
        }
        let full = set.iter().filter(|i| matches!(i, BranchId::Full(_))).count();
        let half = set.contains(&BranchId::Half);
        if full != BranchPlan::full_needed(b) || half != (b % 2 == 1) {
            return Err(Error::Selection(format!(
                "P({b}) must hold {} full branch(es){}; got {}",
                BranchPlan::full_needed(b),
                if b % 2 == 1 { " plus H" } else { "" },
                set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            )));
        }
        if let Some(bad) = set.iter().find(|i| match i {
            BranchId::Full(j) => *j == 0 || *j > plan.n_full_branches(),
            BranchId::Half => !plan.has_half_branch(),
        }) {
            return Err(Error::Selection(format!("P({b}) names unknown branch {bad}")));
        }
    }
    let top = &map.sets[&plan.max_bits()];
    if top.iter().filter(|i| matches!(i, BranchId::Full(_))).count() != plan.n_full_branches() {
        return Err(Error::Selection(
            "the largest bit-width must use every full branch".into(),
        ));
    }
    Ok(())
}
