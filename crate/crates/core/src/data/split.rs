//! Train/test protocol: one center held out entirely as the independent test
//! set, the remaining complete records split 8:2 per center into a
//! cross-validation pool and an internal test set, and the pool partitioned
//! into center-stratified folds. Incomplete records only ever join training.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::record::{Center, SampleRecord};
use crate::error::{Error, Result};

/// Full-sequence or mixed-sequence training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Fs,
    Ms,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fs => "fs",
            Mode::Ms => "ms",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(Mode::Fs),
            "ms" => Ok(Mode::Ms),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected fs or ms)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub independent_center: Center,
    pub pool_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            independent_center: Center::Brats,
            pool_fraction: 0.8,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    /// Cross-validation pool, one id list per fold.
    pub folds: Vec<Vec<String>>,
    pub internal_test: Vec<String>,
    pub independent_test: Vec<String>,
    /// Incomplete records outside the independent center; training-only.
    pub incomplete: Vec<String>,
}

/// Sizes of the training pools under both modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionReport {
    pub fs_train: usize,
    pub ms_train: usize,
    pub internal_test: usize,
    pub independent_test: usize,
    /// Fraction of the MS surplus with at least one sequence missing.
    pub surplus_incomplete_fraction: f64,
}

impl ExpansionReport {
    pub fn ratio(&self) -> f64 {
        self.ms_train as f64 / self.fs_train as f64
    }

    pub fn increase_percent(&self) -> f64 {
        (self.ratio() - 1.0) * 100.0
    }
}

impl fmt::Display for ExpansionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fs_train_n\t{}", self.fs_train)?;
        writeln!(f, "ms_train_n\t{}", self.ms_train)?;
        writeln!(f, "ms_over_fs_ratio\t{:.4}", self.ratio())?;
        writeln!(f, "ms_increase_percent\t{:.1}", self.increase_percent())?;
        writeln!(f, "surplus_incomplete_fraction\t{:.4}", self.surplus_incomplete_fraction)?;
        writeln!(f, "internal_test_n\t{}", self.internal_test)?;
        write!(f, "independent_test_n\t{}", self.independent_test)
    }
}

/// Builds the split. Deterministic in `cfg.seed`.
pub fn split_cohort(records: &[SampleRecord], cfg: &SplitConfig) -> Result<SplitPlan> {
    if cfg.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", cfg.folds)));
    }
    if !(0.0..1.0).contains(&cfg.pool_fraction) || cfg.pool_fraction <= 0.0 {
        return Err(Error::Config(format!("pool fraction {} outside (0, 1)", cfg.pool_fraction)));
    }
    let mut ids = BTreeSet::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Config(format!("duplicate record id {}", r.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut by_center: BTreeMap<Center, Vec<String>> = BTreeMap::new();
    let mut plan = SplitPlan {
        folds: vec![Vec::new(); cfg.folds],
        internal_test: Vec::new(),
        independent_test: Vec::new(),
        incomplete: Vec::new(),
    };
    for r in records {
        match (r.center == cfg.independent_center, r.is_complete()) {
            (true, true) => plan.independent_test.push(r.id.clone()),
            (true, false) => {}
            (false, true) => by_center.entry(r.center).or_default().push(r.id.clone()),
            (false, false) => plan.incomplete.push(r.id.clone()),
        }
    }
    let mut next_fold = 0;
    for (center, mut members) in by_center {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut test = n - (cfg.pool_fraction * n as f64).round() as usize;
        if n < 5 {
            warn!("center {} has only {n} complete records", center.as_str());
        }
        if test == 0 && n >= 2 {
            warn!("center {} gets a forced internal test share of 1", center.as_str());
            test = 1;
        }
        let pool = members.split_off(test);
        plan.internal_test.extend(members);
        for id in pool {
            plan.folds[next_fold % cfg.folds].push(id);
            next_fold += 1;
        }
    }
    plan.validate()?;
    Ok(plan)
}

impl SplitPlan {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    /// Every id in the cross-validation pool.
    pub fn pool(&self) -> Vec<String> {
        self.folds.iter().flatten().cloned().collect()
    }

    /// Training ids for `fold` (`None` trains on the whole pool).
    pub fn train_ids(&self, fold: Option<usize>, mode: Mode) -> Vec<String> {
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(k, _)| Some(*k) != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        if mode == Mode::Ms {
            ids.extend(self.incomplete.iter().cloned());
        }
        ids
    }

    /// Held-out part of the pool for `fold`.
    pub fn fold_ids(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn test_ids(&self) -> impl Iterator<Item = &String> {
        self.internal_test.iter().chain(&self.independent_test)
    }

    /// Checks pairwise disjointness of every partition.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, &'static str> = BTreeMap::new();
        let parts = self
            .folds
            .iter()
            .map(|f| ("fold", f))
            .chain([
                ("internal test", &self.internal_test),
                ("independent test", &self.independent_test),
                ("incomplete", &self.incomplete),
            ]);
        for (name, ids) in parts {
            for id in ids {
                if let Some(prev) = seen.insert(id, name) {
                    return Err(Error::Protocol(format!("record {id} appears in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    /// Errors if any training id is a test id.
    pub fn check_no_leakage<'a>(&self, train: impl IntoIterator<Item = &'a String>) -> Result<()> {
        let test: BTreeSet<&String> = self.test_ids().collect();
        for id in train {
            if test.contains(id) {
                return Err(Error::Protocol(format!("test record {id} used for training")));
            }
        }
        Ok(())
    }

    pub fn expansion(&self, records: &[SampleRecord]) -> ExpansionReport {
        let missing: BTreeSet<&str> = records
            .iter()
            .filter(|r| !r.is_complete())
            .map(|r| r.id.as_str())
            .collect();
        let incomplete = self.incomplete.iter().filter(|id| missing.contains(id.as_str())).count();
        let fs = self.train_ids(None, Mode::Fs).len();
        let ms = self.train_ids(None, Mode::Ms).len();
        let surplus = ms - fs;
        ExpansionReport {
            fs_train: fs,
            ms_train: ms,
            internal_test: self.internal_test.len(),
            independent_test: self.independent_test.len(),
            surplus_incomplete_fraction: if surplus == 0 {
                0.0
            } else {
                incomplete as f64 / surplus as f64
            },
        }
    }
}
