//! Cross-validation and ablation drivers.

use std::io::Write;

use log::info;

use crate::checkpoint::Checkpoint;
use crate::data::{Mode, SampleRecord, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{average_reports, metrics_row, MetricsReport};
use crate::model::Variant;
use crate::pipeline::config::RunConfig;
use crate::pipeline::train::{evaluate, index_records, lookup, pretrain_cggm, train};

pub const INTERNAL: &str = "internal";
pub const INDEPENDENT: &str = "independent";

/// Reports on both test sets for one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReports {
    pub internal: MetricsReport,
    pub independent: MetricsReport,
}

impl SplitReports {
    pub fn get(&self, split: &str) -> &MetricsReport {
        if split == INTERNAL {
            &self.internal
        } else {
            &self.independent
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<SplitReports>,
    pub mean: SplitReports,
}

impl CvResult {
    /// CSV with one block per fold (`split` column `fold{k}/...`) and the means.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", crate::metrics::METRICS_HEADER)?;
        let mut emit = |label: String, r: &SplitReports| -> Result<()> {
            for split in [INTERNAL, INDEPENDENT] {
                for t in &r.get(split).tasks {
                    writeln!(out, "{}", metrics_row(&format!("{label}/{split}"), t))?;
                }
            }
            Ok(())
        };
        for (k, f) in self.folds.iter().enumerate() {
            emit(format!("fold{k}"), f)?;
        }
        emit("mean".into(), &self.mean)
    }
}

/// Generator pretraining on the complete records of the cross-validation
/// pool, which never touches a test record.
pub fn pretrain_on_pool(cfg: &RunConfig, records: &[SampleRecord], plan: &SplitPlan) -> Result<Checkpoint> {
    let index = index_records(records);
    let pool = lookup(&index, &plan.pool())?;
    Ok(pretrain_cggm(cfg, &pool)?.checkpoint)
}

/// Trains once on `train_ids` and evaluates on both test sets.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    records: &[SampleRecord],
    plan: &SplitPlan,
    train_ids: &[String],
    cggm: Option<&Checkpoint>,
) -> Result<SplitReports> {
    let index = index_records(records);
    let train_set = lookup(&index, train_ids)?;
    let outcome = train(cfg, &train_set, Some(plan), cggm)?;
    let internal = evaluate(&outcome.model, &lookup(&index, &plan.internal_test)?)?;
    let independent = evaluate(&outcome.model, &lookup(&index, &plan.independent_test)?)?;
    Ok(SplitReports {
        internal: internal.report,
        independent: independent.report,
    })
}

/// Trains one model per fold in `cfg.mode` and averages the test reports.
pub fn cross_validate(
    cfg: &RunConfig,
    records: &[SampleRecord],
    plan: &SplitPlan,
    cggm: Option<&Checkpoint>,
) -> Result<CvResult> {
    plan.validate()?;
    if plan.num_folds() != cfg.folds {
        return Err(Error::Config(format!(
            "split has {} folds, config asks for {}",
            plan.num_folds(),
            cfg.folds
        )));
    }
    let mut folds = Vec::with_capacity(plan.num_folds());
    for k in 0..plan.num_folds() {
        let ids = plan.train_ids(Some(k), cfg.mode);
        // A fold's held-out share must stay out of its own training set.
        if ids.iter().any(|id| plan.fold_ids(k).contains(id)) {
            return Err(Error::Protocol(format!("fold {k} leaks into its training set")));
        }
        info!("fold {k}: training on {} records ({})", ids.len(), cfg.mode);
        folds.push(train_and_evaluate(cfg, records, plan, &ids, cggm)?);
    }
    let avg = |f: fn(&SplitReports) -> &MetricsReport| -> Result<MetricsReport> {
        average_reports(&folds.iter().map(|r| f(r).clone()).collect::<Vec<_>>())
    };
    let mean = SplitReports {
        internal: avg(|r| &r.internal)?,
        independent: avg(|r| &r.independent)?,
    };
    Ok(CvResult { folds, mean })
}

/// One ablation cell: a variant trained with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub reports: SplitReports,
}

/// Trains every variant on the full training pool of `cfg.mode` for each
/// seed. Variants of the same seed share data order, stem initialization
/// and the pretrained generator.
pub fn ablate(cfg: &RunConfig, records: &[SampleRecord], plan: &SplitPlan, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let ids = plan.train_ids(None, cfg.mode);
    for &seed in seeds {
        let base = RunConfig {
            seed,
            variant: Variant::Full,
            ..*cfg
        };
        let ck = pretrain_on_pool(&base, records, plan)?;
        for variant in Variant::ALL {
            let run = RunConfig { variant, ..base };
            let cggm = variant.uses_cggm().then_some(&ck);
            info!("ablation: seed {seed}, variant {variant}");
            rows.push(AblationRow {
                variant,
                seed,
                reports: train_and_evaluate(&run, records, plan, &ids, cggm)?,
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,seed,split,task,acc,auc,spe,sen,n";

pub fn write_ablation_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        for split in [INTERNAL, INDEPENDENT] {
            for t in &r.reports.get(split).tasks {
                writeln!(out, "{},{},{}", r.variant, r.seed, metrics_row(split, t))?;
            }
        }
    }
    Ok(())
}

/// Mean AUC on the independent test set for `mode`, trained on the whole pool.
pub fn mode_comparison(cfg: &RunConfig, records: &[SampleRecord], plan: &SplitPlan) -> Result<[(Mode, SplitReports); 2]> {
    let ck = if cfg.variant.uses_cggm() {
        Some(pretrain_on_pool(cfg, records, plan)?)
    } else {
        None
    };
    let run = |mode: Mode| -> Result<(Mode, SplitReports)> {
        let c = RunConfig { mode, ..*cfg };
        Ok((mode, train_and_evaluate(&c, records, plan, &plan.train_ids(None, mode), ck.as_ref())?))
    };
    Ok([run(Mode::Fs)?, run(Mode::Ms)?])
}
