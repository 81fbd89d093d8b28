use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gmenet::checkpoint::Checkpoint;
use gmenet::data::{
    generate_cohort, read_dataset, split_cohort, write_dataset, DatasetHeader, Mode, SampleRecord, SplitConfig,
    SplitPlan, SCHEMA_VERSION,
};
use gmenet::metrics::{write_confusion_csv, write_metrics_csv, write_roc_csv};
use gmenet::model::Variant;
use gmenet::pipeline::{
    ablate, cross_validate, evaluate, gradient_suite, index_records, load_model, lookup, pretrain_cggm,
    pretrain_on_pool, train, write_ablation_csv, write_curve_csv, write_predictions_csv, ConfigFile, RunConfig,
    GRAD_TOLERANCE, INDEPENDENT, INTERNAL,
};

#[derive(Parser)]
#[command(name = "gmenet", version, about = "Incomplete dual-sequence glioma classification on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fs,
    Ms,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fs => Mode::Fs,
            ModeArg::Ms => Mode::Ms,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    #[value(name = "no_cggm")]
    NoCggm,
    #[value(name = "no_dwefm")]
    NoDwefm,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoCggm => Variant::NoCggm,
            VariantArg::NoDwefm => Variant::NoDwefm,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Internal,
    Independent,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSONL.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised generator pretraining on the complete records of the training pool.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reconstruction-loss curve; defaults to `<out>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on the whole training pool.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained generator; required unless the variant is no_cggm.
        #[arg(long)]
        cggm: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation with per-fold and mean metrics on both test sets.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained generator; pretrained on the pool when omitted.
        #[arg(long)]
        cggm: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on one test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Metrics CSV; predictions, ROC and confusion CSVs are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant for each seed and tabulate the test metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable path.
    Gradcheck,
    /// Training-pool sizes of both modes and their ratio.
    Report {
        #[command(flatten)]
        common: Common,
        /// Dataset to inspect; the configured cohort is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ConfigFile> {
    match &common.config {
        Some(p) => ConfigFile::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ConfigFile::default()),
    }
}

fn apply_overrides(
    run: &mut RunConfig,
    mode: Option<ModeArg>,
    variant: Option<VariantArg>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(m) = mode {
        run.mode = m.into();
    }
    if let Some(v) = variant {
        run.variant = v.into();
    }
    if let Some(s) = seed {
        run.seed = s;
    }
    run.validate()?;
    Ok(())
}

struct Dataset {
    records: Vec<SampleRecord>,
    plan: SplitPlan,
}

/// Loads a dataset and splits it. The split is seeded by the dataset itself
/// so every command sees the same partition of a given file.
fn load_dataset(path: &Path, cfg: &ConfigFile) -> Result<Dataset> {
    let (header, records) = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if header.raw_dim != cfg.run.model.raw_dim {
        bail!(
            "dataset has raw_dim {} but the model expects {}",
            header.raw_dim,
            cfg.run.model.raw_dim
        );
    }
    let plan = split_cohort(
        &records,
        &SplitConfig {
            independent_center: cfg.cohort.independent_center,
            folds: cfg.run.folds,
            seed: header.seed,
            ..SplitConfig::default()
        },
    )?;
    plan.validate()?;
    info!(
        "{}: {} records, {} pooled, {} internal test, {} independent test",
        path.display(),
        records.len(),
        plan.pool().len(),
        plan.internal_test.len(),
        plan.independent_test.len()
    );
    Ok(Dataset { records, plan })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// `<dir>/<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let records = generate_cohort(&cfg.cohort)?;
            let header = DatasetHeader {
                raw_dim: cfg.cohort.raw_dim,
                schema_version: SCHEMA_VERSION,
                seed: cfg.cohort.seed,
            };
            write_dataset(&out, header, &records)?;
            info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Pretrain {
            common,
            data,
            out,
            curve,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg.run, None, None, seed)?;
            let ds = load_dataset(&data, &cfg)?;
            let index = index_records(&ds.records);
            let result = pretrain_cggm(&cfg.run, &lookup(&index, &ds.plan.pool())?)?;
            result.checkpoint.save(&out)?;
            let curve = curve.unwrap_or_else(|| sibling(&out, "curve.csv"));
            let mut w = create(&curve)?;
            write_curve_csv(&mut w, &result.curve)?;
            w.flush()?;
            info!("saved generator to {} and curve to {}", out.display(), curve.display());
        }
        Command::Train {
            common,
            data,
            cggm,
            mode,
            variant,
            seed,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg.run, mode, variant, seed)?;
            let ds = load_dataset(&data, &cfg)?;
            let ck = cggm.as_deref().map(load_checkpoint).transpose()?;
            let index = index_records(&ds.records);
            let train_set = lookup(&index, &ds.plan.train_ids(None, cfg.run.mode))?;
            let outcome = train(&cfg.run, &train_set, Some(&ds.plan), ck.as_ref())?;
            outcome.checkpoint().save(&out)?;
            info!(
                "trained {} ({}) on {} records; final loss {:.5}",
                cfg.run.variant,
                cfg.run.mode,
                train_set.len(),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Cv {
            common,
            data,
            cggm,
            mode,
            variant,
            seed,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg.run, mode, variant, seed)?;
            let ds = load_dataset(&data, &cfg)?;
            let ck = match (cfg.run.variant.uses_cggm(), cggm) {
                (true, Some(p)) => Some(load_checkpoint(&p)?),
                (true, None) => Some(pretrain_on_pool(&cfg.run, &ds.records, &ds.plan)?),
                (false, Some(_)) => bail!("variant no_cggm takes no generator"),
                (false, None) => None,
            };
            let result = cross_validate(&cfg.run, &ds.records, &ds.plan, ck.as_ref())?;
            let mut w = create(&out)?;
            result.write_csv(&mut w)?;
            w.flush()?;
            for split in [INTERNAL, INDEPENDENT] {
                if let Some(auc) = result.mean.get(split).mean_auc() {
                    println!("{split}\tmean_auc\t{auc:.4}");
                }
            }
        }
        Command::Eval {
            common,
            model,
            data,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let model = load_model(&load_checkpoint(&model)?)?;
            let (name, ids) = match split {
                SplitArg::Internal => (INTERNAL, &ds.plan.internal_test),
                SplitArg::Independent => (INDEPENDENT, &ds.plan.independent_test),
            };
            let index = index_records(&ds.records);
            let eval = evaluate(&model, &lookup(&index, ids)?)?;
            let rows = [(name.to_string(), &eval.report)];
            let mut w = create(&out)?;
            write_metrics_csv(&mut w, &rows)?;
            w.flush()?;
            let mut w = create(&sibling(&out, "predictions.csv"))?;
            write_predictions_csv(&mut w, &eval)?;
            w.flush()?;
            let mut w = create(&sibling(&out, "roc.csv"))?;
            write_roc_csv(&mut w, &eval.scores)?;
            w.flush()?;
            let mut w = create(&sibling(&out, "confusion.csv"))?;
            write_confusion_csv(&mut w, &rows)?;
            w.flush()?;
            if let Some(auc) = eval.report.mean_auc() {
                println!("{name}\tmean_auc\t{auc:.4}");
            }
        }
        Command::Ablate {
            common,
            data,
            mode,
            seeds,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg.run, mode, None, None)?;
            if seeds.is_empty() {
                bail!("at least one seed is needed");
            }
            let ds = load_dataset(&data, &cfg)?;
            let rows = ablate(&cfg.run, &ds.records, &ds.plan, &seeds)?;
            let mut w = create(&out)?;
            write_ablation_csv(&mut w, &rows)?;
            w.flush()?;
        }
        Command::Gradcheck => {
            let entries = gradient_suite()?;
            let mut failed = 0;
            for e in &entries {
                let ok = e.report.passes(GRAD_TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{}\t{}\tmax_rel_error={:.3e}\tchecked={}",
                    if ok { "PASS" } else { "FAIL" },
                    e.path,
                    e.report.max_rel_error,
                    e.report.checked
                );
            }
            if failed > 0 {
                bail!("{failed} gradient path(s) exceed relative error {GRAD_TOLERANCE:e}");
            }
        }
        Command::Report { common, data } => {
            let cfg = load_config(&common)?;
            let (records, seed) = match data {
                Some(p) => {
                    let (header, records) = read_dataset(&p)?;
                    (records, header.seed)
                }
                None => (generate_cohort(&cfg.cohort)?, cfg.cohort.seed),
            };
            let plan = split_cohort(
                &records,
                &SplitConfig {
                    independent_center: cfg.cohort.independent_center,
                    folds: cfg.run.folds,
                    seed,
                    ..SplitConfig::default()
                },
            )?;
            println!("{}", plan.expansion(&records));
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
