//! Run configuration and the flat `key = value` config file format.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not recognised
//! by either the run or the cohort configuration are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cggm::MaskProbs;
use crate::data::{Center, CohortConfig, Mode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Fine-tuning optimizer.
    pub optimizer: AdamWConfig,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub train_steps: usize,
    pub mask_fl: f64,
    pub mask_t1c: f64,
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub folds: usize,
    /// Add one to every class count in the balanced softmax.
    pub count_smoothing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            pretrain_lr: 1e-3,
            batch_size: 32,
            pretrain_steps: 500,
            train_steps: 1000,
            mask_fl: 0.5,
            mask_t1c: 0.5,
            mode: Mode::Ms,
            variant: Variant::Full,
            seed: 0,
            folds: 5,
            count_smoothing: false,
        }
    }
}

impl RunConfig {
    pub fn mask_probs(&self) -> MaskProbs {
        MaskProbs {
            fl: self.mask_fl,
            t1c: self.mask_t1c,
        }
    }

    pub fn pretrain_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.pretrain_lr,
            ..self.optimizer
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask_probs().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        let o = &self.optimizer;
        let positive = [("lr", o.lr), ("pretrain_lr", self.pretrain_lr), ("eps", o.eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} = {v} must be positive")));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parses `key = value` lines (a `:` separator is also accepted).
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let sep = line.find(['=', ':']).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        let key = line[..sep].trim().to_string();
        let value = line[sep + 1..].trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("duplicate key {key}"),
            });
        }
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

/// Applies a single key to the run configuration; `Ok(false)` if unknown.
fn apply_run(cfg: &mut RunConfig, key: &str, v: &str) -> Result<bool> {
    let m = &mut cfg.model;
    let o = &mut cfg.optimizer;
    match key {
        "raw_dim" => m.raw_dim = parse(key, v)?,
        "dim" => m.dim = parse(key, v)?,
        "tokens" => m.tokens = parse(key, v)?,
        "heads" => m.heads = parse(key, v)?,
        "expert_dim" => m.expert_dim = parse(key, v)?,
        "fused_dim" => m.fused_dim = parse(key, v)?,
        "ln_eps" => m.ln_eps = parse(key, v)?,
        "lr" => o.lr = parse(key, v)?,
        "beta1" => o.beta1 = parse(key, v)?,
        "beta2" => o.beta2 = parse(key, v)?,
        "adam_eps" => o.eps = parse(key, v)?,
        "weight_decay" => o.weight_decay = parse(key, v)?,
        "pretrain_lr" => cfg.pretrain_lr = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "pretrain_steps" => cfg.pretrain_steps = parse(key, v)?,
        "train_steps" => cfg.train_steps = parse(key, v)?,
        "mask_prob" => {
            cfg.mask_fl = parse(key, v)?;
            cfg.mask_t1c = cfg.mask_fl;
        }
        "mask_fl" => cfg.mask_fl = parse(key, v)?,
        "mask_t1c" => cfg.mask_t1c = parse(key, v)?,
        "mode" => cfg.mode = v.parse()?,
        "variant" => cfg.variant = v.parse()?,
        "seed" => cfg.seed = parse(key, v)?,
        "folds" => cfg.folds = parse(key, v)?,
        "count_smoothing" => cfg.count_smoothing = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Applies a single key to the cohort configuration; `Ok(false)` if unknown.
///
/// Per-center keys take the form `count.TCGA`, `missing_fl.HS`,
/// `missing_t1c.HS` or `missing.HS` (both sequences).
fn apply_cohort(cfg: &mut CohortConfig, key: &str, v: &str) -> Result<bool> {
    if let Some((field, center)) = key.split_once('.') {
        let center = Center::parse(center).ok_or_else(|| Error::Config(format!("unknown center in {key}")))?;
        let idx = match cfg.centers.iter().position(|c| c.center == center) {
            Some(i) => i,
            None => {
                cfg.centers.push(crate::data::CenterSpec {
                    center,
                    count: 0,
                    missing_fl: 0.0,
                    missing_t1c: 0.0,
                });
                cfg.centers.len() - 1
            }
        };
        let spec = &mut cfg.centers[idx];
        match field {
            "count" => spec.count = parse(key, v)?,
            "missing_fl" => spec.missing_fl = parse(key, v)?,
            "missing_t1c" => spec.missing_t1c = parse(key, v)?,
            "missing" => {
                spec.missing_fl = parse(key, v)?;
                spec.missing_t1c = spec.missing_fl;
            }
            _ => return Ok(false),
        }
        return Ok(true);
    }
    match key {
        "class_prior" => {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| parse::<f64>(key, p.trim()))
                .collect::<Result<_>>()?;
            cfg.class_prior = parts
                .try_into()
                .map_err(|_| Error::Config("class_prior needs three comma-separated values".into()))?;
        }
        "center_shift" => cfg.center_shift = parse(key, v)?,
        "independent_center" => {
            cfg.independent_center =
                Center::parse(v).ok_or_else(|| Error::Config(format!("unknown center {v:?}")))?
        }
        "independent_shift_multiplier" => cfg.independent_shift_multiplier = parse(key, v)?,
        "coupling" => cfg.coupling = parse(key, v)?,
        "noise" => cfg.noise = parse(key, v)?,
        "cohort_raw_dim" => cfg.raw_dim = parse(key, v)?,
        "latent_dim" => cfg.latent_dim = parse(key, v)?,
        "class_separation" => cfg.class_separation = parse(key, v)?,
        "noise_spread" => cfg.noise_spread = parse(key, v)?,
        "cohort_seed" => cfg.seed = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Both configurations read from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub cohort: CohortConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            cohort: CohortConfig::default(),
        }
    }
}

impl ConfigFile {
    /// `raw_dim` sets both the model input and the cohort feature width, and
    /// `seed` seeds both unless `cohort_seed` overrides it.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            let run = apply_run(&mut cfg.run, k, v)?;
            let cohort = match k.as_str() {
                "raw_dim" => {
                    cfg.cohort.raw_dim = parse(k, v)?;
                    true
                }
                "seed" if !map.contains_key("cohort_seed") => {
                    cfg.cohort.seed = parse(k, v)?;
                    true
                }
                _ => apply_cohort(&mut cfg.cohort, k, v)?,
            };
            if !run && !cohort {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        cfg.run.validate()?;
        cfg.cohort.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        Self::from_map(&parse_kv(text, path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_and_cohort_keys() {
        let text = "# comment\n\ndim = 32\ntokens: 4\nmode = fs\nvariant = no_dwefm\ncount.TCGA = 10\nmissing.HS = 0.25\nclass_prior = 0.2, 0.3, 0.5\nseed = 7\n";
        let cfg = ConfigFile::parse(text, Path::new("c")).unwrap();
        assert_eq!(cfg.run.model.dim, 32);
        assert_eq!(cfg.run.model.tokens, 4);
        assert_eq!(cfg.run.mode, Mode::Fs);
        assert_eq!(cfg.run.variant, Variant::NoDwefm);
        assert_eq!(cfg.cohort.center(Center::Tcga).unwrap().count, 10);
        assert_eq!(cfg.cohort.center(Center::Hs).unwrap().missing_t1c, 0.25);
        assert_eq!(cfg.cohort.class_prior, [0.2, 0.3, 0.5]);
        assert_eq!((cfg.run.seed, cfg.cohort.seed), (7, 7));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            ConfigFile::parse("bogus = 1", Path::new("c")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ConfigFile::parse("dim 32", Path::new("c")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(ConfigFile::parse("dim = x", Path::new("c")).is_err());
        assert!(ConfigFile::parse("dim = 30\ntokens = 8", Path::new("c")).is_err());
        assert!(ConfigFile::parse("a = 1\na = 2", Path::new("c")).is_err());
    }

    #[test]
    fn default_validates() {
        RunConfig::default().validate().unwrap();
    }
}
