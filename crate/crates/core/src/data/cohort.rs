//! Synthetic multi-center cohort generator.
//!
//! Each subject gets a pathology from the class prior and a latent
//! `z = μ_path + N(0, I)` in `latent_dim` dimensions. The two sequences see
//! partially shared views `u_k = ρ·z + √(1−ρ²)·ξ_k`, so with coupling `ρ = 0`
//! they are independent. Raw features are `A_k·u_k + b_k + δ_{center,k} + σ·ε`,
//! with sequence-specific mixing `A_k`, a per-center per-sequence offset `δ`
//! and isotropic noise. Missingness is drawn per sequence at center-specific
//! rates, redrawing whenever both sequences would be lost.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::data::labels::{LabelSet, Pathology};
use crate::data::record::{Center, SampleRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSpec {
    pub center: Center,
    pub count: usize,
    /// Probability that the FL sequence is missing.
    pub missing_fl: f64,
    /// Probability that the T1c sequence is missing.
    pub missing_t1c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub centers: Vec<CenterSpec>,
    /// Oligodendroglioma, astrocytoma, glioblastoma.
    pub class_prior: [f64; 3],
    /// Standard deviation of the per-center raw offsets.
    pub center_shift: f64,
    /// Center held out as the independent test set.
    pub independent_center: Center,
    /// Extra factor applied to the independent center's offsets.
    pub independent_shift_multiplier: f64,
    /// Cross-sequence coupling `ρ ∈ [0, 1]`.
    pub coupling: f64,
    pub noise: f64,
    /// Log-scale spread of the per-scan noise level around `noise`.
    pub noise_spread: f64,
    pub raw_dim: usize,
    pub latent_dim: usize,
    /// Standard deviation of the class means in latent space.
    pub class_separation: f64,
    pub seed: u64,
}

/// Per-sequence missing rate giving an incomplete fraction `q` once
/// both-missing draws are rejected: `q = 2r/(1+r)`.
pub fn missing_rate_for_incomplete_fraction(q: f64) -> f64 {
    q / (2.0 - q)
}

impl Default for CohortConfig {
    fn default() -> Self {
        let tcga = missing_rate_for_incomplete_fraction(0.56);
        let hs = missing_rate_for_incomplete_fraction(0.64);
        let spec = |center, count, rate| CenterSpec {
            center,
            count,
            missing_fl: rate,
            missing_t1c: rate,
        };
        Self {
            centers: vec![
                spec(Center::Tcga, 317, tcga),
                spec(Center::Brats, 160, 0.0),
                spec(Center::Rj, 22, 0.0),
                spec(Center::Xh, 12, 0.0),
                spec(Center::Th, 37, 0.0),
                spec(Center::Hs, 693, hs),
            ],
            class_prior: [0.17, 0.28, 0.55],
            center_shift: 0.5,
            independent_center: Center::Brats,
            independent_shift_multiplier: 2.0,
            coupling: 0.9,
            noise: 0.3,
            noise_spread: 0.0,
            raw_dim: 64,
            latent_dim: 16,
            class_separation: 0.4,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn total(&self) -> usize {
        self.centers.iter().map(|c| c.count).sum()
    }

    pub fn center(&self, center: Center) -> Option<&CenterSpec> {
        self.centers.iter().find(|c| c.center == center)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.raw_dim == 0 || self.latent_dim == 0 {
            return bad("raw_dim and latent_dim must be positive".into());
        }
        if self.class_prior.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("class prior {:?} is not a distribution", self.class_prior));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling {} outside [0, 1]", self.coupling));
        }
        for (name, v) in [
            ("center_shift", self.center_shift),
            ("independent_shift_multiplier", self.independent_shift_multiplier),
            ("noise", self.noise),
            ("noise_spread", self.noise_spread),
            ("class_separation", self.class_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        let mut seen = Vec::new();
        for c in &self.centers {
            if seen.contains(&c.center) {
                return bad(format!("center {} listed twice", c.center.as_str()));
            }
            seen.push(c.center);
            for r in [c.missing_fl, c.missing_t1c] {
                if !(0.0..=1.0).contains(&r) {
                    return bad(format!("missing rate {r} for {} outside [0, 1]", c.center.as_str()));
                }
            }
            if c.count > 0 && c.missing_fl >= 1.0 && c.missing_t1c >= 1.0 {
                return bad(format!("center {} would lose both sequences", c.center.as_str()));
            }
        }
        Ok(())
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * gauss(rng)).collect()
}

fn affine(a: &[f64], u: &[f64], b: &[f64]) -> Vec<f64> {
    let l = u.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| bi + a[i * l..(i + 1) * l].iter().zip(u).map(|(x, y)| x * y).sum::<f64>())
        .collect()
}

/// Fixed structure shared by every subject of a cohort.
struct Structure {
    class_means: Vec<Vec<f64>>,
    /// `raw_dim × latent_dim`, one per sequence.
    mixing: [Vec<f64>; 2],
    bias: [Vec<f64>; 2],
    /// Indexed by [`Center::index`], then sequence.
    offsets: Vec<[Vec<f64>; 2]>,
}

impl Structure {
    fn draw<R: Rng + ?Sized>(cfg: &CohortConfig, rng: &mut R) -> Self {
        let (raw, lat) = (cfg.raw_dim, cfg.latent_dim);
        let class_means = (0..3).map(|_| normal_vec(rng, lat, cfg.class_separation)).collect();
        let scale = 1.0 / (lat as f64).sqrt();
        let mixing = [normal_vec(rng, raw * lat, scale), normal_vec(rng, raw * lat, scale)];
        let bias = [normal_vec(rng, raw, 0.5), normal_vec(rng, raw, 0.5)];
        let offsets = Center::ALL
            .iter()
            .map(|&c| {
                let sd = cfg.center_shift
                    * if c == cfg.independent_center {
                        cfg.independent_shift_multiplier
                    } else {
                        1.0
                    };
                [normal_vec(rng, raw, sd), normal_vec(rng, raw, sd)]
            })
            .collect();
        Self {
            class_means,
            mixing,
            bias,
            offsets,
        }
    }
}

/// Generates the cohort; identical configs give identical records.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let st = Structure::draw(cfg, &mut rng);
    let prior = WeightedIndex::new(cfg.class_prior).map_err(|e| Error::Config(format!("class prior: {e}")))?;
    let rho = cfg.coupling;
    let rho_c = (1.0 - rho * rho).max(0.0).sqrt();
    let mut records = Vec::with_capacity(cfg.total());
    for spec in &cfg.centers {
        let offsets = &st.offsets[spec.center.index()];
        for i in 0..spec.count {
            let pathology = Pathology::ALL[prior.sample(&mut rng)];
            let mean = &st.class_means[pathology.index()];
            let z: Vec<f64> = mean
                .iter()
                .map(|&m| m + gauss(&mut rng))
                .collect::<Vec<_>>();
            let mut views = [Vec::new(), Vec::new()];
            for (k, view) in views.iter_mut().enumerate() {
                let u: Vec<f64> = z
                    .iter()
                    .map(|&zj| rho * zj + rho_c * gauss(&mut rng))
                    .collect();
                let mut raw = affine(&st.mixing[k], &u, &st.bias[k]);
                let sigma = cfg.noise * (cfg.noise_spread * gauss(&mut rng)).exp();
                for (j, r) in raw.iter_mut().enumerate() {
                    *r += offsets[k][j] + sigma * gauss(&mut rng);
                }
                *view = raw;
            }
            let (miss_fl, miss_t1c) = loop {
                let a = rng.random_bool(spec.missing_fl);
                let b = rng.random_bool(spec.missing_t1c);
                if !(a && b) {
                    break (a, b);
                }
            };
            let [fl, t1c] = views;
            records.push(SampleRecord {
                id: format!("{}-{:04}", spec.center.as_str(), i),
                center: spec.center,
                fl: (!miss_fl).then_some(fl),
                t1c: (!miss_t1c).then_some(t1c),
                labels: LabelSet::from_pathology(pathology),
            });
        }
        debug!("generated {} records for {}", spec.count, spec.center.as_str());
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CohortConfig {
        CohortConfig {
            centers: vec![
                CenterSpec {
                    center: Center::Tcga,
                    count: 50,
                    missing_fl: 0.3,
                    missing_t1c: 0.3,
                },
                CenterSpec {
                    center: Center::Brats,
                    count: 20,
                    missing_fl: 0.0,
                    missing_t1c: 0.0,
                },
            ],
            raw_dim: 8,
            latent_dim: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_total() {
        assert_eq!(CohortConfig::default().total(), 1241);
    }

    #[test]
    fn missing_rate_inverts_incomplete_fraction() {
        for q in [0.0, 0.3, 0.56, 0.64, 0.9] {
            let r = missing_rate_for_incomplete_fraction(q);
            assert!((2.0 * r / (1.0 + r) - q).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_cohort(&small(3)).unwrap();
        let b = generate_cohort(&small(3)).unwrap();
        let c = generate_cohort(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn every_record_keeps_a_sequence() {
        let mut cfg = small(1);
        cfg.centers[0].missing_fl = 0.9;
        cfg.centers[0].missing_t1c = 0.9;
        for r in generate_cohort(&cfg).unwrap() {
            assert!(r.fl.is_some() || r.t1c.is_some());
            assert!(r.labels.is_consistent());
            for v in [&r.fl, &r.t1c].into_iter().flatten() {
                assert_eq!(v.len(), 8);
            }
        }
    }

    #[test]
    fn zero_rates_give_complete_records() {
        let mut cfg = small(2);
        cfg.centers[0].missing_fl = 0.0;
        cfg.centers[0].missing_t1c = 0.0;
        assert!(generate_cohort(&cfg).unwrap().iter().all(SampleRecord::is_complete));
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = small(0);
        cfg.class_prior = [0.5, 0.5, 0.5];
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = small(0);
        cfg.coupling = 1.5;
        assert!(generate_cohort(&cfg).is_err());
        let mut cfg = small(0);
        cfg.centers[0].missing_fl = 1.0;
        cfg.centers[0].missing_t1c = 1.0;
        assert!(generate_cohort(&cfg).is_err());
    }
}
