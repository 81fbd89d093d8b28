//! Finite-difference checks over every composed differentiable path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cggm::{recon_objective, Cggm, Direction};
use crate::data::{generate_cohort, CohortConfig, SampleRecord, Sequence};
use crate::dwefm::Dwefm;
use crate::error::Result;
use crate::loss::{balanced_softmax_loss, ClassCounts, LogCounts};
use crate::model::{GmeNet, ModelConfig, Variant};
use crate::nn::{grad_check, AttentionConfig, GradCheckOptions, GradCheckReport, ParamStore};
use crate::stem::Stem;
use crate::tensor::Tensor2;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub path: String,
    pub report: GradCheckReport,
}

fn features(rows: usize, cols: usize, phase: f64) -> Tensor2<f64> {
    Tensor2::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.61 + phase).sin())
}

fn weighted_sum(y: &Tensor2<f64>, g: &Tensor2<f64>) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Two records of each completeness pattern.
fn mixed_batch(raw_dim: usize) -> Result<Vec<SampleRecord>> {
    let records = generate_cohort(&CohortConfig {
        raw_dim,
        ..CohortConfig::default()
    })?;
    let mut want = [2usize; 3];
    let mut out = Vec::new();
    for r in records {
        let slot = match (r.fl.is_some(), r.t1c.is_some()) {
            (true, true) => 0,
            (true, false) => 1,
            _ => 2,
        };
        if want[slot] > 0 {
            want[slot] -= 1;
            out.push(r);
        }
    }
    Ok(out)
}

fn stem_path(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let stem = Stem::new(&mut ps, "stem", 5, 6, 1e-5, &mut rng);
    let x_id = ps.add("input.x", "input", features(3, 5, 0.0));
    let g = features(3, 6, 1.0);
    grad_check(&mut ps, opts, |ps| {
        let x = ps.value(x_id).clone();
        let (y, cache) = stem.forward(ps, &x)?;
        let dx = stem.backward(ps, &cache, &g)?;
        ps.accumulate(x_id, &dx);
        Ok(weighted_sum(&y, &g))
    })
}

fn generator_path(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let cggm = Cggm::new(&mut ps, AttentionConfig::new(2, 4, 8)?, &mut rng)?;
    let fl_id = ps.add("input.fl", "input", features(4, 8, 0.0));
    let t1c_id = ps.add("input.t1c", "input", features(4, 8, 2.0));
    // The objective treats its data as constants.
    ps.freeze_group("input");
    let masked = [Some(Sequence::Fl), Some(Sequence::T1c), None, Some(Sequence::T1c)];
    grad_check(&mut ps, opts, |ps| {
        let (fl, t1c) = (ps.value(fl_id).clone(), ps.value(t1c_id).clone());
        Ok(recon_objective(&cggm, ps, &fl, &t1c, &masked)?.total)
    })
}

fn fusion_path(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let m = Dwefm::new(&mut ps, 6, 4, 5, 1e-5, &mut rng);
    let fl_id = ps.add("input.fl", "input", features(3, 6, 0.3));
    let t1c_id = ps.add("input.t1c", "input", features(3, 6, 1.7));
    let g = features(3, 5, 2.2);
    grad_check(&mut ps, opts, |ps| {
        let (fl, t1c) = (ps.value(fl_id).clone(), ps.value(t1c_id).clone());
        let (state, cache) = m.forward(ps, &fl, &t1c)?;
        let (d_fl, d_t1c) = m.backward(ps, &cache, &g)?;
        ps.accumulate(fl_id, &d_fl);
        ps.accumulate(t1c_id, &d_t1c);
        Ok(weighted_sum(&state.f_f, &g))
    })
}

fn balanced_softmax_path(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new();
    let z_id = ps.add("logits", "input", Tensor2::row_vector(&[0.3, -1.1, 2.0]));
    let log_n = [10f64.ln(), 3f64.ln(), 50f64.ln()];
    grad_check(&mut ps, opts, |ps| {
        let z = ps.value(z_id).data().to_vec();
        let (l, g) = balanced_softmax_loss(&z, 1, &log_n)?;
        ps.accumulate_slice(z_id, &g);
        Ok(l)
    })
}

/// Whole-network multi-task loss. The generator is left trainable so the
/// imputation path inside the network is checked as well.
fn total_loss_path(variant: Variant, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        raw_dim: 6,
        dim: 8,
        tokens: 4,
        heads: 2,
        expert_dim: 4,
        fused_dim: 6,
        ln_eps: 1e-5,
    };
    let batch = mixed_batch(cfg.raw_dim)?;
    let refs: Vec<&SampleRecord> = batch.iter().collect();
    let counts = ClassCounts {
        idh: [3, 5],
        codel: [6, 2],
        pathology: [2, 3, 4],
    };
    let log_n = LogCounts::new(&counts, false)?;
    let mut model = GmeNet::<f64>::new(cfg, variant, 4)?;
    for dir in [Direction::FlToT1c, Direction::T1cToFl] {
        model.params.unfreeze_group(dir.group());
    }
    let mut params = std::mem::take(&mut model.params);
    grad_check(&mut params, opts, |ps| {
        std::mem::swap(&mut model.params, ps);
        let out = model.loss_and_backward(&refs, &log_n);
        std::mem::swap(&mut model.params, ps);
        out
    })
}

/// Runs every path with default finite-difference settings.
pub fn gradient_suite() -> Result<Vec<GradCheckEntry>> {
    let opts = GradCheckOptions::default();
    let mut entries = vec![
        ("stem".to_string(), stem_path(opts)?),
        ("cggm impute+gate+cycle+recon".to_string(), generator_path(opts)?),
        ("dwefm".to_string(), fusion_path(opts)?),
        ("balanced softmax".to_string(), balanced_softmax_path(opts)?),
    ];
    for variant in Variant::ALL {
        entries.push((format!("total loss ({variant})"), total_loss_path(variant, opts)?));
    }
    Ok(entries
        .into_iter()
        .map(|(path, report)| GradCheckEntry { path, report })
        .collect())
}
