//! Generator pretraining, multi-task fine-tuning and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cggm::{pretrain_step, Cggm, ReconLoss, GROUP_PREFIX};
use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, CHECKPOINT_VERSION};
use crate::data::{Mode, SampleRecord, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::loss::{ClassCounts, LogCounts};
use crate::metrics::{compute_metrics, MetricsReport, TaskScores};
use crate::model::{pretrain_modules, GmeNet, Variant};
use crate::optim::AdamW;
use crate::pipeline::config::RunConfig;
use crate::tensor::Tensor2;

const STREAM_PRETRAIN: u64 = 100;
const STREAM_BATCHES: u64 = 101;

/// Records by id.
pub fn index_records(records: &[SampleRecord]) -> BTreeMap<&str, &SampleRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

/// Resolves ids against `index`, failing on unknown ids.
pub fn lookup<'a>(index: &BTreeMap<&str, &'a SampleRecord>, ids: &[String]) -> Result<Vec<&'a SampleRecord>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("record {id} not in dataset")))
        })
        .collect()
}

/// Endless epoch-wise shuffled minibatches over `n` items.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub curve: Vec<ReconLoss<f64>>,
}

/// Stem features of complete records, as `(FL, T1c)` matrices.
pub fn stem_features(model_params: &crate::nn::ParamStore<f64>, stems: (&crate::stem::Stem, &crate::stem::Stem), records: &[&SampleRecord]) -> Result<(Tensor2<f64>, Tensor2<f64>)> {
    let raw = |get: fn(&SampleRecord) -> Option<&Vec<f64>>| -> Result<Tensor2<f64>> {
        let rows: Vec<&Vec<f64>> = records
            .iter()
            .map(|r| get(r).ok_or_else(|| Error::Protocol(format!("record {} is incomplete", r.id))))
            .collect::<Result<_>>()?;
        Tensor2::from_rows(&rows)
    };
    let fl = stems.0.forward(model_params, &raw(|r| r.fl.as_ref())?)?.0;
    let t1c = stems.1.forward(model_params, &raw(|r| r.t1c.as_ref())?)?.0;
    Ok((fl, t1c))
}

/// Self-supervised generator pretraining on complete records with the stems
/// held at their initialization. The checkpoint carries the generator and
/// the stems it was trained against.
pub fn pretrain_cggm(cfg: &RunConfig, records: &[&SampleRecord]) -> Result<PretrainResult> {
    cfg.validate()?;
    if cfg.variant == Variant::NoCggm {
        return Err(Error::Config("variant no_cggm has no generator to pretrain".into()));
    }
    if records.is_empty() {
        return Err(Error::Empty("complete records for pretraining"));
    }
    let (mut ps, stem_fl, stem_t1c, cggm) = pretrain_modules::<f64>(&cfg.model, cfg.seed)?;
    let (fl, t1c) = stem_features(&ps, (&stem_fl, &stem_t1c), records)?;
    let mut opt = AdamW::new(cfg.pretrain_optimizer(), &ps);
    let mut sampler = BatchSampler::new(records.len(), cfg.batch_size, cfg.seed, STREAM_PRETRAIN);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(STREAM_PRETRAIN + 1);
    let mut curve = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let idx = sampler.next_batch();
        let out = pretrain_step(
            &cggm,
            &mut ps,
            &mut opt,
            &fl.select_rows(&idx),
            &t1c.select_rows(&idx),
            cfg.mask_probs(),
            &mut mask_rng,
        )?;
        if !out.loss.total.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction loss at pretraining step {step}")));
        }
        if step % 50 == 0 {
            debug!("pretrain step {step}: L_rec = {:.5}", out.loss.total);
        }
        curve.push(out.loss);
    }
    if let Some(last) = curve.last() {
        info!("pretraining finished: L_rec = {:.5}", last.total);
    }
    let header = CheckpointHeader {
        kind: CheckpointKind::Cggm,
        schema_version: CHECKPOINT_VERSION,
        model: cfg.model,
        variant: None,
        seed: cfg.seed,
        frozen_groups: Vec::new(),
        optimizer: None,
        rng_word_pos: None,
    };
    let keep = |g: &str| g.starts_with(GROUP_PREFIX) || g.starts_with("stem_");
    Ok(PretrainResult {
        checkpoint: Checkpoint::from_params(header, &ps, keep),
        curve,
    })
}

pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[ReconLoss<f64>]) -> Result<()> {
    writeln!(out, "step,mse,kl,cycle,total")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{:.8},{:.8},{:.8},{:.8}", l.mse, l.kl, l.cycle, l.total)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: GmeNet<f64>,
    pub optimizer: AdamW<f64>,
    pub losses: Vec<f64>,
    /// Every record id that contributed a gradient.
    pub seen: BTreeSet<String>,
    pub counts: ClassCounts,
    pub sampler_word_pos: u128,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let m = &self.model;
        let header = CheckpointHeader {
            kind: CheckpointKind::Model,
            schema_version: CHECKPOINT_VERSION,
            model: m.cfg,
            variant: Some(m.variant),
            seed: 0,
            frozen_groups: m.params.groups().into_iter().filter(|g| m.params.is_group_frozen(g)).collect(),
            optimizer: None,
            rng_word_pos: Some(self.sampler_word_pos.to_string()),
        };
        Checkpoint::from_params(header, &m.params, |_| true).with_optimizer(&m.params, &self.optimizer)
    }
}

/// Builds a model for `cfg` and loads a pretrained generator into it.
pub fn build_model(cfg: &RunConfig, cggm: Option<&Checkpoint>) -> Result<GmeNet<f64>> {
    let mut model = GmeNet::new(cfg.model, cfg.variant, cfg.seed)?;
    match (cfg.variant.uses_cggm(), cggm) {
        (true, Some(ck)) => {
            if ck.header.kind != CheckpointKind::Cggm {
                return Err(Error::Format("expected a generator checkpoint".into()));
            }
            if ck.header.model != cfg.model {
                return Err(Error::Config(format!(
                    "generator checkpoint was built for {:?}, run uses {:?}",
                    ck.header.model, cfg.model
                )));
            }
            ck.apply(&mut model.params)?;
            Cggm::freeze(&mut model.params);
        }
        (true, None) => return Err(Error::Config(format!("variant {} needs a pretrained generator", cfg.variant))),
        (false, Some(_)) => return Err(Error::Config("variant no_cggm takes no generator checkpoint".into())),
        (false, None) => {}
    }
    Ok(model)
}

/// Restores a fine-tuned model saved with [`TrainOutcome::checkpoint`].
pub fn load_model(ck: &Checkpoint) -> Result<GmeNet<f64>> {
    if ck.header.kind != CheckpointKind::Model {
        return Err(Error::Format("expected a model checkpoint".into()));
    }
    let variant = ck
        .header
        .variant
        .ok_or_else(|| Error::Format("model checkpoint without a variant".into()))?;
    let mut model = GmeNet::new(ck.header.model, variant, ck.header.seed)?;
    let loaded = ck.apply(&mut model.params)?;
    if loaded != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint restores {loaded} of {} parameters",
            model.params.len()
        )));
    }
    for g in model.params.groups() {
        model.params.unfreeze_group(&g);
    }
    for g in &ck.header.frozen_groups {
        model.params.freeze_group(g);
    }
    Ok(model)
}

/// Fine-tunes a model on `train`, with the generator frozen. `plan`, when
/// given, is used to reject any test record before training starts.
pub fn train(
    cfg: &RunConfig,
    train: &[&SampleRecord],
    plan: Option<&SplitPlan>,
    cggm: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(plan) = plan {
        plan.check_no_leakage(train.iter().map(|r| &r.id))?;
    }
    if cfg.mode == Mode::Fs {
        if let Some(r) = train.iter().find(|r| !r.is_complete()) {
            return Err(Error::Protocol(format!("incomplete record {} in a full-sequence training set", r.id)));
        }
    }
    let mut model = build_model(cfg, cggm)?;
    let counts = ClassCounts::from_labels(train.iter().map(|r| &r.labels));
    let log_n = LogCounts::new(&counts, cfg.count_smoothing)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed, STREAM_BATCHES);
    let mut losses = Vec::with_capacity(cfg.train_steps);
    let mut seen = BTreeSet::new();
    for step in 0..cfg.train_steps {
        let batch: Vec<&SampleRecord> = sampler.next_batch().into_iter().map(|i| train[i]).collect();
        seen.extend(batch.iter().map(|r| r.id.clone()));
        model.params.zero_grad();
        let loss = model.loss_and_backward(&batch, &log_n)?;
        opt.step(&mut model.params);
        if step % 100 == 0 {
            debug!("train step {step}: loss = {loss:.5}");
        }
        losses.push(loss);
    }
    if let Some(plan) = plan {
        plan.check_no_leakage(&seen)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        losses,
        seen,
        counts,
        sampler_word_pos: sampler.rng().get_word_pos(),
    })
}

/// Evaluation output: metrics, the scores they came from and record ids.
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<TaskScores>,
    pub ids: Vec<String>,
}

pub fn evaluate(model: &GmeNet<f64>, records: &[&SampleRecord]) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if let Some(r) = records.iter().find(|r| !r.is_complete()) {
        return Err(Error::Protocol(format!("test record {} is incomplete", r.id)));
    }
    let mut scores: Vec<TaskScores> = Task::ALL
        .iter()
        .map(|&task| TaskScores {
            task,
            probs: Vec::with_capacity(records.len()),
            truth: Vec::with_capacity(records.len()),
        })
        .collect();
    for chunk in records.chunks(256) {
        let pred = model.predict(chunk)?;
        for (k, s) in scores.iter_mut().enumerate() {
            let p = &pred.probs[k];
            for (i, r) in chunk.iter().enumerate() {
                s.probs.push(p.row(i).to_vec());
                s.truth.push(r.labels.class(s.task));
            }
        }
    }
    Ok(Evaluation {
        report: compute_metrics(&scores)?,
        scores,
        ids: records.iter().map(|r| r.id.clone()).collect(),
    })
}

/// One row per (record, task): truth, argmax prediction and probabilities.
pub fn write_predictions_csv<W: Write>(out: &mut W, eval: &Evaluation) -> Result<()> {
    writeln!(out, "id,task,truth,pred,p0,p1,p2")?;
    for s in &eval.scores {
        for (i, id) in eval.ids.iter().enumerate() {
            let p = &s.probs[i];
            let cells: Vec<String> = (0..3)
                .map(|c| p.get(c).map_or_else(String::new, |v| format!("{v:.6}")))
                .collect();
            writeln!(
                out,
                "{id},{},{},{},{}",
                s.task.as_str(),
                s.truth[i],
                crate::metrics::argmax(p),
                cells.join(",")
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = BatchSampler::new(10, 5, 1, 0);
        let mut a = s.next_batch();
        a.extend(s.next_batch());
        a.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_is_deterministic() {
        let mut a = BatchSampler::new(30, 7, 4, 2);
        let mut b = BatchSampler::new(30, 7, 4, 2);
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn batch_larger_than_set_is_clamped() {
        let mut s = BatchSampler::new(3, 32, 0, 0);
        assert_eq!(s.next_batch().len(), 3);
    }
}
