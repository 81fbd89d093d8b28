//! The full network: per-sequence stems, frozen generator for absent
//! sequences, fusion and three classification heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cggm::{Cggm, Direction, DirectionCache};
use crate::data::{SampleRecord, Sequence, Task};
use crate::dwefm::{ConcatFusion, Dwefm, DwefmCache, FusionState};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LogCounts, TaskLogits};
use crate::nn::{softmax, AttentionConfig, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::stem::{Stem, StemCache};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoCggm,
    NoDwefm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCggm, Variant::NoDwefm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCggm => "no_cggm",
            Variant::NoDwefm => "no_dwefm",
        }
    }

    pub fn uses_cggm(self) -> bool {
        self != Variant::NoCggm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected full, no_cggm or no_dwefm)")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub raw_dim: usize,
    pub dim: usize,
    pub tokens: usize,
    pub heads: usize,
    pub expert_dim: usize,
    pub fused_dim: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            raw_dim: 64,
            dim: 64,
            tokens: 8,
            heads: 2,
            expert_dim: 32,
            fused_dim: 64,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.heads, self.tokens, self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.raw_dim, self.dim, self.expert_dim, self.fused_dim].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.dim < 2 || self.expert_dim < 2 {
            return Err(Error::Config("layer-normalized widths need at least 2 columns".into()));
        }
        self.attention()?.validate()
    }
}

/// Independent RNG stream per module so that variants share initializations
/// of the modules they have in common.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_STEM_FL: u64 = 1;
const STREAM_STEM_T1C: u64 = 2;
const STREAM_CGGM: u64 = 3;
const STREAM_FUSION: u64 = 4;
const STREAM_HEADS: u64 = 5;

fn build_stems<S: Scalar>(ps: &mut ParamStore<S>, cfg: &ModelConfig, seed: u64) -> (Stem, Stem) {
    let mut build = |name: &str, id: u64| Stem::new(ps, name, cfg.raw_dim, cfg.dim, cfg.ln_eps, &mut stream(seed, id));
    (build("stem_fl", STREAM_STEM_FL), build("stem_t1c", STREAM_STEM_T1C))
}

/// Builds the stems and generator exactly as [`GmeNet::new`] would, for
/// generator pretraining.
pub fn pretrain_modules<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<S>, Stem, Stem, Cggm)> {
    cfg.validate()?;
    let mut ps = ParamStore::new();
    let (stem_fl, stem_t1c) = build_stems(&mut ps, cfg, seed);
    let cggm = Cggm::new(&mut ps, cfg.attention()?, &mut stream(seed, STREAM_CGGM))?;
    Ok((ps, stem_fl, stem_t1c, cggm))
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Dwefm(Dwefm),
    Concat(ConcatFusion),
}

#[derive(Debug, Clone)]
pub struct GmeNet<S> {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore<S>,
    pub stem_fl: Stem,
    pub stem_t1c: Stem,
    pub cggm: Option<Cggm>,
    pub fusion: Fusion,
    /// One linear head per task, in [`Task::ALL`] order.
    pub heads: [Linear; 3],
}

/// Per-task logits and probabilities, one row per sample.
#[derive(Debug, Clone)]
pub struct Predictions<S> {
    pub logits: [Tensor2<S>; 3],
    pub probs: [Tensor2<S>; 3],
}

impl<S: Scalar> Predictions<S> {
    pub fn len(&self) -> usize {
        self.logits[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_index(task: Task) -> usize {
        Task::ALL.iter().position(|&t| t == task).expect("listed")
    }

    pub fn probs(&self, task: Task) -> &Tensor2<S> {
        &self.probs[Self::task_index(task)]
    }

    pub fn logits(&self, task: Task) -> &Tensor2<S> {
        &self.logits[Self::task_index(task)]
    }
}

/// Latent features of a batch before fusion, and where they came from.
#[derive(Debug, Clone)]
pub struct Latents<S> {
    pub fl: Tensor2<S>,
    pub t1c: Tensor2<S>,
    /// Rows whose FL feature was not observed.
    pub missing_fl: Vec<usize>,
    pub missing_t1c: Vec<usize>,
}

#[derive(Debug, Clone)]
struct StemPass<S> {
    rows: Vec<usize>,
    cache: StemCache<S>,
}

#[derive(Debug, Clone)]
struct ImputePass<S> {
    rows: Vec<usize>,
    cache: DirectionCache<S>,
}

#[derive(Debug, Clone)]
enum FusionCache<S> {
    Dwefm(Box<DwefmCache<S>>),
    Concat(Tensor2<S>),
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    stems: [Option<StemPass<S>>; 2],
    imputed: [Option<ImputePass<S>>; 2],
    fusion: FusionCache<S>,
    fused: Tensor2<S>,
    pub latents: Latents<S>,
    pub fusion_state: Option<FusionState<S>>,
}

fn seq_index(s: Sequence) -> usize {
    match s {
        Sequence::Fl => 0,
        Sequence::T1c => 1,
    }
}

impl<S: Scalar> GmeNet<S> {
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let (stem_fl, stem_t1c) = build_stems(&mut params, &cfg, seed);
        let cggm = if variant.uses_cggm() {
            let c = Cggm::new(&mut params, cfg.attention()?, &mut stream(seed, STREAM_CGGM))?;
            Cggm::freeze(&mut params);
            Some(c)
        } else {
            None
        };
        Self::finish(cfg, variant, seed, params, stem_fl, stem_t1c, cggm)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        cfg: ModelConfig,
        variant: Variant,
        seed: u64,
        mut params: ParamStore<S>,
        stem_fl: Stem,
        stem_t1c: Stem,
        cggm: Option<Cggm>,
    ) -> Result<Self> {
        let mut rng = stream(seed, STREAM_FUSION);
        let fusion = match variant {
            Variant::NoDwefm => Fusion::Concat(ConcatFusion::new(&mut params, cfg.dim, cfg.fused_dim, &mut rng)),
            _ => Fusion::Dwefm(Dwefm::new(
                &mut params,
                cfg.dim,
                cfg.expert_dim,
                cfg.fused_dim,
                cfg.ln_eps,
                &mut rng,
            )),
        };
        let mut rng = stream(seed, STREAM_HEADS);
        let heads = Task::ALL.map(|t| {
            Linear::new(
                &mut params,
                &format!("head.{}", t.as_str()),
                "head",
                cfg.fused_dim,
                t.num_classes(),
                &mut rng,
            )
        });
        Ok(Self {
            cfg,
            variant,
            params,
            stem_fl,
            stem_t1c,
            cggm,
            fusion,
            heads,
        })
    }

    fn stem(&self, s: Sequence) -> &Stem {
        match s {
            Sequence::Fl => &self.stem_fl,
            Sequence::T1c => &self.stem_t1c,
        }
    }

    /// Runs the stems on the observed sequences and fills absent ones.
    fn latents(&self, records: &[&SampleRecord]) -> Result<(Latents<S>, [Option<StemPass<S>>; 2], [Option<ImputePass<S>>; 2])> {
        let b = records.len();
        let d = self.cfg.dim;
        if let Some(r) = records.iter().find(|r| r.fl.is_none() && r.t1c.is_none()) {
            return Err(Error::Protocol(format!("record {} has neither sequence", r.id)));
        }
        let mut feats = [Tensor2::zeros(b, d), Tensor2::zeros(b, d)];
        let mut stems: [Option<StemPass<S>>; 2] = [None, None];
        let mut missing: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for seq in Sequence::BOTH {
            let k = seq_index(seq);
            let rows: Vec<usize> = (0..b).filter(|&i| records[i].has(seq)).collect();
            missing[k] = (0..b).filter(|&i| !records[i].has(seq)).collect();
            if rows.is_empty() {
                continue;
            }
            let raw = Tensor2::from_rows(
                &rows
                    .iter()
                    .map(|&i| {
                        let v = records[i].get(seq).expect("present");
                        if v.len() != self.cfg.raw_dim {
                            return Err(Error::shape("record features", self.cfg.raw_dim, v.len()));
                        }
                        Ok(v.iter().map(|&x| S::of(x)).collect::<Vec<S>>())
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let (y, cache) = self.stem(seq).forward(&self.params, &raw)?;
            feats[k].scatter_rows(&rows, &y);
            stems[k] = Some(StemPass { rows, cache });
        }
        let mut imputed: [Option<ImputePass<S>>; 2] = [None, None];
        if let Some(cggm) = &self.cggm {
            for target in Sequence::BOTH {
                let k = seq_index(target);
                let rows = missing[k].clone();
                if rows.is_empty() {
                    continue;
                }
                let src = feats[seq_index(target.other())].select_rows(&rows);
                let (out, cache) = cggm.direction(Direction::towards(target)).forward(&self.params, &src)?;
                feats[k].scatter_rows(&rows, &out.f_m);
                imputed[k] = Some(ImputePass { rows, cache });
            }
        }
        let [fl, t1c] = feats;
        let [missing_fl, missing_t1c] = missing;
        Ok((
            Latents {
                fl,
                t1c,
                missing_fl,
                missing_t1c,
            },
            stems,
            imputed,
        ))
    }

    pub fn forward(&self, records: &[&SampleRecord]) -> Result<(Predictions<S>, ForwardCache<S>)> {
        if records.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let (latents, stems, imputed) = self.latents(records)?;
        let (fused, fusion, fusion_state) = match &self.fusion {
            Fusion::Dwefm(m) => {
                let (state, cache) = m.forward(&self.params, &latents.fl, &latents.t1c)?;
                (state.f_f.clone(), FusionCache::Dwefm(Box::new(cache)), Some(state))
            }
            Fusion::Concat(m) => {
                let (f, input) = m.forward(&self.params, &latents.fl, &latents.t1c)?;
                (f, FusionCache::Concat(input), None)
            }
        };
        let mut logits: [Tensor2<S>; 3] = Task::ALL.map(|t| Tensor2::zeros(0, t.num_classes()));
        let mut probs = logits.clone();
        for (k, head) in self.heads.iter().enumerate() {
            let z = head.forward(&self.params, &fused)?;
            let mut p = z.clone();
            for r in 0..z.rows() {
                let s = softmax(z.row(r));
                p.row_mut(r).copy_from_slice(&s);
            }
            logits[k] = z;
            probs[k] = p;
        }
        Ok((
            Predictions { logits, probs },
            ForwardCache {
                stems,
                imputed,
                fusion,
                fused,
                latents,
                fusion_state,
            },
        ))
    }

    pub fn predict(&self, records: &[&SampleRecord]) -> Result<Predictions<S>> {
        Ok(self.forward(records)?.0)
    }

    /// Accumulates gradients of a loss whose logit gradients are `d_logits`.
    pub fn backward(&mut self, cache: &ForwardCache<S>, d_logits: &[Tensor2<S>; 3]) -> Result<()> {
        let ps = &mut self.params;
        let mut d_fused = Tensor2::zeros(cache.fused.rows(), cache.fused.cols());
        for (head, dz) in self.heads.iter().zip(d_logits) {
            d_fused.add_assign(&head.backward(ps, &cache.fused, dz)?)?;
        }
        let (d_fl, d_t1c) = match (&self.fusion, &cache.fusion) {
            (Fusion::Dwefm(m), FusionCache::Dwefm(c)) => m.backward(ps, c, &d_fused)?,
            (Fusion::Concat(m), FusionCache::Concat(input)) => m.backward(ps, input, &d_fused)?,
            _ => unreachable!("cache built by the same fusion"),
        };
        let mut d_feats = [d_fl, d_t1c];
        // Imputed rows pass their gradient through the frozen generator to the
        // observed source feature; zero-filled rows have no upstream.
        for target in Sequence::BOTH {
            let k = seq_index(target);
            let src = seq_index(target.other());
            if let (Some(pass), Some(cggm)) = (&cache.imputed[k], &self.cggm) {
                let d_m = d_feats[k].select_rows(&pass.rows);
                let d_src = cggm.direction(Direction::towards(target)).backward(ps, &pass.cache, &d_m)?;
                d_feats[src].scatter_add_rows(&pass.rows, &d_src);
            }
        }
        for seq in Sequence::BOTH {
            let k = seq_index(seq);
            if let Some(pass) = &cache.stems[k] {
                let dy = d_feats[k].select_rows(&pass.rows);
                let stem = match seq {
                    Sequence::Fl => &self.stem_fl,
                    Sequence::T1c => &self.stem_t1c,
                };
                stem.backward(ps, &pass.cache, &dy)?;
            }
        }
        Ok(())
    }

    /// Batch-mean multi-task loss; gradients are accumulated into the params.
    pub fn loss_and_backward(&mut self, records: &[&SampleRecord], log_n: &LogCounts<S>) -> Result<S> {
        let (loss, d_logits, cache) = self.loss(records, log_n)?;
        self.backward(&cache, &d_logits)?;
        Ok(loss)
    }

    /// Batch-mean multi-task loss with its logit gradients.
    #[allow(clippy::type_complexity)]
    pub fn loss(
        &self,
        records: &[&SampleRecord],
        log_n: &LogCounts<S>,
    ) -> Result<(S, [Tensor2<S>; 3], ForwardCache<S>)> {
        let (pred, cache) = self.forward(records)?;
        let b = records.len();
        let inv_b = S::one() / S::of(b as f64);
        let mut d_logits: [Tensor2<S>; 3] = Task::ALL.map(|t| Tensor2::zeros(b, t.num_classes()));
        let mut total = S::zero();
        for (i, r) in records.iter().enumerate() {
            let logits = TaskLogits {
                idh: pred.logits[0].row(i),
                codel: pred.logits[1].row(i),
                pathology: pred.logits[2].row(i),
            };
            let (l, grads) = total_loss(&logits, &r.labels, log_n)?;
            total += l * inv_b;
            for (k, g) in grads.iter().enumerate() {
                for (dst, &v) in d_logits[k].row_mut(i).iter_mut().zip(g) {
                    *dst = v * inv_b;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((total, d_logits, cache))
    }
}
