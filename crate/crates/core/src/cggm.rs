//! Cross-attention gated generation: synthesizes the latent feature of a
//! missing sequence from the available one.
//!
//! Per direction `source → target`, the available feature (a `D`-vector) is
//! split into `T` tokens of width `d = D/T` that serve as keys and values; a
//! learnable `T × d` embedding supplies the queries. The attended tokens are
//! flattened back to `D` (`f_cs`), a sigmoid gate over `[f_cs, f_u]` yields
//! `alpha`, and the synthesized feature is `f_m = alpha ⊙ f_cs`.

use rand::Rng;

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::nn::{
    log_softmax, sigmoid, sigmoid_backward, softmax, AttentionCache, AttentionConfig, CrossAttention,
    Linear, ParamId, ParamStore,
};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Group prefix shared by all generator parameters.
pub const GROUP_PREFIX: &str = "cggm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    FlToT1c,
    T1cToFl,
}

impl Direction {
    /// The direction that synthesizes `target`.
    pub fn towards(target: Sequence) -> Self {
        match target {
            Sequence::T1c => Direction::FlToT1c,
            Sequence::Fl => Direction::T1cToFl,
        }
    }

    pub fn source(self) -> Sequence {
        match self {
            Direction::FlToT1c => Sequence::Fl,
            Direction::T1cToFl => Sequence::T1c,
        }
    }

    pub fn target(self) -> Sequence {
        self.source().other()
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::FlToT1c => Direction::T1cToFl,
            Direction::T1cToFl => Direction::FlToT1c,
        }
    }

    pub fn group(self) -> &'static str {
        match self {
            Direction::FlToT1c => "cggm.fl_to_t1c",
            Direction::T1cToFl => "cggm.t1c_to_fl",
        }
    }
}

/// Batched forward values of one direction, one row per sample.
#[derive(Debug, Clone)]
pub struct CggmOutput<S> {
    pub f_cs: Tensor2<S>,
    pub alpha: Tensor2<S>,
    pub f_m: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct ImputeCache<S> {
    /// One attention cache per batch row.
    pub rows: Vec<AttentionCache<S>>,
}

#[derive(Debug, Clone)]
pub struct GateCache<S> {
    input: Tensor2<S>,
    f_cs: Tensor2<S>,
    alpha: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct DirectionCache<S> {
    impute: ImputeCache<S>,
    gate: GateCache<S>,
}

/// Parameters of a single generation direction.
#[derive(Debug, Clone)]
pub struct CggmDirection {
    pub direction: Direction,
    pub cfg: AttentionConfig,
    /// `T × d` query tokens.
    pub embedding: ParamId,
    pub attn: CrossAttention,
    /// `2D → D`, applied to `[f_cs, f_u]`.
    pub gate: Linear,
}

impl CggmDirection {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        direction: Direction,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let group = direction.group();
        let embedding = ps.add_uniform(
            format!("{group}.embedding"),
            group,
            cfg.tokens,
            cfg.token_dim,
            1,
            rng,
        );
        let attn = CrossAttention::new(ps, &format!("{group}.attn"), group, cfg, rng)?;
        let d = cfg.model_dim;
        let gate = Linear::new(ps, &format!("{group}.gate"), group, 2 * d, d, rng);
        Ok(Self {
            direction,
            cfg,
            embedding,
            attn,
            gate,
        })
    }

    fn check_width<S: Scalar>(&self, what: &'static str, t: &Tensor2<S>) -> Result<()> {
        if t.cols() != self.cfg.model_dim {
            return Err(Error::shape(what, self.cfg.model_dim, t.cols()));
        }
        Ok(())
    }

    /// Cross-attention from the learnable queries onto the tokenized `f_u`.
    pub fn impute<S: Scalar>(&self, ps: &ParamStore<S>, f_u: &Tensor2<S>) -> Result<(Tensor2<S>, ImputeCache<S>)> {
        self.check_width("impute input", f_u)?;
        let (t, d) = (self.cfg.tokens, self.cfg.token_dim);
        let queries = ps.value(self.embedding);
        let mut f_cs = Tensor2::zeros(f_u.rows(), self.cfg.model_dim);
        let mut rows = Vec::with_capacity(f_u.rows());
        for r in 0..f_u.rows() {
            let tokens = Tensor2::new(t, d, f_u.row(r).to_vec())?;
            let (out, cache) = self.attn.forward(ps, queries, &tokens, &tokens)?;
            f_cs.row_mut(r).copy_from_slice(out.data());
            rows.push(cache);
        }
        Ok((f_cs, ImputeCache { rows }))
    }

    /// Returns `d f_u`; embedding and attention gradients are accumulated.
    pub fn impute_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &ImputeCache<S>,
        d_f_cs: &Tensor2<S>,
    ) -> Result<Tensor2<S>> {
        let (t, d) = (self.cfg.tokens, self.cfg.token_dim);
        let mut d_f_u = Tensor2::zeros(d_f_cs.rows(), self.cfg.model_dim);
        let mut d_embed = Tensor2::zeros(t, d);
        for (r, rc) in cache.rows.iter().enumerate() {
            let dy = Tensor2::new(t, d, d_f_cs.row(r).to_vec())?;
            let g = self.attn.backward(ps, rc, &dy)?;
            d_embed.add_assign(&g.dq)?;
            let dkv = g.dk.add(&g.dv)?;
            d_f_u.row_mut(r).copy_from_slice(dkv.data());
        }
        ps.accumulate(self.embedding, &d_embed);
        Ok(d_f_u)
    }

    /// `alpha = sigmoid(gate([f_cs, f_u]))`, `f_m = alpha ⊙ f_cs`.
    pub fn gate<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_cs: &Tensor2<S>,
        f_u: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>, GateCache<S>)> {
        self.check_width("gate synthesized input", f_cs)?;
        self.check_width("gate source input", f_u)?;
        let input = Tensor2::hconcat(&[f_cs, f_u])?;
        let alpha = sigmoid(&self.gate.forward(ps, &input)?);
        let f_m = alpha.hadamard(f_cs)?;
        Ok((
            alpha.clone(),
            f_m,
            GateCache {
                input,
                f_cs: f_cs.clone(),
                alpha,
            },
        ))
    }

    /// Returns `(d f_cs, d f_u)`.
    pub fn gate_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &GateCache<S>,
        d_f_m: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let d_alpha = d_f_m.hadamard(&cache.f_cs)?;
        let d_logit = sigmoid_backward(&cache.alpha, &d_alpha)?;
        let d_input = self.gate.backward(ps, &cache.input, &d_logit)?;
        let d = self.cfg.model_dim;
        let mut parts = d_input.split_cols(&[d, d])?.into_iter();
        let mut d_f_cs = parts.next().expect("two parts");
        let d_f_u = parts.next().expect("two parts");
        d_f_cs.add_assign(&d_f_m.hadamard(&cache.alpha)?)?;
        Ok((d_f_cs, d_f_u))
    }

    /// Impute followed by gate.
    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_u: &Tensor2<S>,
    ) -> Result<(CggmOutput<S>, DirectionCache<S>)> {
        let (f_cs, impute) = self.impute(ps, f_u)?;
        let (alpha, f_m, gate) = self.gate(ps, &f_cs, f_u)?;
        Ok((CggmOutput { f_cs, alpha, f_m }, DirectionCache { impute, gate }))
    }

    /// Returns `d f_u` through both the attention and the gate input.
    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &DirectionCache<S>,
        d_f_m: &Tensor2<S>,
    ) -> Result<Tensor2<S>> {
        let (d_f_cs, mut d_f_u) = self.gate_backward(ps, &cache.gate, d_f_m)?;
        d_f_u.add_assign(&self.impute_backward(ps, &cache.impute, &d_f_cs)?)?;
        Ok(d_f_u)
    }
}

/// Both generation directions, with independent parameters.
#[derive(Debug, Clone)]
pub struct Cggm {
    pub fl_to_t1c: CggmDirection,
    pub t1c_to_fl: CggmDirection,
}

impl Cggm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fl_to_t1c: CggmDirection::new(ps, Direction::FlToT1c, cfg, rng)?,
            t1c_to_fl: CggmDirection::new(ps, Direction::T1cToFl, cfg, rng)?,
        })
    }

    pub fn direction(&self, dir: Direction) -> &CggmDirection {
        match dir {
            Direction::FlToT1c => &self.fl_to_t1c,
            Direction::T1cToFl => &self.t1c_to_fl,
        }
    }

    /// Maps a synthesized `dir.target()` feature back to `dir.source()` with
    /// the reverse generator.
    pub fn cycle_reconstruct<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_m: &Tensor2<S>,
        dir: Direction,
    ) -> Result<(Tensor2<S>, DirectionCache<S>)> {
        let (out, cache) = self.direction(dir.reverse()).forward(ps, f_m)?;
        Ok((out.f_m, cache))
    }

    /// Marks every generator parameter group frozen.
    pub fn freeze<S: Scalar>(ps: &mut ParamStore<S>) {
        ps.freeze_prefix(GROUP_PREFIX);
    }

    pub fn is_frozen<S: Scalar>(ps: &ParamStore<S>) -> bool {
        [Direction::FlToT1c, Direction::T1cToFl]
            .iter()
            .all(|d| ps.is_group_frozen(d.group()))
    }
}

/// The three reconstruction terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReconLoss<S> {
    pub mse: S,
    pub kl: S,
    pub cycle: S,
    pub total: S,
}

impl<S: Scalar> ReconLoss<S> {
    fn from_terms(mse: S, kl: S, cycle: S) -> Self {
        Self {
            mse,
            kl,
            cycle,
            total: mse + kl + cycle,
        }
    }
}

fn mse<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = S::of(a.len() as f64);
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>() / n
}

/// `KL(softmax(p_logits) ‖ softmax(q_logits))`.
pub fn softmax_kl<S: Scalar>(p_logits: &[S], q_logits: &[S]) -> S {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: S = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    kl.max(S::zero())
}

/// Reconstruction objective for one sample: MSE between synthesized and true
/// target feature, KL from the softmaxed true target to the softmaxed
/// synthesized one, and MSE of the cycle reconstruction of the source.
pub fn recon_loss<S: Scalar>(f_m_hat: &[S], f_m_true: &[S], f_u_hat: &[S], f_u_true: &[S]) -> ReconLoss<S> {
    ReconLoss::from_terms(
        mse(f_m_hat, f_m_true),
        softmax_kl(f_m_true, f_m_hat),
        mse(f_u_hat, f_u_true),
    )
}

/// Row-averaged [`recon_loss`] with gradients with respect to `f_m_hat` and
/// `f_u_hat`. Rows are weighted by `1/normalizer`.
pub fn recon_loss_backward<S: Scalar>(
    f_m_hat: &Tensor2<S>,
    f_m_true: &Tensor2<S>,
    f_u_hat: &Tensor2<S>,
    f_u_true: &Tensor2<S>,
    normalizer: usize,
) -> Result<(ReconLoss<S>, Tensor2<S>, Tensor2<S>)> {
    for t in [f_m_true, f_u_hat, f_u_true] {
        if t.shape() != f_m_hat.shape() {
            return Err(Error::shape(
                "recon_loss",
                format!("{:?}", f_m_hat.shape()),
                format!("{:?}", t.shape()),
            ));
        }
    }
    let n = S::of(normalizer.max(1) as f64);
    let dim = S::of(f_m_hat.cols() as f64);
    let two = S::of(2.0);
    let mut total = ReconLoss::default();
    let mut d_m = Tensor2::zeros(f_m_hat.rows(), f_m_hat.cols());
    let mut d_u = Tensor2::zeros(f_m_hat.rows(), f_m_hat.cols());
    for r in 0..f_m_hat.rows() {
        let (mh, mt, uh, ut) = (f_m_hat.row(r), f_m_true.row(r), f_u_hat.row(r), f_u_true.row(r));
        let l = recon_loss(mh, mt, uh, ut);
        total.mse += l.mse / n;
        total.kl += l.kl / n;
        total.cycle += l.cycle / n;
        let p = softmax(mt);
        let q = softmax(mh);
        for (j, g) in d_m.row_mut(r).iter_mut().enumerate() {
            *g = (two * (mh[j] - mt[j]) / dim + (q[j] - p[j])) / n;
        }
        for (j, g) in d_u.row_mut(r).iter_mut().enumerate() {
            *g = two * (uh[j] - ut[j]) / dim / n;
        }
    }
    total.total = total.mse + total.kl + total.cycle;
    Ok((total, d_m, d_u))
}

/// Per-side masking probabilities for self-supervised pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskProbs {
    pub fl: f64,
    pub t1c: f64,
}

impl Default for MaskProbs {
    fn default() -> Self {
        Self { fl: 0.5, t1c: 0.5 }
    }
}

impl MaskProbs {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.fl) || !ok(self.t1c) {
            return Err(Error::Config(format!("mask probabilities {self:?} outside [0, 1]")));
        }
        if self.fl >= 1.0 && self.t1c >= 1.0 {
            return Err(Error::Config("masking both sequences with certainty leaves nothing to impute from".into()));
        }
        Ok(())
    }

    /// Draws which side (if any) is hidden; both-masked draws are rejected.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Sequence> {
        loop {
            let fl = rng.random_bool(self.fl);
            let t1c = rng.random_bool(self.t1c);
            match (fl, t1c) {
                (true, true) => continue,
                (true, false) => return Some(Sequence::Fl),
                (false, true) => return Some(Sequence::T1c),
                (false, false) => return None,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOutcome<S> {
    pub loss: ReconLoss<S>,
    pub masked_fl: usize,
    pub masked_t1c: usize,
}

/// Reconstruction loss and gradients for a batch of complete feature pairs
/// with a given per-row masking. Returns the averaged loss; gradients are
/// accumulated into `ps`.
pub fn recon_objective<S: Scalar>(
    cggm: &Cggm,
    ps: &mut ParamStore<S>,
    fl: &Tensor2<S>,
    t1c: &Tensor2<S>,
    masked: &[Option<Sequence>],
) -> Result<ReconLoss<S>> {
    let n_masked = masked.iter().filter(|m| m.is_some()).count();
    let mut total = ReconLoss::default();
    for target in Sequence::BOTH {
        let rows: Vec<usize> = masked
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == Some(target))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let (src, tgt) = match target {
            Sequence::Fl => (t1c.select_rows(&rows), fl.select_rows(&rows)),
            Sequence::T1c => (fl.select_rows(&rows), t1c.select_rows(&rows)),
        };
        let dir = Direction::towards(target);
        let gen = cggm.direction(dir);
        let (out, fwd_cache) = gen.forward(ps, &src)?;
        let (f_u_hat, cyc_cache) = cggm.cycle_reconstruct(ps, &out.f_m, dir)?;
        let (l, d_m, d_u) = recon_loss_backward(&out.f_m, &tgt, &f_u_hat, &src, n_masked)?;
        total.mse += l.mse;
        total.kl += l.kl;
        total.cycle += l.cycle;
        let mut d_f_m = cggm.direction(dir.reverse()).backward(ps, &cyc_cache, &d_u)?;
        d_f_m.add_assign(&d_m)?;
        gen.backward(ps, &fwd_cache, &d_f_m)?;
    }
    total.total = total.mse + total.kl + total.cycle;
    Ok(total)
}

/// One self-supervised step on complete pairs: mask one side per sample at
/// random, reconstruct it from the other, and update generator parameters only.
pub fn pretrain_step<S: Scalar, R: Rng + ?Sized>(
    cggm: &Cggm,
    ps: &mut ParamStore<S>,
    opt: &mut AdamW<S>,
    fl: &Tensor2<S>,
    t1c: &Tensor2<S>,
    probs: MaskProbs,
    rng: &mut R,
) -> Result<PretrainOutcome<S>> {
    if fl.rows() == 0 {
        return Err(Error::Empty("pretraining batch"));
    }
    if fl.shape() != t1c.shape() {
        return Err(Error::shape(
            "pretrain batch",
            format!("{:?}", fl.shape()),
            format!("{:?}", t1c.shape()),
        ));
    }
    probs.validate()?;
    let masked: Vec<Option<Sequence>> = (0..fl.rows()).map(|_| probs.draw(rng)).collect();
    ps.zero_grad();
    let loss = recon_objective(cggm, ps, fl, t1c, &masked)?;
    opt.step_where(ps, |group| group.starts_with(GROUP_PREFIX));
    Ok(PretrainOutcome {
        loss,
        masked_fl: masked.iter().filter(|m| **m == Some(Sequence::Fl)).count(),
        masked_t1c: masked.iter().filter(|m| **m == Some(Sequence::T1c)).count(),
    })
}

/// Where a latent feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<S> {
    pub fl: Vec<S>,
    pub t1c: Vec<S>,
    pub fl_source: Provenance,
    pub t1c_source: Provenance,
}

/// Latent features of one subject before completion.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialPair<S> {
    pub fl: Option<Vec<S>>,
    pub t1c: Option<Vec<S>>,
}

/// Fills the absent side with the generator output; complete pairs pass through.
pub fn complete_pair<S: Scalar>(cggm: &Cggm, ps: &ParamStore<S>, pair: PartialPair<S>) -> Result<FeaturePair<S>> {
    let synth = |src: &[S], target: Sequence| -> Result<Vec<S>> {
        let (out, _) = cggm.direction(Direction::towards(target)).forward(ps, &Tensor2::row_vector(src))?;
        Ok(out.f_m.into_data())
    };
    match pair {
        PartialPair {
            fl: Some(fl),
            t1c: Some(t1c),
        } => Ok(FeaturePair {
            fl,
            t1c,
            fl_source: Provenance::Real,
            t1c_source: Provenance::Real,
        }),
        PartialPair { fl: Some(fl), t1c: None } => Ok(FeaturePair {
            t1c: synth(&fl, Sequence::T1c)?,
            fl,
            fl_source: Provenance::Real,
            t1c_source: Provenance::Synthesized,
        }),
        PartialPair { fl: None, t1c: Some(t1c) } => Ok(FeaturePair {
            fl: synth(&t1c, Sequence::Fl)?,
            t1c,
            fl_source: Provenance::Synthesized,
            t1c_source: Provenance::Real,
        }),
        PartialPair { fl: None, t1c: None } => Err(Error::Empty("feature pair with both sequences absent")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, linear, GradCheckOptions};
    use crate::optim::AdamWConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(heads: usize, tokens: usize, dim: usize, seed: u64) -> (ParamStore<f64>, Cggm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let cfg = AttentionConfig::new(heads, tokens, dim).unwrap();
        let cggm = Cggm::new(&mut ps, cfg, &mut rng).unwrap();
        (ps, cggm)
    }

    fn features(rows: usize, dim: usize, phase: f64) -> Tensor2<f64> {
        Tensor2::from_fn(rows, dim, |r, c| ((r * dim + c) as f64 * 0.7 + phase).sin())
    }

    fn project(ps: &ParamStore<f64>, l: &Linear, x: &Tensor2<f64>) -> Tensor2<f64> {
        linear(x, ps.value(l.weight), ps.value(l.bias).data()).unwrap()
    }

    #[test]
    fn single_token_ignores_queries() {
        let (ps, cggm) = setup(2, 1, 4, 0);
        let gen = &cggm.fl_to_t1c;
        let f_u = features(3, 4, 0.2);
        let (f_cs, _) = gen.impute(&ps, &f_u).unwrap();
        // One key means every attention weight is one.
        let expected = project(&ps, &gen.attn.out_proj, &project(&ps, &gen.attn.v_proj, &f_u));
        for (a, b) in f_cs.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_embedding_repeats_one_token() {
        let (mut ps, cggm) = setup(2, 4, 8, 1);
        let gen = &cggm.t1c_to_fl;
        ps.value_mut(gen.embedding).data_mut().fill(0.0);
        let (f_cs, cache) = gen.impute(&ps, &features(2, 8, 1.0)).unwrap();
        for r in 0..2 {
            let row = f_cs.row(r);
            for t in 1..4 {
                assert_eq!(&row[t * 2..t * 2 + 2], &row[..2]);
            }
            for w in &cache.rows[r].weights {
                for q in 1..4 {
                    assert_eq!(w.row(q), w.row(0));
                }
            }
        }
    }

    #[test]
    fn zero_gate_halves_synthesized_feature() {
        let (mut ps, cggm) = setup(1, 2, 4, 2);
        let gen = &cggm.fl_to_t1c;
        ps.value_mut(gen.gate.weight).data_mut().fill(0.0);
        ps.value_mut(gen.gate.bias).data_mut().fill(0.0);
        let (out, _) = gen.forward(&ps, &features(2, 4, 0.0)).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 0.5));
        for (m, cs) in out.f_m.data().iter().zip(out.f_cs.data()) {
            assert_eq!(*m, 0.5 * cs);
        }
    }

    #[test]
    fn very_negative_gate_bias_suppresses_output() {
        let (mut ps, cggm) = setup(1, 2, 4, 3);
        let gen = &cggm.fl_to_t1c;
        ps.value_mut(gen.gate.weight).data_mut().fill(0.0);
        ps.value_mut(gen.gate.bias).data_mut().fill(-60.0);
        let (out, _) = gen.forward(&ps, &features(2, 4, 0.5)).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a > 0.0 && a < 1e-25));
        assert!(out.f_m.data().iter().all(|v| v.abs() < 1e-24));
    }

    #[test]
    fn gate_stays_inside_open_interval() {
        let (ps, cggm) = setup(2, 4, 8, 4);
        let (out, _) = cggm.fl_to_t1c.forward(&ps, &features(5, 8, 0.3).scale(3.0)).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn cycle_is_reverse_generator() {
        let (ps, cggm) = setup(2, 4, 8, 5);
        let f_u = features(2, 8, 0.1);
        let (fwd, _) = cggm.fl_to_t1c.forward(&ps, &f_u).unwrap();
        let (cycled, _) = cggm.cycle_reconstruct(&ps, &fwd.f_m, Direction::FlToT1c).unwrap();
        let (direct, _) = cggm.t1c_to_fl.forward(&ps, &fwd.f_m).unwrap();
        assert_eq!(cycled, direct.f_m);
    }

    #[test]
    fn directions_have_independent_parameters() {
        let (mut ps, cggm) = setup(2, 4, 8, 6);
        let f_u = features(2, 8, 0.4);
        let (before, _) = cggm.fl_to_t1c.forward(&ps, &f_u).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.param(id).group == Direction::T1cToFl.group() {
                ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        }
        let (after, _) = cggm.fl_to_t1c.forward(&ps, &f_u).unwrap();
        assert_eq!(before.f_m, after.f_m);
        assert_ne!(Direction::FlToT1c.group(), Direction::T1cToFl.group());
    }

    #[test]
    fn kl_two_class_oracle() {
        let p = [0.0, 0.0];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((softmax_kl(&p, &q) - expected).abs() < 1e-14);
        assert_eq!(softmax_kl(&q, &q), 0.0);
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.0, -0.5];
        let l = recon_loss(&a, &a, &b, &b);
        assert_eq!((l.mse, l.kl, l.cycle, l.total), (0.0, 0.0, 0.0, 0.0));
        let l = recon_loss::<f64>(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]);
        assert_eq!(l.mse, 1.0);
        // Shifted logits give the same distribution, up to rounding.
        assert!(l.kl.abs() < 1e-15);
        assert_eq!(l.cycle, 2.0);
        assert!((l.total - 3.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let (mut ps, cggm) = setup(2, 4, 8, 7);
        let fl_id = ps.add("input.fl", "input", features(3, 8, 0.0));
        let t1c_id = ps.add("input.t1c", "input", features(3, 8, 2.0).scale(0.8));
        // The objective does not backpropagate into its data.
        ps.freeze_group("input");
        let masked = [Some(Sequence::T1c), Some(Sequence::Fl), Some(Sequence::T1c)];
        let report = grad_check(&mut ps, GradCheckOptions::default(), |ps| {
            let fl = ps.value(fl_id).clone();
            let t1c = ps.value(t1c_id).clone();
            let loss = recon_objective(&cggm, ps, &fl, &t1c, &masked)?;
            Ok(loss.total)
        })
        .unwrap();
        assert_eq!(report.frozen.len(), 2);
        assert!(report.checked > 0);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn input_gradient_through_gate_and_attention() {
        let (mut ps, cggm) = setup(2, 4, 8, 8);
        let x_id = ps.add("input.x", "input", features(2, 8, 0.6));
        let gen = cggm.t1c_to_fl.clone();
        let w = features(2, 8, 3.0);
        let report = grad_check(&mut ps, GradCheckOptions::default(), |ps| {
            let x = ps.value(x_id).clone();
            let (out, cache) = gen.forward(ps, &x)?;
            let loss: f64 = out.f_m.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let d_x = gen.backward(ps, &cache, &w)?;
            ps.accumulate(x_id, &d_x);
            Ok(loss)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn frozen_generator_is_bit_exact_after_update() {
        let (mut ps, cggm) = setup(2, 4, 8, 9);
        let other = ps.add("head.w", "head", features(2, 2, 0.0));
        Cggm::freeze(&mut ps);
        assert!(Cggm::is_frozen(&ps));
        let before: Vec<_> = ps.iter().map(|p| p.value.clone()).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let fl = features(4, 8, 0.0);
        let t1c = features(4, 8, 1.0);
        ps.zero_grad();
        recon_objective(&cggm, &mut ps, &fl, &t1c, &[Some(Sequence::Fl); 4]).unwrap();
        ps.accumulate(other, &Tensor2::full(2, 2, 1.0));
        opt.step(&mut ps);
        for (p, b) in ps.iter().zip(&before) {
            if p.group.starts_with(GROUP_PREFIX) {
                assert_eq!(&p.value, b, "{} moved", p.name);
                assert!(p.grad.data().iter().all(|&g| g == 0.0));
            }
        }
        assert_ne!(ps.value(other), &before[before.len() - 1]);
    }

    #[test]
    fn pretrain_step_only_moves_generator() {
        let (mut ps, cggm) = setup(2, 4, 8, 10);
        let other = ps.add("stem.w", "stem_fl", features(2, 2, 0.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = ps.value(cggm.fl_to_t1c.embedding).clone();
        let out = pretrain_step(
            &cggm,
            &mut ps,
            &mut opt,
            &features(16, 8, 0.0),
            &features(16, 8, 1.0),
            MaskProbs::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.masked_fl + out.masked_t1c <= 16);
        assert_eq!(ps.value(other), &features(2, 2, 0.0));
        assert_ne!(ps.value(cggm.fl_to_t1c.embedding), &before);
    }

    #[test]
    fn certain_mask_always_hides_that_side() {
        let probs = MaskProbs { fl: 1.0, t1c: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!((0..200).all(|_| probs.draw(&mut rng) == Some(Sequence::Fl)));
        let never = MaskProbs { fl: 0.0, t1c: 0.0 };
        assert!((0..50).all(|_| never.draw(&mut rng).is_none()));
        assert!(MaskProbs { fl: 1.0, t1c: 1.0 }.validate().is_err());
        assert!(MaskProbs { fl: -0.1, t1c: 0.5 }.validate().is_err());
    }

    #[test]
    fn complete_pair_routes_by_missing_side() {
        let (ps, cggm) = setup(2, 4, 8, 12);
        let fl = features(1, 8, 0.0).into_data();
        let t1c = features(1, 8, 1.0).into_data();
        let both = complete_pair(
            &cggm,
            &ps,
            PartialPair {
                fl: Some(fl.clone()),
                t1c: Some(t1c.clone()),
            },
        )
        .unwrap();
        assert_eq!((both.fl_source, both.t1c_source), (Provenance::Real, Provenance::Real));
        assert_eq!((&both.fl, &both.t1c), (&fl, &t1c));

        let only_fl = complete_pair(&cggm, &ps, PartialPair { fl: Some(fl.clone()), t1c: None }).unwrap();
        let (expected, _) = cggm.fl_to_t1c.forward(&ps, &Tensor2::row_vector(&fl)).unwrap();
        assert_eq!(only_fl.t1c_source, Provenance::Synthesized);
        assert_eq!(only_fl.t1c, expected.f_m.into_data());

        let only_t1c = complete_pair(&cggm, &ps, PartialPair { fl: None, t1c: Some(t1c.clone()) }).unwrap();
        let (expected, _) = cggm.t1c_to_fl.forward(&ps, &Tensor2::row_vector(&t1c)).unwrap();
        assert_eq!(only_t1c.fl_source, Provenance::Synthesized);
        assert_eq!(only_t1c.fl, expected.f_m.into_data());

        assert!(complete_pair(&cggm, &ps, PartialPair::<f64> { fl: None, t1c: None }).is_err());
    }

    #[test]
    fn wrong_width_is_rejected() {
        let (ps, cggm) = setup(2, 4, 8, 13);
        assert!(matches!(
            cggm.fl_to_t1c.forward(&ps, &features(1, 6, 0.0)),
            Err(Error::Shape { .. })
        ));
    }
}
