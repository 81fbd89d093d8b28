//! Dynamically weighted experts fusion.
//!
//! Each sequence has an expert MLP. Both experts are applied to both latent
//! features; the two views of the same input feature are concatenated into
//! `e_k`. A shared router scores each input feature, the two scores are
//! softmaxed into confidence weights `w_k`, and the fused representation is a
//! linear projection of `[w_FL·e_FL, w_T1c·e_T1c]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, softmax, softmax_backward, LayerNorm, LayerNormCache, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const GROUP: &str = "dwefm";

/// `LayerNorm(W₂·gelu(W₁·x))`.
#[derive(Debug, Clone)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ExpertCache<S> {
    x: Tensor2<S>,
    h_pre: Tensor2<S>,
    h: Tensor2<S>,
    norm: LayerNormCache<S>,
}

impl Expert {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), GROUP, dim, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), GROUP, hidden, out, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), GROUP, out, ln_eps),
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor2<S>) -> Result<(Tensor2<S>, ExpertCache<S>)> {
        let h_pre = self.fc1.forward(ps, x)?;
        let h = gelu(&h_pre);
        let o = self.fc2.forward(ps, &h)?;
        let (y, norm) = self.norm.forward(ps, &o)?;
        Ok((
            y,
            ExpertCache {
                x: x.clone(),
                h_pre,
                h,
                norm,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &ExpertCache<S>,
        dy: &Tensor2<S>,
    ) -> Result<Tensor2<S>> {
        let d_o = self.norm.backward(ps, &cache.norm, dy);
        let dh = self.fc2.backward(ps, &cache.h, &d_o)?;
        let dh_pre = gelu_backward(&cache.h_pre, &dh)?;
        self.fc1.backward(ps, &cache.x, &dh_pre)
    }
}

/// Forward values of the fusion module, one row per sample.
#[derive(Debug, Clone)]
pub struct FusionState<S> {
    /// `[E_FL(f_FL), E_T1c(f_FL)]`.
    pub e_fl: Tensor2<S>,
    /// `[E_T1c(f_T1c), E_FL(f_T1c)]`.
    pub e_t1c: Tensor2<S>,
    /// Columns are `(w_FL, w_T1c)`.
    pub w: Tensor2<S>,
    pub e_w_fl: Tensor2<S>,
    pub e_w_t1c: Tensor2<S>,
    pub f_f: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct ExpertViewsCache<S> {
    fl_native: ExpertCache<S>,
    fl_cross: ExpertCache<S>,
    t1c_native: ExpertCache<S>,
    t1c_cross: ExpertCache<S>,
}

#[derive(Debug, Clone)]
pub struct RouteCache<S> {
    f_fl: Tensor2<S>,
    f_t1c: Tensor2<S>,
    w: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct FuseCache<S> {
    e_fl: Tensor2<S>,
    e_t1c: Tensor2<S>,
    w: Tensor2<S>,
    input: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct DwefmCache<S> {
    views: ExpertViewsCache<S>,
    route: RouteCache<S>,
    fuse: FuseCache<S>,
}

#[derive(Debug, Clone)]
pub struct Dwefm {
    pub expert_fl: Expert,
    pub expert_t1c: Expert,
    /// `D → 1`, shared by both sequences.
    pub router: Linear,
    /// `4·D_e → D_f`.
    pub proj: Linear,
    pub dim: usize,
    pub expert_dim: usize,
    pub fused_dim: usize,
}

impl Dwefm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        dim: usize,
        expert_dim: usize,
        fused_dim: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            expert_fl: Expert::new(ps, "dwefm.expert_fl", dim, dim, expert_dim, ln_eps, rng),
            expert_t1c: Expert::new(ps, "dwefm.expert_t1c", dim, dim, expert_dim, ln_eps, rng),
            router: Linear::new(ps, "dwefm.router", GROUP, dim, 1, rng),
            proj: Linear::new(ps, "dwefm.proj", GROUP, 4 * expert_dim, fused_dim, rng),
            dim,
            expert_dim,
            fused_dim,
        }
    }

    fn check_inputs<S: Scalar>(&self, f_fl: &Tensor2<S>, f_t1c: &Tensor2<S>) -> Result<()> {
        if f_fl.cols() != self.dim || f_t1c.cols() != self.dim || f_fl.rows() != f_t1c.rows() {
            return Err(Error::shape(
                "dwefm inputs",
                format!("two B x {}", self.dim),
                format!("{:?} and {:?}", f_fl.shape(), f_t1c.shape()),
            ));
        }
        Ok(())
    }

    /// Returns `(e_FL, e_T1c)`, each `B × 2·D_e`.
    pub fn expert_views<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_fl: &Tensor2<S>,
        f_t1c: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>, ExpertViewsCache<S>)> {
        self.check_inputs(f_fl, f_t1c)?;
        let (a, fl_native) = self.expert_fl.forward(ps, f_fl)?;
        let (b, fl_cross) = self.expert_t1c.forward(ps, f_fl)?;
        let (c, t1c_native) = self.expert_t1c.forward(ps, f_t1c)?;
        let (d, t1c_cross) = self.expert_fl.forward(ps, f_t1c)?;
        Ok((
            Tensor2::hconcat(&[&a, &b])?,
            Tensor2::hconcat(&[&c, &d])?,
            ExpertViewsCache {
                fl_native,
                fl_cross,
                t1c_native,
                t1c_cross,
            },
        ))
    }

    pub fn expert_views_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &ExpertViewsCache<S>,
        d_e_fl: &Tensor2<S>,
        d_e_t1c: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let de = self.expert_dim;
        let fl_parts = d_e_fl.split_cols(&[de, de])?;
        let t1c_parts = d_e_t1c.split_cols(&[de, de])?;
        let mut d_fl = self.expert_fl.backward(ps, &cache.fl_native, &fl_parts[0])?;
        d_fl.add_assign(&self.expert_t1c.backward(ps, &cache.fl_cross, &fl_parts[1])?)?;
        let mut d_t1c = self.expert_t1c.backward(ps, &cache.t1c_native, &t1c_parts[0])?;
        d_t1c.add_assign(&self.expert_fl.backward(ps, &cache.t1c_cross, &t1c_parts[1])?)?;
        Ok((d_fl, d_t1c))
    }

    /// Router logits for each sequence (two `B × 1` columns).
    pub fn router_logits<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_fl: &Tensor2<S>,
        f_t1c: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        Ok((self.router.forward(ps, f_fl)?, self.router.forward(ps, f_t1c)?))
    }

    /// Confidence weights, `B × 2`, each row a softmax over the two logits.
    pub fn route<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_fl: &Tensor2<S>,
        f_t1c: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, RouteCache<S>)> {
        self.check_inputs(f_fl, f_t1c)?;
        let (l_fl, l_t1c) = self.router_logits(ps, f_fl, f_t1c)?;
        let mut w = Tensor2::zeros(f_fl.rows(), 2);
        for r in 0..f_fl.rows() {
            let s = softmax(&[l_fl.get(r, 0), l_t1c.get(r, 0)]);
            w.row_mut(r).copy_from_slice(&s);
        }
        Ok((
            w.clone(),
            RouteCache {
                f_fl: f_fl.clone(),
                f_t1c: f_t1c.clone(),
                w,
            },
        ))
    }

    pub fn route_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &RouteCache<S>,
        dw: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let b = dw.rows();
        let mut dl_fl = Tensor2::zeros(b, 1);
        let mut dl_t1c = Tensor2::zeros(b, 1);
        for r in 0..b {
            let dl = softmax_backward(cache.w.row(r), dw.row(r));
            dl_fl.set(r, 0, dl[0]);
            dl_t1c.set(r, 0, dl[1]);
        }
        let d_fl = self.router.backward(ps, &cache.f_fl, &dl_fl)?;
        let d_t1c = self.router.backward(ps, &cache.f_t1c, &dl_t1c)?;
        Ok((d_fl, d_t1c))
    }

    /// `f_f = proj([w_FL·e_FL, w_T1c·e_T1c])`; returns `(e_w_fl, e_w_t1c, f_f)`.
    #[allow(clippy::type_complexity)]
    pub fn fuse<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        e_fl: &Tensor2<S>,
        e_t1c: &Tensor2<S>,
        w: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>, Tensor2<S>, FuseCache<S>)> {
        let scale_rows = |e: &Tensor2<S>, col: usize| {
            let mut out = e.clone();
            for r in 0..e.rows() {
                let wk = w.get(r, col);
                out.row_mut(r).iter_mut().for_each(|v| *v *= wk);
            }
            out
        };
        if w.cols() != 2 || w.rows() != e_fl.rows() {
            return Err(Error::shape("fuse weights", format!("{} x 2", e_fl.rows()), format!("{:?}", w.shape())));
        }
        let e_w_fl = scale_rows(e_fl, 0);
        let e_w_t1c = scale_rows(e_t1c, 1);
        let input = Tensor2::hconcat(&[&e_w_fl, &e_w_t1c])?;
        let f_f = self.proj.forward(ps, &input)?;
        Ok((
            e_w_fl,
            e_w_t1c,
            f_f,
            FuseCache {
                e_fl: e_fl.clone(),
                e_t1c: e_t1c.clone(),
                w: w.clone(),
                input,
            },
        ))
    }

    /// Returns `(d e_FL, d e_T1c, d w)`.
    pub fn fuse_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &FuseCache<S>,
        d_f_f: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>, Tensor2<S>)> {
        let d_input = self.proj.backward(ps, &cache.input, d_f_f)?;
        let w2 = 2 * self.expert_dim;
        let parts = d_input.split_cols(&[w2, w2])?;
        let b = d_f_f.rows();
        let mut dw = Tensor2::zeros(b, 2);
        let mut d_fl = parts[0].clone();
        let mut d_t1c = parts[1].clone();
        for r in 0..b {
            let dot = |g: &[S], e: &[S]| g.iter().zip(e).map(|(&x, &y)| x * y).sum::<S>();
            dw.set(r, 0, dot(parts[0].row(r), cache.e_fl.row(r)));
            dw.set(r, 1, dot(parts[1].row(r), cache.e_t1c.row(r)));
            let (w_fl, w_t1c) = (cache.w.get(r, 0), cache.w.get(r, 1));
            d_fl.row_mut(r).iter_mut().for_each(|v| *v *= w_fl);
            d_t1c.row_mut(r).iter_mut().for_each(|v| *v *= w_t1c);
        }
        Ok((d_fl, d_t1c, dw))
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_fl: &Tensor2<S>,
        f_t1c: &Tensor2<S>,
    ) -> Result<(FusionState<S>, DwefmCache<S>)> {
        let (e_fl, e_t1c, views) = self.expert_views(ps, f_fl, f_t1c)?;
        let (w, route) = self.route(ps, f_fl, f_t1c)?;
        let (e_w_fl, e_w_t1c, f_f, fuse) = self.fuse(ps, &e_fl, &e_t1c, &w)?;
        Ok((
            FusionState {
                e_fl,
                e_t1c,
                w,
                e_w_fl,
                e_w_t1c,
                f_f,
            },
            DwefmCache { views, route, fuse },
        ))
    }

    /// Returns `(d f_FL, d f_T1c)`.
    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &DwefmCache<S>,
        d_f_f: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let (d_e_fl, d_e_t1c, dw) = self.fuse_backward(ps, &cache.fuse, d_f_f)?;
        let (mut d_fl, mut d_t1c) = self.route_backward(ps, &cache.route, &dw)?;
        let (a, b) = self.expert_views_backward(ps, &cache.views, &d_e_fl, &d_e_t1c)?;
        d_fl.add_assign(&a)?;
        d_t1c.add_assign(&b)?;
        Ok((d_fl, d_t1c))
    }
}

/// Ablation fusion: `f_f = proj([f_FL, f_T1c])`.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    pub proj: Linear,
    pub dim: usize,
}

impl ConcatFusion {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, dim: usize, fused_dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(ps, "concat.proj", "concat", 2 * dim, fused_dim, rng),
            dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_fl: &Tensor2<S>,
        f_t1c: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let input = Tensor2::hconcat(&[f_fl, f_t1c])?;
        Ok((self.proj.forward(ps, &input)?, input))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        input: &Tensor2<S>,
        d_f_f: &Tensor2<S>,
    ) -> Result<(Tensor2<S>, Tensor2<S>)> {
        let d = self.proj.backward(ps, input, d_f_f)?;
        let mut parts = d.split_cols(&[self.dim, self.dim])?.into_iter();
        Ok((parts.next().expect("two"), parts.next().expect("two")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f64>, Dwefm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let m = Dwefm::new(&mut ps, 6, 4, 5, 1e-5, &mut rng);
        (ps, m)
    }

    fn features(rows: usize, dim: usize, phase: f64) -> Tensor2<f64> {
        Tensor2::from_fn(rows, dim, |r, c| ((r * dim + c) as f64 * 0.9 + phase).cos())
    }

    fn copy_expert(ps: &mut ParamStore<f64>, from: &Expert, to: &Expert) {
        for (a, b) in [
            (from.fc1.weight, to.fc1.weight),
            (from.fc1.bias, to.fc1.bias),
            (from.fc2.weight, to.fc2.weight),
            (from.fc2.bias, to.fc2.bias),
            (from.norm.gain, to.norm.gain),
            (from.norm.bias, to.norm.bias),
        ] {
            let v = ps.value(a).clone();
            *ps.value_mut(b) = v;
        }
    }

    #[test]
    fn tied_experts_give_identical_halves() {
        let (mut ps, m) = setup(0);
        copy_expert(&mut ps, &m.expert_fl, &m.expert_t1c);
        let (state, _) = m.forward(&ps, &features(3, 6, 0.0), &features(3, 6, 1.0)).unwrap();
        for e in [&state.e_fl, &state.e_t1c] {
            for r in 0..3 {
                assert_eq!(&e.row(r)[..4], &e.row(r)[4..]);
            }
        }
    }

    #[test]
    fn views_pair_each_input_with_both_experts() {
        let (ps, m) = setup(1);
        let (fl, t1c) = (features(2, 6, 0.0), features(2, 6, 2.0));
        let (state, _) = m.forward(&ps, &fl, &t1c).unwrap();
        let run = |e: &Expert, x: &Tensor2<f64>| e.forward(&ps, x).unwrap().0;
        let expect_fl = Tensor2::hconcat(&[&run(&m.expert_fl, &fl), &run(&m.expert_t1c, &fl)]).unwrap();
        let expect_t1c = Tensor2::hconcat(&[&run(&m.expert_t1c, &t1c), &run(&m.expert_fl, &t1c)]).unwrap();
        assert_eq!(state.e_fl, expect_fl);
        assert_eq!(state.e_t1c, expect_t1c);
    }

    #[test]
    fn zero_input_with_zero_biases_is_zero() {
        let (mut ps, m) = setup(2);
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.param(id).name.ends_with("bias") {
                ps.value_mut(id).data_mut().fill(0.0);
            }
        }
        let z = Tensor2::zeros(2, 6);
        let (state, _) = m.forward(&ps, &z, &z).unwrap();
        assert!(state.e_fl.data().iter().all(|&v| v == 0.0));
        assert!(state.f_f.data().iter().all(|&v| v == 0.0));
        assert!(state.w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn router_softmax_oracle() {
        let (mut ps, m) = setup(3);
        let w = ps.value_mut(m.router.weight);
        w.data_mut().fill(0.0);
        w.set(0, 0, 1.0);
        ps.value_mut(m.router.bias).data_mut().fill(0.7);
        let mut fl = Tensor2::zeros(1, 6);
        fl.set(0, 0, 3f64.ln());
        let (w, _) = m.route(&ps, &fl, &Tensor2::zeros(1, 6)).unwrap();
        assert!((w.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((w.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_inputs_get_equal_weights() {
        let (ps, m) = setup(4);
        let x = features(4, 6, 0.3);
        let (w, _) = m.route(&ps, &x, &x).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weights_sum_to_one() {
        let (ps, m) = setup(5);
        let (w, _) = m.route(&ps, &features(8, 6, 0.0).scale(10.0), &features(8, 6, 4.0)).unwrap();
        for r in 0..8 {
            assert!((w.get(r, 0) + w.get(r, 1) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_weight_selects_a_branch() {
        let (ps, m) = setup(6);
        let (e_fl, e_t1c, _) = m.expert_views(&ps, &features(1, 6, 0.0), &features(1, 6, 1.0)).unwrap();
        let w = Tensor2::row_vector(&[1.0, 0.0]);
        let (e_w_fl, e_w_t1c, f_f, _) = m.fuse(&ps, &e_fl, &e_t1c, &w).unwrap();
        assert_eq!(e_w_fl, e_fl);
        assert!(e_w_t1c.data().iter().all(|&v| v == 0.0));
        let input = Tensor2::hconcat(&[&e_fl, &Tensor2::zeros(1, 8)]).unwrap();
        assert_eq!(f_f, m.proj.forward(&ps, &input).unwrap());
    }

    #[test]
    fn fusion_is_affine_in_weighted_views() {
        let (ps, m) = setup(7);
        let (e_fl, e_t1c, _) = m.expert_views(&ps, &features(1, 6, 0.0), &features(1, 6, 1.0)).unwrap();
        let bias = ps.value(m.proj.bias).data().to_vec();
        let f = |w: [f64; 2]| {
            let out = m.fuse(&ps, &e_fl, &e_t1c, &Tensor2::row_vector(&w)).unwrap().2;
            out.data().iter().zip(&bias).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let (a, b, ab) = (f([0.3, 0.0]), f([0.0, 0.7]), f([0.3, 0.7]));
        for j in 0..5 {
            assert!((a[j] + b[j] - ab[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_experts_and_inputs_swaps_views() {
        let (mut ps, m) = setup(8);
        let (fl, t1c) = (features(2, 6, 0.0), features(2, 6, 1.5));
        let (a, _) = m.forward(&ps, &fl, &t1c).unwrap();
        // Exchange the two experts' parameters.
        let saved: Vec<_> = [
            m.expert_fl.fc1.weight,
            m.expert_fl.fc1.bias,
            m.expert_fl.fc2.weight,
            m.expert_fl.fc2.bias,
            m.expert_fl.norm.gain,
            m.expert_fl.norm.bias,
        ]
        .iter()
        .map(|&id| ps.value(id).clone())
        .collect();
        copy_expert(&mut ps, &m.expert_t1c, &m.expert_fl);
        for (id, v) in [
            m.expert_t1c.fc1.weight,
            m.expert_t1c.fc1.bias,
            m.expert_t1c.fc2.weight,
            m.expert_t1c.fc2.bias,
            m.expert_t1c.norm.gain,
            m.expert_t1c.norm.bias,
        ]
        .into_iter()
        .zip(saved)
        {
            *ps.value_mut(id) = v;
        }
        let (b, _) = m.forward(&ps, &t1c, &fl).unwrap();
        assert_eq!(a.e_fl, b.e_t1c);
        assert_eq!(a.e_t1c, b.e_fl);
        for r in 0..2 {
            assert_eq!(a.w.get(r, 0), b.w.get(r, 1));
            assert_eq!(a.w.get(r, 1), b.w.get(r, 0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut ps, m) = setup(9);
        let fl_id = ps.add("input.fl", "input", features(3, 6, 0.2));
        let t1c_id = ps.add("input.t1c", "input", features(3, 6, 1.1).scale(1.5));
        let g = features(3, 5, 2.5);
        let report = grad_check(&mut ps, GradCheckOptions::default(), |ps| {
            let (fl, t1c) = (ps.value(fl_id).clone(), ps.value(t1c_id).clone());
            let (state, cache) = m.forward(ps, &fl, &t1c)?;
            let loss: f64 = state.f_f.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let (d_fl, d_t1c) = m.backward(ps, &cache, &g)?;
            ps.accumulate(fl_id, &d_fl);
            ps.accumulate(t1c_id, &d_t1c);
            Ok(loss)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn concat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamStore::new();
        let c = ConcatFusion::new(&mut ps, 4, 3, &mut rng);
        let fl_id = ps.add("input.fl", "input", features(2, 4, 0.0));
        let t1c_id = ps.add("input.t1c", "input", features(2, 4, 1.0));
        let g = features(2, 3, 0.5);
        let report = grad_check(&mut ps, GradCheckOptions::default(), |ps| {
            let (fl, t1c) = (ps.value(fl_id).clone(), ps.value(t1c_id).clone());
            let (f_f, input) = c.forward(ps, &fl, &t1c)?;
            let loss: f64 = f_f.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let (d_fl, d_t1c) = c.backward(ps, &input, &g)?;
            ps.accumulate(fl_id, &d_fl);
            ps.accumulate(t1c_id, &d_t1c);
            Ok(loss)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (ps, m) = setup(11);
        assert!(m.forward(&ps, &features(2, 6, 0.0), &features(3, 6, 0.0)).is_err());
        assert!(m.forward(&ps, &features(2, 5, 0.0), &features(2, 5, 0.0)).is_err());
        let bad_w = Tensor2::zeros(1, 3);
        let e = Tensor2::zeros(1, 8);
        assert!(m.fuse(&ps, &e, &e, &bad_w).is_err());
    }
}
