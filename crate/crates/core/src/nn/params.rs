use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub group: String,
    pub value: Tensor2<S>,
    pub grad: Tensor2<S>,
}

/// Owns every learnable tensor of a network together with its gradient
/// accumulator. Parameters belong to named groups; a frozen group never
/// accumulates gradient, so optimizers leave it untouched.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    frozen: BTreeSet<String>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Tensor2<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name,
            group: group.to_string(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers a parameter drawn from `U(-bound, bound)`, `bound = 1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let value = Tensor2::from_fn(rows, cols, |_, _| S::of(dist.sample(rng)));
        self.add(name, group, value)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2<S> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<S> {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Tensor2<S> {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    /// Adds `g` into the gradient of `id` unless its group is frozen.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2<S>) {
        if self.is_frozen(id) {
            return;
        }
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.shape(), g.shape(), "gradient shape for {}", p.name);
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    /// Slice form of [`ParamStore::accumulate`], used for bias vectors.
    pub fn accumulate_slice(&mut self, id: ParamId, g: &[S]) {
        if self.is_frozen(id) {
            return;
        }
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.data().len(), g.len(), "gradient size for {}", p.name);
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_group(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    /// Freezes every group whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let groups: Vec<String> = self
            .groups()
            .into_iter()
            .filter(|g| g.starts_with(prefix))
            .collect();
        self.frozen.extend(groups);
    }

    pub fn is_group_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    #[inline]
    pub fn is_frozen(&self, id: ParamId) -> bool {
        !self.frozen.is_empty() && self.frozen.contains(&self.params[id.0].group)
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }
}
