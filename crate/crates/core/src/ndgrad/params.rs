use super::array::DiffArray;
use super::rng::SeededRng;
use super::tape::{Gradients, Tape, Var};
use crate::scalar::Real;

/// Index of a trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, DiffArray<T>)>,
}

/// Parameters bound as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind an explicit list of vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DiffArray<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DiffArray<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut DiffArray<T>> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    /// Total trainable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Copy every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(_, v)| tape.leaf(v.clone())).collect(),
        }
    }

    /// Copy every parameter onto `tape` as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(_, v)| tape.constant(v.clone())).collect(),
        }
    }

    /// Per-parameter gradients, zeros where a parameter did not reach the root.
    pub fn gradients(&self, grads: &Gradients<T>, bound: &Bound) -> Vec<DiffArray<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, v), &var)| grads.get_or_zeros(var, v.shape()))
            .collect()
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut SeededRng) -> DiffArray<T> {
        DiffArray::from_fn(shape, |_| T::lit(rng.uniform_in(-bound, bound)))
    }

    pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut SeededRng) -> DiffArray<T> {
        DiffArray::from_fn(shape, |_| T::lit(std * rng.normal()))
    }

    /// `U(±sqrt(1/fan_in))`
    pub fn fan_in<T: Real>(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> DiffArray<T> {
        uniform(shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
    }
}
