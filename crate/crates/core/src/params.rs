//! Named parameter arrays shared by the encoders, classifier, and optimizer.

use crate::tensor::{Tape, TensorId};
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Frozen parameters (e.g. non-trainable embeddings) are bound to tapes
    /// without gradient tracking and skipped by the optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of parameters. Order is creation order and is part of
/// the determinism contract: the optimizer and checkpoint writer iterate it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> usize {
        self.add_with(name, shape, values, true)
    }

    pub fn add_with(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
        trainable: bool,
    ) -> usize {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "parameter {name} data does not match its shape"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let ix = self.params.len();
        self.index.insert(name.to_string(), ix);
        self.params.push(Param {
            name: name.to_string(),
            shape,
            values,
            trainable,
        });
        ix
    }

    /// Uniform init in `[-bound, bound]`, drawn in coordinate order.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, shape, values)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> &Param {
        let ix = self.index[name];
        &self.params[ix]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let ix = self.index[name];
        &mut self.params[ix]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn at(&self, ix: usize) -> &Param {
        &self.params[ix]
    }

    pub fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}

/// Parameters bound onto one tape as borrowed leaves, aligned with the
/// [`ParamSet`] order. Built once per tape; encoders look ids up by name.
pub struct BoundParams {
    ids: Vec<TensorId>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn bind<'p>(tape: &mut Tape<'p>, params: &'p ParamSet) -> Self {
        let mut ids = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        for p in params.iter() {
            ids.push(tape.leaf_borrowed(&p.values, p.shape.clone(), p.trainable));
            names.push(p.name.clone());
        }
        BoundParams { ids, names }
    }

    /// Adopt already-created tape leaves (in set order) as the bindings;
    /// used by the gradient checker, whose harness owns the leaves.
    pub fn from_ids(params: &ParamSet, ids: &[TensorId]) -> Self {
        assert_eq!(ids.len(), params.len(), "one leaf per parameter required");
        BoundParams {
            ids: ids.to_vec(),
            names: params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    pub fn id(&self, params: &ParamSet, name: &str) -> TensorId {
        self.ids[params.position(name)]
    }

    /// Tensor ids in `ParamSet` order.
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn ordering_is_stable() {
        let mut ps = ParamSet::new();
        ps.add("b", vec![2], vec![1.0, 2.0]);
        ps.add("a", vec![1], vec![3.0]);
        let names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(ps.position("a"), 1);
    }

    #[test]
    fn uniform_init_is_seed_deterministic() {
        let mut r1 = stream(3, "init");
        let mut r2 = stream(3, "init");
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.add_uniform("w", vec![4, 4], 0.1, &mut r1);
        b.add_uniform("w", vec![4, 4], 0.1, &mut r2);
        assert_eq!(a.get("w").values, b.get("w").values);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut ps = ParamSet::new();
        ps.add("w", vec![1], vec![0.0]);
        ps.add("w", vec![1], vec![0.0]);
    }
}
