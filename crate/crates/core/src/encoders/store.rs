use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreRole {
    Online,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    Zeros,
    Normal { std: f64 },
    /// Normal with variance 2 / (fan_in + fan_out).
    Glorot,
}

impl InitSpec {
    fn sample(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        let std = match self {
            InitSpec::Zeros => return Array2::zeros((rows, cols)),
            InitSpec::Normal { std } => std,
            InitSpec::Glorot => (2.0 / (rows + cols) as f64).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
    }
}

/// Named dense parameters with fixed shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub role: StoreRole,
    params: BTreeMap<String, Array2<f64>>,
    inits: BTreeMap<String, InitSpec>,
}

impl ParameterStore {
    pub fn new(role: StoreRole) -> Self {
        ParameterStore { role, params: BTreeMap::new(), inits: BTreeMap::new() }
    }

    /// Add a freshly initialized parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, shape: (usize, usize), init: InitSpec, rng: &mut impl Rng) {
        self.insert(name, init.sample(shape.0, shape.1, rng), init);
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, init: InitSpec) {
        assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        self.params.insert(name.to_string(), value);
        self.inits.insert(name.to_string(), init);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Overwrite a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) {
        let slot = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.dim(), value.dim(), "shape of {name} is fixed");
        *slot = value;
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn init_spec(&self, name: &str) -> InitSpec {
        self.inits[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array2::len).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_schema(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }

    /// A copy of this store under a different role.
    pub fn copy_as(&self, role: StoreRole) -> ParameterStore {
        ParameterStore { role, ..self.clone() }
    }

    /// Put every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for the parameters of one store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schema_and_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new(StoreRole::Online);
        s.add("a", (2, 3), InitSpec::Glorot, &mut rng);
        s.add("b", (1, 3), InitSpec::Zeros, &mut rng);
        let t = s.copy_as(StoreRole::Target);
        assert!(s.same_schema(&t));
        assert_eq!(t.get("a"), s.get("a"));
        assert_eq!(t.role, StoreRole::Target);
        assert_eq!(s.num_scalars(), 9);
        assert!(s.get("b").iter().all(|v| *v == 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new(StoreRole::Online);
        s.add("a", (1, 1), InitSpec::Zeros, &mut rng);
        s.add("a", (1, 1), InitSpec::Zeros, &mut rng);
    }

    #[test]
    #[should_panic(expected = "shape of a is fixed")]
    fn shapes_are_fixed() {
        let mut s = ParameterStore::new(StoreRole::Online);
        s.insert("a", Array2::zeros((1, 2)), InitSpec::Zeros);
        s.set("a", Array2::zeros((2, 1)));
    }
}
