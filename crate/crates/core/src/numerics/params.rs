use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::{Matrix, NumericsError};

/// A dense row-major matrix value with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub value: Matrix,
    pub grad: Option<Matrix>,
}

impl Tensor {
    pub fn new(value: Matrix) -> Self {
        Self { value, grad: None }
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which fixes the layout of checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

pub type GradMap = BTreeMap<String, Matrix>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { tensor: Tensor::new(value), trainable });
    }

    /// Glorot-style normal initialisation.
    pub fn init_weight<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng));
        self.insert(name, value, true);
    }

    pub fn init_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) {
        self.insert(name, Array2::from_elem((rows, cols), v), true);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix, NumericsError> {
        self.params
            .get(name)
            .map(|p| &p.tensor.value)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix, NumericsError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor.value)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NumericsError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.value.len()).sum()
    }
}

/// A tape plus the parameters bound onto it during one forward pass.
/// Each parameter is bound once, so shared weights accumulate gradients.
pub struct Scope<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.tape.leaf(value)
    }

    /// Gradients of every bound trainable parameter. Frozen parameters never
    /// appear; parameters bound but unreached get a zero matrix.
    pub fn collect(&self, grads: &mut Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (name, &v) in &self.bound {
            let param = &self.store.params[name];
            if !param.trainable {
                continue;
            }
            let g = grads.take(v).unwrap_or_else(|| Array2::zeros(param.tensor.value.dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// `acc += other`, inserting missing entries.
pub fn accumulate_grads(acc: &mut GradMap, other: GradMap) {
    for (name, g) in other {
        match acc.get_mut(&name) {
            Some(existing) => *existing += &g,
            None => {
                acc.insert(name, g);
            }
        }
    }
}
