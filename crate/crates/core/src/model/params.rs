use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Mat;

/// Named parameter matrices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Register every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .values
            .iter()
            .map(|m| {
                if trainable {
                    tape.leaf(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        BoundParams { store: self, vars }
    }
}

/// Tape variables of a [`ParamStore`].
pub struct BoundParams<'p> {
    store: &'p ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn get(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index.contains_key(name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) struct Init<'a> {
    pub rng: &'a mut Rng,
    pub store: ParamStore,
}

impl Init<'_> {
    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.insert(name, Mat::from_vec(rows, cols, data));
    }

    /// Weight `fan_in × fan_out` plus zero bias `1 × fan_out`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{prefix}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        self.store.insert(format!("{prefix}.b"), Mat::zeros(1, fan_out));
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.store.insert(format!("{prefix}.g"), Mat::filled(1, width, 1.0));
        self.store.insert(format!("{prefix}.b"), Mat::zeros(1, width));
    }

    pub fn constant(&mut self, name: String, value: Mat) {
        self.store.insert(name, value);
    }
}
