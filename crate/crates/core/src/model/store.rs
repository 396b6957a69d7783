//! Named, shaped parameter arrays.

use std::collections::HashMap;

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered registry of named 2-D arrays. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Array2<S>>,
    index: HashMap<String, usize>,
}

impl<S> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new site. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<S>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::ModelContract(format!("duplicate site {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn expect_id(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<S>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<S>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn by_id(&self, id: usize) -> &Array2<S> {
        &self.values[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Array2<S> {
        &mut self.values[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array2<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<S>] {
        &mut self.values
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.values {
            v.fill(S::zero());
        }
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn sq_norm(&self) -> S {
        self.values
            .iter()
            .map(|v| v.iter().map(|x| *x * *x).sum::<S>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Self, c: S) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            Zip::from(a).and(b).for_each(|x, &y| *x += c * y);
        }
    }

    /// FNV-1a over every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        for (name, v) in self.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(v.nrows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                bytes.extend_from_slice(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        crate::seed::fnv1a(&bytes)
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| T::lit(x.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gaussian array with standard deviation `std`.
pub(crate) fn randn<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        S::lit(z * std)
    })
}


impl<S> ParamStore<S> {
    /// Two distinct arrays mutably at once.
    pub(crate) fn pair_mut(&mut self, i: usize, j: usize) -> (&mut Array2<S>, &mut Array2<S>) {
        assert_ne!(i, j);
        if i < j {
            let (a, b) = self.values.split_at_mut(j);
            (&mut a[i], &mut b[0])
        } else {
            let (a, b) = self.values.split_at_mut(i);
            (&mut b[0], &mut a[j])
        }
    }
}
