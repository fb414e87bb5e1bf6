//! Named trainable tensors.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other.find(name).ok_or_else(|| alloc::format!("missing parameter {name}"))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(alloc::format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    self.values[i].shape(),
                    src.shape()
                ));
            }
            self.values[i] = src.clone();
        }
        if other.len() != self.len() {
            return Err("parameter count mismatch".to_string());
        }
        Ok(())
    }
}

/// Uniform `(-bound, bound)` initialisation, as used for conv layers with
/// `bound = 1/sqrt(fan_in)`.
pub(crate) fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_from_matches_by_name() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(2, 2));
        a.add("b", Tensor::zeros(2, 1));
        let mut b = ParamStore::new();
        b.add("b", Tensor::full(2, 1, 3.0));
        b.add("w", Tensor::full(2, 2, 1.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.get(a.find("b").unwrap()).data(), &[3.0, 3.0]);
        assert_eq!(a.n_scalars(), 6);

        let mut c = ParamStore::new();
        c.add("w", Tensor::zeros(3, 2));
        c.add("b", Tensor::zeros(2, 1));
        assert!(a.load_from(&c).is_err());
    }
}
