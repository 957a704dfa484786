//! Named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered map of named tensors. Iteration order is the lexical name order,
/// which fixes checkpoint layout and initialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: false }
    }

    /// A frozen store binds its tensors as graph constants.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Kaiming-uniform (fan-in) weights `[out, in, k, k]` and zero bias `[out]`.
pub fn init_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
) {
    let fan_in = (in_ch * kernel * kernel) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let w = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
        T::lit(rng.random_range(-bound..bound))
    });
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}
