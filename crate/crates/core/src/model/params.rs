use serde::{Deserialize, Serialize};

use crate::nncore::Tensor;

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) {
        self.entries.push(Param {
            name: name.into(),
            value,
            decay,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Global L2 norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Order-sensitive FNV-1a hash of the raw bits, for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.entries {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// Flattened vector in the attention-weight subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Unit-normalized copy; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0).then(|| Self(self.0.iter().map(|v| v / n).collect()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
