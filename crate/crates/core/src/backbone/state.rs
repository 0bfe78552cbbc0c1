use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, named parameter arrays packed into one flat buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an array and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
        });
        self.total += len;
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, idx: usize) -> &ParamSpec {
        &self.specs[idx]
    }

    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let s = &self.specs[idx];
        s.offset..s.offset + s.len
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Name of the array owning flat coordinate `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.specs
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&i))
            .map(|s| s.name.as_str())
            .unwrap_or("?")
    }
}

/// Parameters of one model instance (student or teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub architecture_id: String,
    pub layout: Arc<ParamLayout>,
    pub values: Vec<T>,
}

impl<T: Real> ModelState<T> {
    pub fn new(
        architecture_id: impl Into<String>,
        layout: Arc<ParamLayout>,
        values: Vec<T>,
    ) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "parameter buffer has {} values, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self {
            architecture_id: architecture_id.into(),
            layout,
            values,
        })
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout
            .find(name)
            .map(|i| &self.values[self.layout.range(i)])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.layout.find(name)?;
        let r = self.layout.range(i);
        Some(&mut self.values[r])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteParameter(self.layout.name_of(i).to_owned())),
            None => Ok(()),
        }
    }

    pub fn ensure_compatible<U>(&self, other: &ModelState<U>) -> Result<()> {
        if self.architecture_id != other.architecture_id || self.layout != other.layout {
            return Err(Error::Architecture {
                expected: self.architecture_id.clone(),
                actual: other.architecture_id.clone(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            architecture_id: self.architecture_id.clone(),
            layout: Arc::clone(&self.layout),
            values: self.values.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }

    /// Bit-level fingerprint of the parameter values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.architecture_id.hash(&mut h);
        for v in &self.values {
            v.f64().to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Gradient buffer laid out like the parameters it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub layout: Arc<ParamLayout>,
    pub values: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total();
        Self {
            layout,
            values: vec![T::zero(); n],
        }
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout
            .find(name)
            .map(|i| &self.values[self.layout.range(i)])
    }

    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteGradient(self.layout.name_of(i).to_owned())),
            None => Ok(()),
        }
    }
}
