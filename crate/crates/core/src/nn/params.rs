use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters with their Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    dims: Vec<Vec<usize>>,
    values: Vec<Tensor4<R>>,
    m: Vec<Tensor4<R>>,
    v: Vec<Tensor4<R>>,
    step: u64,
    lookup: HashMap<String, ParamId>,
}

/// Storage shape for logical parameter dims: rank-1 vectors live on the
/// channel axis so they broadcast against feature maps.
pub fn storage_shape(dims: &[usize]) -> Result<Shape4> {
    match *dims {
        [] => Ok(Shape4::new(1, 1, 1, 1)),
        [c] => Ok(Shape4::new(1, c, 1, 1)),
        [n, c, h, w] => Ok(Shape4::new(n, c, h, w)),
        _ => Err(Error::Format(format!(
            "unsupported parameter rank {}",
            dims.len()
        ))),
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            dims: Vec::new(),
            values: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, dims: &[usize], value: Tensor4<R>) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let shape = storage_shape(dims)?;
        value.expect_shape("ParamStore::add", shape)?;
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.dims.push(dims.to_vec());
        self.m.push(Tensor4::zeros(shape));
        self.v.push(Tensor4::zeros(shape));
        self.values.push(value);
        self.lookup.insert(name.to_string(), id);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.dims[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<R> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<R> {
        &mut self.values[id.0]
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor4<R>, &Tensor4<R>) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub(crate) fn moments_mut(
        &mut self,
        id: ParamId,
    ) -> (&mut Tensor4<R>, &mut Tensor4<R>, &mut Tensor4<R>) {
        (&mut self.values[id.0], &mut self.m[id.0], &mut self.v[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Sets every parameter to zero (moments untouched).
    pub fn zero_all(&mut self) {
        for t in &mut self.values {
            t.data_mut().fill(R::zero());
        }
    }

    /// Overwrites moments of parameter `id`, e.g. when restoring a checkpoint.
    pub fn set_moments(&mut self, id: ParamId, m: Tensor4<R>, v: Tensor4<R>) -> Result<()> {
        let s = self.values[id.0].shape();
        m.expect_shape("set_moments", s)?;
        v.expect_shape("set_moments", s)?;
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    /// Flattened copy of all parameter values in id order.
    pub fn flat(&self) -> Vec<R> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            dims: self.dims.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
            step: self.step,
            lookup: self.lookup.clone(),
        }
    }
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}
