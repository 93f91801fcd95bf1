use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::Matrix;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != values.len() {
            return Err(Error::shape("parameter", &shape, &[values.len()]));
        }
        let gradient = vec![0.0; values.len()];
        Ok(Self {
            name,
            shape,
            values,
            gradient,
        })
    }

    /// `(rows, cols)` as seen by the tape; a 1-D parameter is a row vector.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn as_matrix(&self) -> Matrix {
        let (r, c) = self.matrix_dims();
        Matrix::from_vec(r, c, self.values.clone()).expect("parameter shape invariant")
    }
}

/// Named trainable arrays, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::DuplicateParameter(param.name));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    /// Registers a zero-filled parameter.
    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(Parameter::new(name, shape, vec![0.0; n])?)
    }

    /// Registers a parameter drawn uniformly from `[-s, s]`,
    /// `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        rng: &mut R,
    ) -> Result<ParamId> {
        let (fan_out, fan_in) = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Config(format!("{name}: expected 1-D or 2-D shape"))),
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = fan_in * fan_out;
        let values = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
        self.insert(Parameter::new(name, shape, values)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Copies values (not gradients) from `other`, which must hold the same
    /// names and shapes.
    pub fn load_values(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src = other.by_name(&p.name)?;
            if src.shape != p.shape {
                return Err(Error::shape("load_values", &p.shape, &src.shape));
            }
            p.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
