use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::{Error, Result};

/// What a parameter tensor is used for; drives optimizer and decay rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistics: saved and averaged, never trained.
    RunningStat,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningStat)
    }

    /// Weight decay applies to weights only; biases and norm affine
    /// parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl<F: Scalar> Param<F> {
    pub fn new(shape: &[usize], value: Vec<F>, role: ParamRole) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(value.len(), len, "param value length");
        Self {
            grad: vec![F::zero(); len],
            value,
            shape: shape.to_vec(),
            role,
        }
    }

    pub fn filled(shape: &[usize], v: F, role: ParamRole) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len], role)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Anything that owns named parameters.
pub trait Module<F: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p)));
        out
    }

    fn num_trainable(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.role.trainable() {
                total += p.len();
            }
        });
        total
    }

    /// Exports every parameter (including running statistics) as f32.
    fn export(&self, prefix: &str, into: &mut ParamSet) -> Result<()> {
        let mut err = None;
        self.visit(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            let data = p.value.iter().map(|v| v.as_f64() as f32).collect();
            if let Err(e) = into.push(name, p.shape.clone(), data) {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Loads every parameter under `prefix` from `set`; names and shapes must
    /// match exactly.
    fn import(&mut self, prefix: &str, set: &ParamSet) -> Result<()> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match set.get(&name) {
                None => err = Some(Error::validation(format!("missing parameter `{name}`"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(Error::validation(format!(
                        "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                        t.shape, p.shape
                    )))
                }
                Some(t) => {
                    for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                        *dst = F::from_f32(src).unwrap_or_else(F::nan);
                    }
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named collection of f32 tensors; the in-memory form of
/// a checkpoint's parameter payload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter name `{name}`")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::validation(format!(
                "parameter `{name}` has {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(ParamTensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    /// Sub-collection of entries whose name starts with `prefix`, with the
    /// prefix rewritten to `replacement`.
    pub fn rename_prefix(&self, prefix: &str, replacement: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for t in &self.tensors {
            if let Some(rest) = t.name.strip_prefix(prefix) {
                out.push(format!("{replacement}{rest}"), t.shape.clone(), t.data.clone())
                    .expect("renamed names stay unique");
            }
        }
        out
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for t in other.tensors {
            self.push(t.name, t.shape, t.data)?;
        }
        Ok(())
    }
}
