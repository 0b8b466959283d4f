//! Named parameter tensors and flat views over them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// A row-major tensor with a stable name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Callback receiving a tensor's name, shape and row-major values.
pub type TensorVisitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// A fixed, ordered collection of parameter tensors.
pub trait ParamSet {
    fn visit(&self, f: &mut TensorVisitor<'_>);

    /// Visits the same tensors in the same order as [`ParamSet::visit`].
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, data| {
            out.push(NamedTensor {
                name: name.to_owned(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Name of the tensor holding flat index `index`.
    fn name_of(&self, index: usize) -> Option<String> {
        let mut offset = 0;
        let mut found = None;
        self.visit(&mut |name, _, data| {
            if found.is_none() && index < offset + data.len() {
                found = Some(format!("{name}[{}]", index - offset));
            }
            offset += data.len();
        });
        found
    }

    /// Overwrites every tensor from `tensors`, matching by name and shape.
    fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), ParamError> {
        let by_name: HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut expected = Vec::new();
        self.visit(&mut |name, shape, _| expected.push((name.to_owned(), shape.to_vec())));
        for (name, shape) in &expected {
            let t = by_name.get(name.as_str()).ok_or_else(|| ParamError::Missing(name.clone()))?;
            if &t.shape != shape {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
        self.visit_mut(&mut |name, data| data.copy_from_slice(&by_name[name].data));
        Ok(())
    }
}
