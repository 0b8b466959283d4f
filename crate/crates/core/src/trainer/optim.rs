//! Gradient-ascent updates over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::params::{NamedTensor, ParamError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Moves `params` along `grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }

    pub fn state_tensors(&self) -> Vec<NamedTensor> {
        if self.kind == OptimizerKind::Sgd {
            return Vec::new();
        }
        vec![
            NamedTensor {
                name: "adam.m".into(),
                shape: vec![self.m.len()],
                data: self.m.clone(),
            },
            NamedTensor {
                name: "adam.v".into(),
                shape: vec![self.v.len()],
                data: self.v.clone(),
            },
            NamedTensor {
                name: "adam.t".into(),
                shape: vec![1],
                data: vec![self.t as f64],
            },
        ]
    }

    pub fn load_state(&mut self, tensors: &[NamedTensor]) -> Result<(), ParamError> {
        if self.kind == OptimizerKind::Sgd {
            return Ok(());
        }
        let find = |name: &str, len: usize| {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ParamError::Missing(name.into()))?;
            if t.data.len() != len {
                return Err(ParamError::Shape {
                    name: name.into(),
                    expected: vec![len],
                    found: t.shape.clone(),
                });
            }
            Ok(t.data.clone())
        };
        self.m = find("adam.m", self.m.len())?;
        self.v = find("adam.v", self.v.len())?;
        self.t = find("adam.t", 1)?[0] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_steps_along_gradient() {
        let mut p = vec![1.0, 2.0];
        Optimizer::new(OptimizerKind::Sgd, 0.5, 2).ascend(&mut p, &[2.0, -4.0]);
        assert_eq!(p, vec![2.0, 0.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        opt.ascend(&mut p, &[3.0, -0.01]);
        assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-4);
        let mut fresh = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        fresh.load_state(&opt.state_tensors()).unwrap();
        assert_eq!(fresh, opt);
    }
}
