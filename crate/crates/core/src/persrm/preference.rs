use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};

/// Named preference dimensions shared by descriptors, oracles and datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSpace {
    names: Vec<String>,
}

impl PreferenceSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(PadError::BadSpec(
                "at least one preference dimension is required".into(),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', '=']) || n.trim() != n {
                return Err(PadError::BadSpec(format!("invalid dimension name `{n}`")));
            }
            if names[..i].contains(n) {
                return Err(PadError::BadSpec(format!("duplicate dimension name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PadError::UnknownDimension(name.to_string()))
    }

    /// Parses `"polite,verbose=-0.5"` (`+` also separates). An empty string or `none` gives the
    /// empty descriptor; a bare name means intensity 1.
    pub fn parse(&self, text: &str) -> Result<PreferenceDescriptor> {
        let mut values = vec![0.0; self.len()];
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(PreferenceDescriptor { values });
        }
        for part in text.split([',', '+']) {
            let part = part.trim();
            let (name, intensity) = match part.split_once('=') {
                Some((n, v)) => {
                    let v: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| PadError::Config(format!("bad intensity in `{part}`")))?;
                    (n.trim(), v)
                }
                None => (part, 1.0),
            };
            values[self.index_of(name)?] = intensity;
        }
        PreferenceDescriptor::from_values(values)
    }

    pub fn from_map(&self, map: &BTreeMap<String, f64>) -> Result<PreferenceDescriptor> {
        let mut values = vec![0.0; self.len()];
        for (name, &v) in map {
            values[self.index_of(name)?] = v;
        }
        PreferenceDescriptor::from_values(values)
    }

    /// Nonzero entries keyed by name.
    pub fn to_map(&self, p: &PreferenceDescriptor) -> BTreeMap<String, f64> {
        self.names
            .iter()
            .zip(p.values())
            .filter(|(_, &v)| v != 0.0)
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }

    /// Human-readable label such as `polite+verbose` or `none`.
    pub fn label(&self, p: &PreferenceDescriptor) -> String {
        let parts: Vec<String> = self
            .names
            .iter()
            .zip(p.values())
            .filter(|(_, &v)| v != 0.0)
            .map(|(n, &v)| if v == 1.0 { n.clone() } else { format!("{n}={v}") })
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// A user preference `p`: signed intensity in `[-1, 1]` per named
/// dimension, zero meaning inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDescriptor {
    values: Vec<f64>,
}

impl PreferenceDescriptor {
    pub fn empty(m: usize) -> Self {
        Self { values: vec![0.0; m] }
    }

    /// Multi-hot over `active`.
    pub fn active(m: usize, active: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; m];
        for &j in active {
            if j >= m {
                return Err(PadError::DimMismatch {
                    expected: m,
                    got: j + 1,
                });
            }
            values[j] = 1.0;
        }
        Ok(Self { values })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(PadError::BadSpec(format!("preference intensity {v} outside [-1, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `w_p ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceWeights(pub Vec<f64>);

impl PreferenceWeights {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn basis(d: usize, j: usize) -> Self {
        let mut w = vec![0.0; d];
        w[j] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| x * c).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// The value head `π_p`: a linear map from descriptor intensities to `w_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceHead {
    inputs: usize,
    outputs: usize,
    /// Row-major `inputs × outputs`.
    matrix: Vec<f64>,
    trainable: bool,
}

impl PreferenceHead {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            matrix: vec![0.0; inputs * outputs],
            trainable: true,
        }
    }

    pub fn identity(m: usize) -> Self {
        let mut h = Self::zeros(m, m);
        for i in 0..m {
            h.matrix[i * m + i] = 1.0;
        }
        h
    }

    pub fn from_matrix(inputs: usize, outputs: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != inputs * outputs {
            return Err(PadError::DimMismatch {
                expected: inputs * outputs,
                got: matrix.len(),
            });
        }
        Ok(Self {
            inputs,
            outputs,
            matrix,
            trainable: true,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn get(&self, input: usize, output: usize) -> f64 {
        self.matrix[input * self.outputs + output]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// `w = Mᵀ · p`.
    pub fn encode(&self, p: &PreferenceDescriptor) -> Result<PreferenceWeights> {
        if p.len() != self.inputs {
            return Err(PadError::DimMismatch {
                expected: self.inputs,
                got: p.len(),
            });
        }
        let mut w = vec![0.0; self.outputs];
        for (k, &h) in p.values().iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &self.matrix[k * self.outputs..(k + 1) * self.outputs];
            for (wj, m) in w.iter_mut().zip(row) {
                *wj += m * h;
            }
        }
        Ok(PreferenceWeights(w))
    }

    pub(crate) fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if !self.trainable {
            return Err(PadError::FrozenParameters("preference head is frozen"));
        }
        if grad.len() != self.matrix.len() {
            return Err(PadError::DimMismatch {
                expected: self.matrix.len(),
                got: grad.len(),
            });
        }
        for (m, g) in self.matrix.iter_mut().zip(grad) {
            *m -= lr * g;
        }
        Ok(())
    }
}
