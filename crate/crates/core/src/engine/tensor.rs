use serde::{Deserialize, Serialize};

/// A trainable tensor. Weight tensors carry a binary connection mask; biases
/// do not (they are never pruned).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

impl Param {
    pub fn weight(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let n = values.len();
        Param {
            name: name.into(),
            shape,
            values,
            mask: Some(vec![true; n]),
        }
    }

    pub fn bias(name: impl Into<String>, values: Vec<f64>) -> Self {
        Param {
            name: name.into(),
            shape: vec![values.len()],
            values,
            mask: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_prunable(&self) -> bool {
        self.mask.is_some()
    }

    pub fn is_live(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    /// `W ⊙ Z`.
    pub fn effective(&self) -> Vec<f64> {
        match &self.mask {
            None => self.values.clone(),
            Some(mask) => self
                .values
                .iter()
                .zip(mask)
                .map(|(&v, &keep)| if keep { v } else { 0.0 })
                .collect(),
        }
    }

    /// Unmasked entries (biases excluded).
    pub fn live_connections(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&k| k).count())
    }
}

/// Gradient buffers congruent to a model's parameters (layer → param → values).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Vec<Param>]) -> Self {
        Gradients {
            layers: layers
                .iter()
                .map(|ps| ps.iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (pa, pb) in a.iter_mut().zip(b) {
                for (x, y) in pa.iter_mut().zip(pb) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.layers.iter_mut().flatten().flatten() {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().flatten().all(|v| v.is_finite())
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.layers.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the norm is at most `limit`; `limit <= 0` disables it.
    pub fn clip_norm(&mut self, limit: f64) {
        let n = self.norm();
        if limit > 0.0 && n > limit {
            self.scale(limit / n);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().flatten().copied().collect()
    }
}
