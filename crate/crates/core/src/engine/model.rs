use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Cache};
use super::loss;
use super::tensor::{Gradients, Param};
use crate::arch::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::par;

/// Samples per work unit when accumulating gradients. Fixed so the floating
/// point reduction order never depends on the thread pool.
pub const GRAD_CHUNK: usize = 8;

/// Trainable network: per-layer weights and biases, with a binary mask on
/// every weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedModel {
    pub spec: NetworkSpec,
    pub params: Vec<Vec<Param>>,
    pub seed: u64,
}

/// Everything the backward pass needs from one sample.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    /// Output of every layer; the last entry is the logit vector.
    pub outputs: Vec<Vec<f64>>,
    caches: Vec<Cache>,
}

impl SampleTrace {
    /// Smallest |pre-activation| over the ReLU layers (the last layer has none).
    pub fn relu_margin(&self) -> f64 {
        let n = self.caches.len();
        self.caches
            .iter()
            .take(n.saturating_sub(1))
            .fold(f64::INFINITY, |m, c| m.min(c.relu_margin()))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub samples: Vec<SampleTrace>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.outputs.last().cloned().unwrap_or_default())
            .collect()
    }

    /// Output of layer `layer` for every sample.
    pub fn activations(&self, layer: usize) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.outputs[layer].as_slice()).collect()
    }

    pub fn relu_margin(&self) -> f64 {
        self.samples.iter().fold(f64::INFINITY, |m, s| m.min(s.relu_margin()))
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| loss::argmax(s.outputs.last().map_or(&[][..], Vec::as_slice)))
            .collect()
    }
}

/// Upstream gradients for a backward pass. `hidden[sample][layer]` may be
/// empty for layers that receive no direct loss signal.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<Vec<f64>>>,
}

impl OutputGrads {
    pub fn logits_only(logits: Vec<Vec<f64>>) -> Self {
        OutputGrads {
            logits,
            hidden: Vec::new(),
        }
    }
}

impl MaskedModel {
    /// Randomly initialized model for a valid spec.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.ensure_valid()?;
        if let Some((i, l)) = spec
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.gates.is_some() && l.gates != l.kind.default_gates())
        {
            return Err(Error::InvalidSpec(format!(
                "layer {i}: the runtime supports only the default gate count for {} cells",
                l.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.layers.iter().map(|l| layers::init_layer(l, &mut rng)).collect();
        Ok(MaskedModel { spec, params, seed })
    }

    /// Assembles a model from explicit tensors, checking every shape against
    /// a freshly initialized layout.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Vec<Param>>, seed: u64) -> Result<Self> {
        let reference = MaskedModel::new(spec, seed)?;
        if params.len() != reference.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                reference.params.len()
            )));
        }
        for (li, (got, want)) in params.iter().zip(&reference.params).enumerate() {
            if got.len() != want.len() {
                return Err(Error::Shape(format!("layer {li}: {} tensors, expected {}", got.len(), want.len())));
            }
            for (g, w) in got.iter().zip(want) {
                if g.shape != w.shape || g.values.len() != w.values.len() {
                    return Err(Error::Shape(format!(
                        "layer {li} tensor {}: shape {:?}, expected {:?}",
                        g.name, g.shape, w.shape
                    )));
                }
                if g.mask.is_some() != w.mask.is_some()
                    || g.mask.as_ref().is_some_and(|m| m.len() != g.values.len())
                {
                    return Err(Error::Shape(format!("layer {li} tensor {}: bad mask", g.name)));
                }
            }
        }
        Ok(MaskedModel {
            spec: reference.spec,
            params,
            seed,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.spec.layers.len()
    }

    /// Unmasked weight entries across the whole model.
    pub fn live_connections(&self) -> usize {
        self.params.iter().flatten().map(Param::live_connections).sum()
    }

    pub fn layer_live_connections(&self, layer: usize) -> usize {
        self.params[layer].iter().map(Param::live_connections).sum()
    }

    /// Swaps in a new layer definition and its tensors. The caller is
    /// responsible for dimension compatibility; the resulting spec is validated.
    pub fn replace_layer(&mut self, index: usize, spec: LayerSpec, params: Vec<Param>) -> Result<()> {
        let mut next = self.spec.clone();
        next.layers[index] = spec;
        next.ensure_valid()?;
        self.spec = next;
        self.params[index] = params;
        Ok(())
    }

    fn effective(&self) -> Vec<Vec<Vec<f64>>> {
        self.params
            .iter()
            .map(|ps| ps.iter().map(Param::effective).collect())
            .collect()
    }

    fn check_width(&self, row: &[f64]) -> Result<()> {
        let want = self.spec.input_width();
        if row.len() != want {
            return Err(Error::Shape(format!("input row has width {}, model expects {want}", row.len())));
        }
        Ok(())
    }

    fn forward_one(&self, eff: &[Vec<Vec<f64>>], row: &[f64]) -> SampleTrace {
        let n = self.spec.layers.len();
        let mut outputs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut x = row.to_vec();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (y, cache) = layers::forward(layer, &eff[i], &x, i + 1 < n);
            outputs.push(y.clone());
            caches.push(cache);
            x = y;
        }
        SampleTrace { outputs, caches }
    }

    /// Forward pass over a batch, retaining everything the backward pass needs.
    pub fn forward(&self, rows: &[&[f64]]) -> Result<ForwardTrace> {
        rows.iter().try_for_each(|r| self.check_width(r))?;
        let eff = self.effective();
        let samples = par::map(rows, |r| self.forward_one(&eff, r));
        Ok(ForwardTrace { samples })
    }

    /// Logits only; nothing is cached.
    pub fn logits(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        rows.iter().try_for_each(|r| self.check_width(r))?;
        let eff = self.effective();
        Ok(par::map(rows, |r| {
            self.forward_one(&eff, r).outputs.pop().unwrap_or_default()
        }))
    }

    pub fn predict(&self, rows: &[&[f64]]) -> Result<Vec<usize>> {
        Ok(self.logits(rows)?.iter().map(|z| loss::argmax(z)).collect())
    }

    /// Reverse-mode gradients of a scalar loss whose derivatives with respect
    /// to the logits (and optionally hidden outputs) are given in `upstream`.
    /// Masked weight entries receive zero.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &OutputGrads) -> Gradients {
        let eff = self.effective();
        let n = self.spec.layers.len();
        let idx: Vec<usize> = (0..trace.len()).collect();
        let partials = par::map_chunks(&idx, GRAD_CHUNK, |chunk| {
            let mut g = Gradients::zeros_like(&self.params);
            for &s in chunk {
                let sample = &trace.samples[s];
                let mut d = upstream.logits[s].clone();
                for i in (0..n).rev() {
                    if i + 1 < n {
                        if let Some(extra) = upstream.hidden.get(s).and_then(|h| h.get(i)) {
                            if !extra.is_empty() {
                                d.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    d = layers::backward(
                        &self.spec.layers[i],
                        &eff[i],
                        &sample.caches[i],
                        &d,
                        i + 1 < n,
                        &mut g.layers[i],
                    );
                }
            }
            g
        });
        let mut total = Gradients::zeros_like(&self.params);
        for p in &partials {
            total.add_assign(p);
        }
        for (gl, pl) in total.layers.iter_mut().zip(&self.params) {
            for (g, p) in gl.iter_mut().zip(pl) {
                if let Some(mask) = &p.mask {
                    g.iter_mut().zip(mask).for_each(|(v, &keep)| {
                        if !keep {
                            *v = 0.0
                        }
                    });
                }
            }
        }
        total
    }

    /// Mean cross-entropy over the batch and its parameter gradients.
    pub fn ce_gradients(&self, rows: &[&[f64]], labels: &[usize]) -> Result<(f64, Gradients)> {
        let trace = self.forward(rows)?;
        let (ce, d) = loss::cross_entropy_grad(&trace.logits(), labels);
        Ok((ce, self.backward(&trace, &OutputGrads::logits_only(d))))
    }

    /// `W ← W − eta·grad`. Masks are left untouched.
    pub fn sgd_step(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {eta}")));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        for (pl, gl) in self.params.iter_mut().zip(&grads.layers) {
            for (p, g) in pl.iter_mut().zip(gl) {
                for (i, (w, d)) in p.values.iter_mut().zip(g).enumerate() {
                    if p.mask.as_ref().is_none_or(|m| m[i]) {
                        *w -= eta * d;
                    }
                }
            }
        }
        Ok(())
    }

    /// True when every tensor value is bit-identical to `other`'s.
    pub fn bit_identical(&self, other: &MaskedModel) -> bool {
        self.spec == other.spec
            && self.params.len() == other.params.len()
            && self.params.iter().flatten().zip(other.params.iter().flatten()).all(|(a, b)| {
                a.mask == b.mask
                    && a.values.len() == b.values.len()
                    && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
