//! Curvature of the distillation losses with respect to the student's input
//! features, for a linear logit layer `s = W·x + b`.
//!
//! Teacher logits, teacher maps and the norm of each student map are held
//! constant at the probe point. Exact diagonal second derivatives come from
//! hyper-dual numbers: seeding both infinitesimal parts of `x_il` with 1 makes
//! the `ε1ε2` part of the loss equal `∂²L/∂x_il²`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::NORM_EPS;
use super::plan::Lambdas;
use crate::arch::LayerKind;
use crate::engine::MaskedModel;
use crate::error::{Error, Result};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperDual {
    pub re: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    /// Variable with both directions seeded.
    pub fn var(v: f64) -> Self {
        HyperDual { re: v, e1: 1.0, e2: 1.0, e12: 0.0 }
    }

    /// `f(self)` given `f`, `f'` and `f''` at the real part.
    fn chain(self, f: f64, d1: f64, d2: f64) -> Self {
        HyperDual {
            re: f,
            e1: d1 * self.e1,
            e2: d1 * self.e2,
            e12: d1 * self.e12 + d2 * self.e1 * self.e2,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        HyperDual { re: self.re + o.re, e1: self.e1 + o.e1, e2: self.e2 + o.e2, e12: self.e12 + o.e12 }
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        HyperDual { re: -self.re, e1: -self.e1, e2: -self.e2, e12: -self.e12 }
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        HyperDual {
            re: self.re * o.re,
            e1: self.re * o.e1 + self.e1 * o.re,
            e2: self.re * o.e2 + self.e2 * o.re,
            e12: self.re * o.e12 + self.e1 * o.e2 + self.e2 * o.e1 + self.e12 * o.re,
        }
    }
}

impl Div for HyperDual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let r = o.re;
        self * o.chain(1.0 / r, -1.0 / (r * r), 2.0 / (r * r * r))
    }
}

impl Scalar for HyperDual {
    fn cst(v: f64) -> Self {
        HyperDual { re: v, e1: 0.0, e2: 0.0, e12: 0.0 }
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let r = self.re;
        self.chain(r.ln(), 1.0 / r, -1.0 / (r * r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "loss")]
pub enum ProbeLoss {
    CrossEntropy,
    Attention,
    Distillation,
    Combined { l1: f64, l2: f64, l3: f64 },
}

impl ProbeLoss {
    pub fn combined(l: &Lambdas) -> Self {
        ProbeLoss::Combined { l1: l.l1, l2: l.l2, l3: l.l3 }
    }
}

/// A linear logit layer evaluated on `n` samples, with the guide quantities
/// it is compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub classes: usize,
    /// `classes × d`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub teacher_logits: Vec<Vec<f64>>,
    pub teacher_maps: Vec<Vec<f64>>,
}

impl ProbePoint {
    pub fn width(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        let (n, d, k) = (self.inputs.len(), self.width(), self.classes);
        let rows_ok = self.inputs.iter().all(|r| r.len() == d)
            && self.teacher_logits.len() == n
            && self.teacher_maps.len() == n
            && self.labels.len() == n
            && self.teacher_logits.iter().chain(&self.teacher_maps).all(|r| r.len() == k);
        if k == 0 || self.weight.len() != k * d || self.bias.len() != k || !rows_ok {
            return Err(Error::Shape("inconsistent probe point".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::Shape(format!("label {y} outside {k} classes")));
        }
        Ok(())
    }

    /// Random point: weights, inputs and guide quantities uniform in `[-2, 2]`.
    pub fn random<R: Rng>(rng: &mut R, n: usize, d: usize, k: usize) -> Self {
        let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..=2.0)).collect() };
        let weight = v(k * d);
        let bias = v(k);
        let inputs = (0..n).map(|_| v(d)).collect();
        let teacher_logits = (0..n).map(|_| v(k)).collect();
        let teacher_maps = (0..n).map(|_| v(k)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        ProbePoint { classes: k, weight, bias, inputs, labels, teacher_logits, teacher_maps }
    }

    /// Probe point at the final FC layer of `student`, guided by `teacher`'s
    /// logits on the same rows.
    pub fn from_models(student: &MaskedModel, teacher: &MaskedModel, rows: &[&[f64]], labels: &[usize]) -> Result<Self> {
        let last = student.spec.layers.last().ok_or_else(|| Error::InvalidSpec("empty network".into()))?;
        if last.kind != LayerKind::Fc {
            return Err(Error::InvalidArgument("convexity probe needs a final FC layer".into()));
        }
        let trace = student.forward(rows)?;
        let n_layers = student.layer_count();
        let inputs = if n_layers == 1 {
            rows.iter().map(|r| r.to_vec()).collect()
        } else {
            trace.activations(n_layers - 2).into_iter().map(<[f64]>::to_vec).collect()
        };
        let params = &student.params[n_layers - 1];
        let teacher_logits = teacher.logits(rows)?;
        Ok(ProbePoint {
            classes: last.output_dim,
            weight: params[0].effective(),
            bias: params[1].effective(),
            inputs,
            labels: labels.to_vec(),
            teacher_maps: teacher_logits.clone(),
            teacher_logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub loss: ProbeLoss,
    /// `∂²L/∂x_il²`, indexed `[sample][feature]`.
    pub second_derivatives: Vec<Vec<f64>>,
    pub min: f64,
}

fn logits<S: Scalar>(p: &ProbePoint, x: &[S]) -> Vec<S> {
    let d = x.len();
    (0..p.classes)
        .map(|j| {
            x.iter()
                .enumerate()
                .fold(S::cst(p.bias[j]), |acc, (l, &xl)| acc + S::cst(p.weight[j * d + l]) * xl)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS)
}

/// Contribution of sample `i` (already divided by `n`) to each loss term.
fn sample_terms<S: Scalar>(p: &ProbePoint, i: usize, x: &[S], student_norm: f64) -> [S; 3] {
    let n = S::cst(p.inputs.len() as f64);
    let s = logits(p, x);
    let m = s.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let lse = s.iter().fold(S::cst(0.0), |a, &v| a + (v - S::cst(m)).exp()).ln() + S::cst(m);
    let ce = (lse - s[p.labels[i]]) / n;
    let t_norm = norm(&p.teacher_maps[i]);
    let al = s.iter().zip(&p.teacher_maps[i]).fold(S::cst(0.0), |a, (&sj, &tj)| {
        let diff = S::cst(tj / t_norm) - sj / S::cst(student_norm);
        a + diff * diff
    }) / n;
    let dl = s.iter().zip(&p.teacher_logits[i]).fold(S::cst(0.0), |a, (&sj, &tj)| {
        let diff = S::cst(tj) - sj;
        a + diff * diff
    }) / n;
    [ce, al, dl]
}

fn weighted<S: Scalar>(loss: ProbeLoss, t: [S; 3]) -> S {
    match loss {
        ProbeLoss::CrossEntropy => t[0],
        ProbeLoss::Attention => t[1],
        ProbeLoss::Distillation => t[2],
        ProbeLoss::Combined { l1, l2, l3 } => S::cst(l1) * t[0] + S::cst(l2) * t[1] + S::cst(l3) * t[2],
    }
}

/// Value of `loss` at the probe point.
pub fn probe_value(point: &ProbePoint, loss: ProbeLoss) -> Result<f64> {
    point.check()?;
    Ok(point
        .inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = norm(&logits(point, x));
            weighted(loss, sample_terms(point, i, x, c))
        })
        .sum())
}

/// Exact diagonal second derivatives of `loss` with respect to every input
/// feature of every sample.
pub fn convexity_probe(point: &ProbePoint, loss: ProbeLoss) -> Result<ConvexityReport> {
    point.check()?;
    let mut min = f64::INFINITY;
    let second_derivatives = point
        .inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let frozen = norm(&logits(point, x));
            (0..x.len())
                .map(|l| {
                    let hx: Vec<HyperDual> = x
                        .iter()
                        .enumerate()
                        .map(|(m, &v)| if m == l { HyperDual::var(v) } else { HyperDual::cst(v) })
                        .collect();
                    let v = weighted(loss, sample_terms(point, i, &hx, frozen)).e12;
                    min = min.min(v);
                    v
                })
                .collect()
        })
        .collect();
    Ok(ConvexityReport { loss, second_derivatives, min })
}
