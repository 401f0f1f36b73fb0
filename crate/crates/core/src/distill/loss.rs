//! Loss terms for two-teacher distillation and their student-side gradients.
//!
//! Guide (teacher or trainee) quantities are constants: gradients only flow
//! into the student.

use serde::{Deserialize, Serialize};

use crate::arch::LayerSpec;
use crate::engine::{ForwardTrace, OutputGrads};
use crate::error::{Error, Result};

use super::plan::Lambdas;

/// Floor applied to map norms before normalisation.
pub const NORM_EPS: f64 = 1e-12;

/// Mean over the batch of `‖t_i − s_i‖²`.
pub fn distillation_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    check_pairs(teacher, student)?;
    if teacher.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = teacher.iter().zip(student).map(|(t, s)| sq_dist(t, s)).sum();
    Ok(total / teacher.len() as f64)
}

fn check_pairs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} teacher rows vs {} student rows", a.len(), b.len())));
    }
    if let Some((i, (x, y))) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x.len() != y.len()) {
        return Err(Error::Shape(format!("row {i}: widths {} and {}", x.len(), y.len())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    (v.iter().map(|x| x / n).collect(), n)
}

/// `‖t/‖t‖ − s/‖s‖‖²` for one pair of maps of equal width.
pub fn map_distance(teacher: &[f64], student: &[f64]) -> f64 {
    sq_dist(&normalized(teacher).0, &normalized(student).0)
}

/// Gradient of [`map_distance`] with respect to the student map.
fn map_distance_grad(teacher: &[f64], student: &[f64]) -> Vec<f64> {
    let (t_hat, _) = normalized(teacher);
    let raw_norm = student.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (s_hat, n) = normalized(student);
    let g: Vec<f64> = s_hat.iter().zip(&t_hat).map(|(s, t)| 2.0 * (s - t)).collect();
    if raw_norm <= NORM_EPS {
        return g.into_iter().map(|v| v / n).collect();
    }
    let dot: f64 = s_hat.iter().zip(&g).map(|(a, b)| a * b).sum();
    g.iter().zip(&s_hat).map(|(gi, si)| (gi - si * dot) / n).collect()
}

/// Mean over the batch of [`map_distance`] for maps already at a common width.
pub fn attention_loss(teacher_maps: &[Vec<f64>], student_maps: &[Vec<f64>]) -> Result<f64> {
    check_pairs(teacher_maps, student_maps)?;
    if teacher_maps.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = teacher_maps.iter().zip(student_maps).map(|(t, s)| map_distance(t, s)).sum();
    Ok(total / teacher_maps.len() as f64)
}

/// Attention summary of one layer output: per-channel spatial mean for
/// convolutional layers, the output itself otherwise.
pub fn attention_map(layer: &LayerSpec, output: &[f64]) -> Vec<f64> {
    if layer.kind.is_conv() {
        let plane = output.len() / layer.output_dim.max(1);
        output
            .chunks(plane.max(1))
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect()
    } else {
        output.to_vec()
    }
}

fn attention_map_adjoint(layer: &LayerSpec, output_len: usize, d_map: &[f64]) -> Vec<f64> {
    if layer.kind.is_conv() {
        let plane = output_len / layer.output_dim.max(1);
        d_map
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / plane as f64, plane))
            .collect()
    } else {
        d_map.to_vec()
    }
}

fn bin(j: usize, len: usize, width: usize) -> (usize, usize) {
    (j * len / width, ((j + 1) * len).div_ceil(width))
}

/// Adaptive average pooling of `v` down to `width` bins.
pub fn adaptive_pool(v: &[f64], width: usize) -> Vec<f64> {
    if width >= v.len() {
        return v.to_vec();
    }
    (0..width)
        .map(|j| {
            let (a, b) = bin(j, v.len(), width);
            v[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

fn adaptive_pool_adjoint(len: usize, d: &[f64]) -> Vec<f64> {
    let width = d.len();
    if width >= len {
        return d.to_vec();
    }
    let mut out = vec![0.0; len];
    for (j, &g) in d.iter().enumerate() {
        let (a, b) = bin(j, len, width);
        for o in &mut out[a..b] {
            *o += g / (b - a) as f64;
        }
    }
    out
}

/// Attention maps of every hidden layer of one guide network, per sample.
#[derive(Clone, Debug, Default)]
pub struct GuideSignals {
    pub logits: Vec<Vec<f64>>,
    /// `maps[sample][layer]` for the guide's hidden layers.
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl GuideSignals {
    pub fn from_trace(layers: &[LayerSpec], trace: &ForwardTrace) -> Self {
        let hidden = layers.len().saturating_sub(1);
        GuideSignals {
            logits: trace.logits(),
            maps: trace
                .samples
                .iter()
                .map(|s| (0..hidden).map(|j| attention_map(&layers[j], &s.outputs[j])).collect())
                .collect(),
        }
    }
}

/// Attention and distillation loss of a student trace against a set of guides,
/// each averaged over guides, with the matching upstream gradients.
///
/// Hidden layer `j` of the student is paired with hidden layer `j` of each
/// guide; maps of different widths are pooled down to the smaller width. The
/// per-pair distances are averaged over pairs and over the batch.
pub struct GuideTerms {
    pub attention: f64,
    pub distillation: f64,
    pub d_attention: Vec<Vec<Vec<f64>>>,
    pub d_logits: Vec<Vec<f64>>,
}

pub fn guide_terms(student_layers: &[LayerSpec], trace: &ForwardTrace, guides: &[&GuideSignals]) -> Result<GuideTerms> {
    let n = trace.len();
    let hidden = student_layers.len().saturating_sub(1);
    let logits = trace.logits();
    let mut attention = 0.0;
    let mut distillation = 0.0;
    let mut d_attention = vec![vec![Vec::new(); hidden]; n];
    let mut d_logits = vec![vec![0.0; logits.first().map_or(0, Vec::len)]; n];
    if guides.is_empty() || n == 0 {
        return Ok(GuideTerms {
            attention,
            distillation,
            d_attention,
            d_logits,
        });
    }
    let g_scale = 1.0 / guides.len() as f64;
    let n_scale = 1.0 / n as f64;
    for guide in guides {
        distillation += g_scale * distillation_loss(&guide.logits, &logits)?;
        for (i, (s, t)) in logits.iter().zip(&guide.logits).enumerate() {
            for (d, (a, b)) in d_logits[i].iter_mut().zip(s.iter().zip(t)) {
                *d += g_scale * n_scale * 2.0 * (a - b);
            }
        }
        let pairs = hidden.min(guide.maps.first().map_or(0, Vec::len));
        if pairs == 0 {
            continue;
        }
        let p_scale = 1.0 / pairs as f64;
        for (i, sample) in trace.samples.iter().enumerate() {
            for j in 0..pairs {
                let s_map = attention_map(&student_layers[j], &sample.outputs[j]);
                let t_map = &guide.maps[i][j];
                let width = s_map.len().min(t_map.len());
                let (sp, tp) = (adaptive_pool(&s_map, width), adaptive_pool(t_map, width));
                attention += g_scale * p_scale * n_scale * map_distance(&tp, &sp);
                let g: Vec<f64> = map_distance_grad(&tp, &sp)
                    .into_iter()
                    .map(|v| v * g_scale * p_scale * n_scale)
                    .collect();
                let g = attention_map_adjoint(&student_layers[j], sample.outputs[j].len(), &adaptive_pool_adjoint(s_map.len(), &g));
                let slot = &mut d_attention[i][j];
                if slot.is_empty() {
                    *slot = g;
                } else {
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok(GuideTerms {
        attention,
        distillation,
        d_attention,
        d_logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    PreHalt,
    PostHalt,
}

/// Raw loss components before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce_student: f64,
    pub ce_trainee: f64,
    pub attention: f64,
    pub distillation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub branch: Branch,
    pub ce_student: f64,
    pub ce_trainee: f64,
    pub attention: f64,
    pub distillation: f64,
    pub combined: f64,
}

/// Weighted total for `branch`.
pub fn combine(parts: &LossParts, lambdas: &Lambdas, branch: Branch) -> f64 {
    let base = lambdas.l1 * parts.ce_student + lambdas.l2 * parts.attention + lambdas.l3 * parts.distillation;
    match branch {
        Branch::PreHalt => base + lambdas.l4 * parts.ce_trainee,
        Branch::PostHalt => base,
    }
}

/// Combined loss for `epoch` (1-based): the trainee term is present while
/// `epoch ≤ h`.
pub fn combined_loss(parts: &LossParts, lambdas: &Lambdas, halting_epoch: usize, epoch: usize) -> LossBreakdown {
    let branch = if epoch <= halting_epoch { Branch::PreHalt } else { Branch::PostHalt };
    LossBreakdown {
        epoch,
        branch,
        ce_student: parts.ce_student,
        ce_trainee: parts.ce_trainee,
        attention: parts.attention,
        distillation: parts.distillation,
        combined: combine(parts, lambdas, branch),
    }
}

/// Upstream gradients of `λ1·CE + λ2·AL + λ3·DL` for the student.
pub fn student_upstream(d_ce: &[Vec<f64>], terms: &GuideTerms, lambdas: &Lambdas) -> OutputGrads {
    let logits = d_ce
        .iter()
        .zip(&terms.d_logits)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| lambdas.l1 * x + lambdas.l3 * y).collect())
        .collect();
    let hidden = terms
        .d_attention
        .iter()
        .map(|layers| {
            layers
                .iter()
                .map(|g| g.iter().map(|v| lambdas.l2 * v).collect())
                .collect()
        })
        .collect();
    OutputGrads { logits, hidden }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(distillation_loss(&[vec![1.0, 2.0]], &[vec![0.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(distillation_loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert!((attention_loss(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap() - 2.0).abs() < 1e-15);
        assert!(attention_loss(&[vec![1.0, 2.0]], &[vec![3.0, 6.0]]).unwrap() < 1e-30);
        assert!(distillation_loss(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn zero_map_uses_norm_floor() {
        let v = attention_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_adjoint_matches_pooling() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let p = adaptive_pool(&v, 3);
        let d = vec![0.3, -0.2, 0.7];
        let lhs: f64 = p.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(adaptive_pool_adjoint(5, &d)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn branch_switch_differs_by_trainee_term() {
        let parts = LossParts {
            ce_student: 0.7,
            ce_trainee: 1.3,
            attention: 0.2,
            distillation: 0.4,
        };
        let l = Lambdas::uniform();
        let a = combined_loss(&parts, &l, 5, 5);
        let b = combined_loss(&parts, &l, 5, 6);
        assert_eq!(a.branch, Branch::PreHalt);
        assert_eq!(b.branch, Branch::PostHalt);
        assert!((a.combined - b.combined - l.l4 * parts.ce_trainee).abs() < 1e-15);
    }
}
