//! Structural compression of a (dropout) model until it fits a device budget.
//!
//! Eligible layers are rewritten in ascending index order: Conv and FC layers
//! are split into two thinner factors through an intermediate width `R`
//! initialised from a truncated SVD, LSTM cells become coupled LSTM cells and
//! GRU cells become MGU cells. The pass stops at the first feasible network.
//! When one full pass is not enough, the ranks of the factorized layers are
//! halved repeatedly (down to 1) before giving up.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arch::{rewrite_layer, LayerKind, LayerRewrite, LayerSpec};
use crate::engine::{MaskedModel, Param};
use crate::error::{Error, Result};
use crate::resource::{estimate_layer, estimate_network, DeviceProfile, ResourceReport};

/// Largest integer `R` with `R < I·O/(I+O)`, or `None` when no positive `R`
/// qualifies.
pub fn factorization_threshold(input_dim: usize, output_dim: usize) -> Option<usize> {
    let (i, o) = (input_dim as u128, output_dim as u128);
    if i == 0 || o == 0 {
        return None;
    }
    let r = (i * o - 1) / (i + o);
    (r >= 1).then_some(r as usize)
}

/// A truncated SVD factorization `W ≈ B·A` with `B: rows×R`, `A: R×cols`.
#[derive(Clone, Debug)]
pub struct RankChoice {
    pub rank: usize,
    /// `‖W − B·A‖_F` for the chosen rank.
    pub reconstruction_error: f64,
    /// Tail-energy error `sqrt(Σ_{j>R} σ_j²)` for `R = 1..=R_start`.
    pub errors: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

fn sorted_svd(w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = w.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]).then(x.cmp(&y)));
    let sigma: Vec<f64> = order.iter().map(|&j| svd.singular_values[j].max(0.0)).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    (u, sigma, vt)
}

/// Rank-`r` factors `(B, A)` of `w` with the singular values split evenly.
pub fn truncated_factors(w: &DMatrix<f64>, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (u, sigma, vt) = sorted_svd(w);
    split_factors(&u, &sigma, &vt, r)
}

fn split_factors(u: &DMatrix<f64>, sigma: &[f64], vt: &DMatrix<f64>, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let avail = sigma.len();
    let b = DMatrix::from_fn(u.nrows(), r, |i, j| if j < avail { u[(i, j)] * sigma[j].sqrt() } else { 0.0 });
    let a = DMatrix::from_fn(r, vt.ncols(), |i, j| if i < avail { sigma[i].sqrt() * vt[(i, j)] } else { 0.0 });
    (b, a)
}

/// Scans ranks downward from `r_start` (clamped to the matrix's legal range)
/// and picks the smallest rank whose error is within `tolerance·‖W‖_F` of the
/// best error in the scan. An all-zero matrix yields rank 1 with zero error.
pub fn choose_rank(w: &DMatrix<f64>, r_start: usize, tolerance: f64) -> Result<RankChoice> {
    let legal = factorization_threshold(w.ncols(), w.nrows()).ok_or_else(|| {
        Error::IncompatibleRewrite(format!("no legal rank for a {}x{} matrix", w.nrows(), w.ncols()))
    })?;
    let top = r_start.clamp(1, legal);
    let norm = w.norm();
    if norm == 0.0 {
        return Ok(RankChoice {
            rank: 1,
            reconstruction_error: 0.0,
            errors: vec![0.0; top],
            a: DMatrix::zeros(1, w.ncols()),
            b: DMatrix::zeros(w.nrows(), 1),
        });
    }
    let (u, sigma, vt) = sorted_svd(w);
    let errors: Vec<f64> = (1..=top)
        .map(|r| sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt())
        .collect();
    let best = errors[top - 1];
    let rank = (1..=top)
        .find(|&r| errors[r - 1] <= best + tolerance.max(0.0) * norm)
        .unwrap_or(top);
    let (b, a) = split_factors(&u, &sigma, &vt, rank);
    let reconstruction_error = (w - &b * &a).norm();
    Ok(RankChoice {
        rank,
        reconstruction_error,
        errors,
        a,
        b,
    })
}

/// `‖W − W_R‖_F` for every `R = 1..=min(rows, cols)`, computed from explicit
/// rank-`R` products.
pub fn reconstruction_errors(w: &DMatrix<f64>) -> Vec<f64> {
    let (u, sigma, vt) = sorted_svd(w);
    (1..=sigma.len())
        .map(|r| {
            let (b, a) = split_factors(&u, &sigma, &vt, r);
            (w - b * a).norm()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationResult {
    pub layer_index: usize,
    pub rank: usize,
    pub reconstruction_error: f64,
    pub params_before: u128,
    pub params_after: u128,
    pub flops_before: u128,
    pub flops_after: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rewrite")]
pub enum RewriteRecord {
    Factorize(FactorizationResult),
    ReduceGates {
        layer_index: usize,
        from: LayerKind,
        to: LayerKind,
        params_before: u128,
        params_after: u128,
        flops_before: u128,
        flops_after: u128,
    },
}

impl RewriteRecord {
    pub fn layer_index(&self) -> usize {
        match self {
            RewriteRecord::Factorize(f) => f.layer_index,
            RewriteRecord::ReduceGates { layer_index, .. } => *layer_index,
        }
    }

    pub fn as_layer_rewrite(&self) -> LayerRewrite {
        match self {
            RewriteRecord::Factorize(f) => LayerRewrite::Factorize {
                index: f.layer_index,
                rank: f.rank,
            },
            RewriteRecord::ReduceGates { layer_index, .. } => LayerRewrite::ReduceGates { index: *layer_index },
        }
    }
}

/// Effective weight of a Conv/FC (or factorized) layer as an `O × (I·f·g)` matrix.
fn dense_weight(spec: &LayerSpec, params: &[Param]) -> DMatrix<f64> {
    let o = spec.output_dim;
    match spec.kind {
        LayerKind::Fc | LayerKind::Conv => {
            let w = params[0].effective();
            DMatrix::from_row_slice(o, w.len() / o, &w)
        }
        LayerKind::FactorizedFc | LayerKind::FactorizedConv => {
            let r = spec.rank.unwrap_or(1);
            let a = params[0].effective();
            let a = DMatrix::from_row_slice(r, a.len() / r, &a);
            let b = DMatrix::from_row_slice(o, r, &params[2].effective());
            b * a
        }
        _ => unreachable!("not a dense layer"),
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect()
}

/// Replaces a Conv/FC layer by its rank-`R` factorization. The output bias is
/// carried over and the intermediate bias starts at zero.
fn factorized_params(spec: &LayerSpec, params: &[Param], b: &DMatrix<f64>, a: &DMatrix<f64>) -> Vec<Param> {
    let r = a.nrows();
    let bias = match spec.kind {
        LayerKind::Fc | LayerKind::Conv => params[1].values.clone(),
        _ => params[3].values.clone(),
    };
    let first_shape = if spec.kind.is_conv() {
        vec![r, spec.input_dim, spec.filter_h.unwrap_or(1), spec.filter_w.unwrap_or(1)]
    } else {
        vec![r, spec.input_dim]
    };
    let (first, mid, second) = if spec.kind.is_conv() { ("K", "k", "P") } else { ("A", "a", "B") };
    vec![
        Param::weight(first, first_shape, row_major(a)),
        Param::bias(mid, vec![0.0; r]),
        Param::weight(second, vec![spec.output_dim, r], row_major(b)),
        Param::bias("b", bias),
    ]
}

/// Gate parameters carried over by gate reduction: LSTM `i,f,o,g` keeps
/// `f,o,g`; GRU `z,r,n` keeps `z` (as the MGU forget gate) and `n`.
fn reduced_gate_params(kind: LayerKind, params: &[Param]) -> Vec<Param> {
    let keep: &[(usize, &str)] = match kind {
        LayerKind::Lstm => &[(1, "f"), (2, "o"), (3, "g")],
        LayerKind::Gru => &[(0, "f"), (2, "n")],
        _ => unreachable!("not reducible"),
    };
    keep.iter()
        .flat_map(|&(q, name)| {
            let mut w = params[2 * q].clone();
            let mut b = params[2 * q + 1].clone();
            w.name = format!("W_{name}");
            b.name = format!("b_{name}");
            [w, b]
        })
        .collect()
}

/// Swaps gate-reduced cell parameters into `model` at `index`.
pub fn reduce_gates_in_model(model: &mut MaskedModel, index: usize) -> Result<RewriteRecord> {
    let layer = model.spec.layers[index].clone();
    let reduced = crate::arch::reduce_gates(&layer)?;
    let params = reduced_gate_params(layer.kind, &model.params[index]);
    let (before, after) = (estimate_layer(&layer), estimate_layer(&reduced));
    model.replace_layer(index, reduced.clone(), params)?;
    Ok(RewriteRecord::ReduceGates {
        layer_index: index,
        from: layer.kind,
        to: reduced.kind,
        params_before: before.params,
        params_after: after.params,
        flops_before: before.flops,
        flops_after: after.flops,
    })
}

/// Factorizes the Conv/FC layer at `index` with a rank chosen by
/// [`choose_rank`] starting at `r_start` (capped by the legal threshold).
/// The rewrite is only applied when it strictly lowers both parameters and
/// FLOPs; otherwise `Ok(None)` is returned and the model is untouched.
pub fn factorize_in_model(
    model: &mut MaskedModel,
    index: usize,
    r_start: usize,
    tolerance: f64,
) -> Result<Option<RewriteRecord>> {
    let layer = model.spec.layers[index].clone();
    if !(layer.kind.is_conv() || layer.kind.is_dense()) {
        return Err(Error::IncompatibleRewrite(format!("cannot factorize a {} layer", layer.kind)));
    }
    let Some(limit) = factorization_threshold(layer.input_dim, layer.output_dim) else {
        return Ok(None);
    };
    let w = dense_weight(&layer, &model.params[index]);
    let choice = choose_rank(&w, r_start.min(limit), tolerance)?;
    let rewritten = rewrite_layer(
        &layer,
        &LayerRewrite::Factorize {
            index,
            rank: choice.rank,
        },
    )?;
    let (before, after) = (estimate_layer(&layer), estimate_layer(&rewritten));
    if after.params >= before.params || after.flops >= before.flops {
        return Ok(None);
    }
    let params = factorized_params(&layer, &model.params[index], &choice.b, &choice.a);
    model.replace_layer(index, rewritten, params)?;
    Ok(Some(RewriteRecord::Factorize(FactorizationResult {
        layer_index: index,
        rank: choice.rank,
        reconstruction_error: choice.reconstruction_error,
        params_before: before.params,
        params_after: after.params,
        flops_before: before.flops,
        flops_after: after.flops,
    })))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub omega: f64,
    /// Rank tolerance as a fraction of `‖W‖_F`.
    pub rank_tolerance: f64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            omega: 0.5,
            rank_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressOutcome {
    pub model: MaskedModel,
    pub before: ResourceReport,
    pub report: ResourceReport,
    pub rewrites: Vec<RewriteRecord>,
    pub feasible: bool,
}

impl CompressOutcome {
    /// The outcome when feasible, otherwise [`Error::Infeasible`] carrying the
    /// closest report achieved.
    pub fn into_result(self) -> Result<CompressOutcome> {
        if self.feasible {
            Ok(self)
        } else {
            Err(Error::Infeasible(Box::new(self.report)))
        }
    }

    pub fn log_json(&self) -> String {
        #[derive(Serialize)]
        struct Log<'a> {
            feasible: bool,
            rewrites: &'a [RewriteRecord],
            before: &'a ResourceReport,
            after: &'a ResourceReport,
        }
        serde_json::to_string_pretty(&Log {
            feasible: self.feasible,
            rewrites: &self.rewrites,
            before: &self.before,
            after: &self.report,
        })
        .expect("compression log serializes")
    }
}

fn rewrite_one(model: &mut MaskedModel, index: usize, tolerance: f64) -> Result<Option<RewriteRecord>> {
    let layer = &model.spec.layers[index];
    match layer.kind {
        LayerKind::Lstm | LayerKind::Gru => reduce_gates_in_model(model, index).map(Some),
        LayerKind::Fc | LayerKind::Conv => factorize_in_model(model, index, usize::MAX, tolerance),
        _ => Ok(None),
    }
}

/// Rewrites eligible layers until the network meets the device budget.
pub fn run(
    model: &MaskedModel,
    device: &DeviceProfile,
    eligible: Range<usize>,
    cfg: &CompressConfig,
) -> Result<CompressOutcome> {
    let before = estimate_network(&model.spec, device, cfg.omega)?;
    let mut current = model.clone();
    let mut report = before.clone();
    let mut rewrites = Vec::new();
    let eligible = eligible.start..eligible.end.min(current.layer_count());

    for index in eligible.clone() {
        if report.feasible {
            break;
        }
        if let Some(rec) = rewrite_one(&mut current, index, cfg.rank_tolerance)? {
            rewrites.push(rec);
            report = estimate_network(&current.spec, device, cfg.omega)?;
        }
    }

    // Rank halving on factorized layers, lowest index first.
    while !report.feasible {
        let mut progressed = false;
        for index in eligible.clone() {
            if report.feasible {
                break;
            }
            let layer = &current.spec.layers[index];
            if !layer.kind.is_factorized() {
                continue;
            }
            let r = layer.rank.unwrap_or(1);
            if r <= 1 {
                continue;
            }
            if let Some(rec) = factorize_in_model(&mut current, index, r / 2, 0.0)? {
                rewrites.push(rec);
                report = estimate_network(&current.spec, device, cfg.omega)?;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    Ok(CompressOutcome {
        feasible: report.feasible,
        model: current,
        before,
        report,
        rewrites,
    })
}
