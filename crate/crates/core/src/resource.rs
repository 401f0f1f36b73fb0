//! Parameter/FLOP cost model and device budget checks.
//!
//! Per-layer counts follow the regular and reduced cost tables:
//!
//! | kind   | parameters                 | FLOPs                              |
//! |--------|----------------------------|------------------------------------|
//! | Conv   | `I·f·g·O + O`              | `f·g·I·O·h·w`                      |
//! | FC     | `I·O + O`                  | `(2I-1)·O`                         |
//! | LSTM   | `Lg·O·(I+O+1)`             | `(2·Lg·O·(I+O) + 4O)·s`            |
//! | GRU    | `Gg·O·(I+O+1)`             | `(2·Gg·O·(I+O) + 5O)·s`            |
//! | fConv  | `I·f·g·R + R`              | `(f·g·h·w + 1 + O)·R`              |
//! | fFC    | `I·R + R`                  | `((2I-1) + O)·R`                   |
//! | cLSTM  | LSTM row with `Lg' = 3`    |                                    |
//! | MGU    | GRU row with `Gg' = 2`     |                                    |
//!
//! The factorized-conv FLOP row carries no `I` term; it is evaluated exactly
//! as written.
//!
//! Memory and time are both linear in total FLOPs: `t_mem = b_e·ΣF`,
//! `t_exec = e_m·ΣF`, and the scalarized objective is
//! `Ω·t_mem + (1-Ω)·t_exec`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u128,
    pub flops: u128,
}

fn mul(values: &[u128]) -> u128 {
    values
        .iter()
        .try_fold(1u128, |acc, &v| acc.checked_mul(v))
        .expect("layer cost overflows u128")
}

fn add(values: &[u128]) -> u128 {
    values
        .iter()
        .try_fold(0u128, |acc, &v| acc.checked_add(v))
        .expect("layer cost overflows u128")
}

/// Exact integer parameter and FLOP count for one layer.
///
/// The layer must be valid (see [`NetworkSpec::validate`]).
pub fn estimate_layer(layer: &LayerSpec) -> LayerCost {
    let i = layer.input_dim as u128;
    let o = layer.output_dim as u128;
    let f = layer.filter_h.unwrap_or(1) as u128;
    let g = layer.filter_w.unwrap_or(1) as u128;
    let h = layer.feature_h.unwrap_or(1) as u128;
    let w = layer.feature_w.unwrap_or(1) as u128;
    let s = layer.steps.unwrap_or(1) as u128;
    let r = layer.rank.unwrap_or(1) as u128;
    let gates = layer.gate_count().unwrap_or(0) as u128;
    let two_i_minus_one = 2 * i - 1;

    match layer.kind {
        LayerKind::Conv => LayerCost {
            params: add(&[mul(&[i, f, g, o]), o]),
            flops: mul(&[f, g, i, o, h, w]),
        },
        LayerKind::Fc => LayerCost {
            params: add(&[mul(&[i, o]), o]),
            flops: mul(&[two_i_minus_one, o]),
        },
        LayerKind::FactorizedConv => LayerCost {
            params: add(&[mul(&[i, f, g, r]), r]),
            flops: mul(&[add(&[mul(&[f, g, h, w]), 1, o]), r]),
        },
        LayerKind::FactorizedFc => LayerCost {
            params: add(&[mul(&[i, r]), r]),
            flops: mul(&[add(&[two_i_minus_one, o]), r]),
        },
        LayerKind::Lstm | LayerKind::CoupledLstm => LayerCost {
            params: mul(&[gates, o, i + o + 1]),
            flops: mul(&[add(&[mul(&[2, gates, o, i + o]), mul(&[4, o])]), s]),
        },
        LayerKind::Gru | LayerKind::Mgu => LayerCost {
            params: mul(&[gates, o, i + o + 1]),
            flops: mul(&[add(&[mul(&[2, gates, o, i + o]), mul(&[5, o])]), s]),
        },
    }
}

/// Per-layer costs and their totals, without any device context.
pub fn network_costs(spec: &NetworkSpec) -> (Vec<LayerCost>, u128, u128) {
    let per_layer: Vec<LayerCost> = spec.layers.iter().map(estimate_layer).collect();
    let params = add(&per_layer.iter().map(|c| c.params).collect::<Vec<_>>());
    let flops = add(&per_layer.iter().map(|c| c.flops).collect::<Vec<_>>());
    (per_layer, params, flops)
}

/// Resolved device profile (memory budget in bytes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Bytes of memory per FLOP.
    pub b_e: f64,
    /// Seconds per FLOP.
    pub e_m: f64,
    /// Memory budget α in bytes.
    pub alpha: f64,
    /// Processing-time budget β in seconds.
    pub beta: f64,
    pub flops_per_second: f64,
}

impl DeviceProfile {
    pub fn new(name: impl Into<String>, b_e: f64, e_m: f64, alpha: f64, beta: f64, flops_per_second: f64) -> Result<Self> {
        let profile = DeviceProfile {
            name: name.into(),
            b_e,
            e_m,
            alpha,
            beta,
            flops_per_second,
        };
        profile.check()?;
        Ok(profile)
    }

    fn check(&self) -> Result<()> {
        for (field, value) in [
            ("b_e", self.b_e),
            ("e_m", self.e_m),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("flops_per_second", self.flops_per_second),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidProfile(format!("{field} must be finite and > 0, got {value}")));
            }
        }
        Ok(())
    }
}

/// Memory budget as written in a profile file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MemoryBudget {
    /// Absolute byte budget.
    Bytes(f64),
    /// Fraction of the uncompressed model's `t_mem`.
    Ratio(f64),
}

/// On-disk device profile. Exactly one of `alpha_bytes` / `alpha_ratio`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfileFile {
    pub name: String,
    pub b_e_bytes_per_flop: f64,
    pub e_m_seconds_per_flop: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bytes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_ratio: Option<f64>,
    pub beta_seconds: f64,
    pub flops_per_second: f64,
}

impl DeviceProfileFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        file.memory_budget()?;
        Ok(file)
    }

    pub fn memory_budget(&self) -> Result<MemoryBudget> {
        match (self.alpha_bytes, self.alpha_ratio) {
            (Some(b), None) => Ok(MemoryBudget::Bytes(b)),
            (None, Some(r)) => Ok(MemoryBudget::Ratio(r)),
            _ => Err(Error::InvalidProfile(
                "exactly one of alpha_bytes / alpha_ratio must be given".into(),
            )),
        }
    }

    /// Resolves a ratio budget against the uncompressed reference network.
    pub fn resolve(&self, reference: &NetworkSpec) -> Result<DeviceProfile> {
        let alpha = match self.memory_budget()? {
            MemoryBudget::Bytes(b) => b,
            MemoryBudget::Ratio(r) => {
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::InvalidProfile(format!("alpha_ratio must be > 0, got {r}")));
                }
                let (_, _, flops) = network_costs(reference);
                r * self.b_e_bytes_per_flop * flops as f64
            }
        };
        DeviceProfile::new(
            self.name.clone(),
            self.b_e_bytes_per_flop,
            self.e_m_seconds_per_flop,
            alpha,
            self.beta_seconds,
            self.flops_per_second,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: LayerKind,
    pub params: u128,
    pub flops: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub network: String,
    pub device: String,
    pub per_layer: Vec<LayerReport>,
    pub total_params: u128,
    pub total_flops: u128,
    /// Bytes.
    pub t_mem: f64,
    /// Seconds.
    pub t_exec: f64,
    pub omega: f64,
    pub objective: f64,
    pub alpha: f64,
    pub beta: f64,
    pub memory_feasible: bool,
    pub time_feasible: bool,
    pub feasible: bool,
}

pub fn estimate_network(spec: &NetworkSpec, device: &DeviceProfile, omega: f64) -> Result<ResourceReport> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!("omega must lie in [0, 1], got {omega}")));
    }
    let (costs, total_params, total_flops) = network_costs(spec);
    let per_layer = costs
        .iter()
        .zip(&spec.layers)
        .enumerate()
        .map(|(index, (c, l))| LayerReport {
            index,
            kind: l.kind,
            params: c.params,
            flops: c.flops,
        })
        .collect();
    let flops = total_flops as f64;
    let t_mem = device.b_e * flops;
    let t_exec = device.e_m * flops;
    let memory_feasible = t_mem <= device.alpha;
    let time_feasible = t_exec <= device.beta;
    Ok(ResourceReport {
        network: spec.name.clone(),
        device: device.name.clone(),
        per_layer,
        total_params,
        total_flops,
        t_mem,
        t_exec,
        omega,
        objective: omega * t_mem + (1.0 - omega) * t_exec,
        alpha: device.alpha,
        beta: device.beta,
        memory_feasible,
        time_feasible,
        feasible: memory_feasible && time_feasible,
    })
}

/// Time to run `flops` at the device's historical processing rate.
pub fn estimate_beta(device: &DeviceProfile, flops: u128) -> f64 {
    flops as f64 / device.flops_per_second
}
