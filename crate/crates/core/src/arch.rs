//! Architecture descriptors.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s. Every other module
//! (cost model, runtime, compressor, trainer) consumes this description.
//!
//! Flattening convention between layers:
//!
//! * `Conv` / `FactorizedConv` read an `I x h x w` volume and emit `O x h x w`
//!   (stride 1, zero "same" padding, so the spatial extent is preserved).
//! * `FC` / `FactorizedFC` read `I` values and emit `O`.
//! * Recurrent kinds read `s` steps of `I` features (`I * s` values, step-major)
//!   and emit the final hidden state (`O` values).
//!
//! Adjacent layers are compatible when the flat output width of one equals the
//! flat input width of the next.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    FactorizedConv,
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "FactorizedFC")]
    FactorizedFc,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "CoupledLSTM")]
    CoupledLstm,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "MGU")]
    Mgu,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Conv,
        LayerKind::FactorizedConv,
        LayerKind::Fc,
        LayerKind::FactorizedFc,
        LayerKind::Lstm,
        LayerKind::CoupledLstm,
        LayerKind::Gru,
        LayerKind::Mgu,
    ];

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::FactorizedConv)
    }

    pub fn is_dense(self) -> bool {
        matches!(self, LayerKind::Fc | LayerKind::FactorizedFc)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(
            self,
            LayerKind::Lstm | LayerKind::CoupledLstm | LayerKind::Gru | LayerKind::Mgu
        )
    }

    pub fn is_factorized(self) -> bool {
        matches!(self, LayerKind::FactorizedConv | LayerKind::FactorizedFc)
    }

    /// Kinds produced by a rewrite (factorization or gate reduction).
    pub fn is_reduced(self) -> bool {
        matches!(
            self,
            LayerKind::FactorizedConv
                | LayerKind::FactorizedFc
                | LayerKind::CoupledLstm
                | LayerKind::Mgu
        )
    }

    /// Default gate count: LSTM 4, coupled LSTM 3, GRU 3, MGU 2.
    pub fn default_gates(self) -> Option<usize> {
        match self {
            LayerKind::Lstm => Some(4),
            LayerKind::CoupledLstm => Some(3),
            LayerKind::Gru => Some(3),
            LayerKind::Mgu => Some(2),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::FactorizedConv => "fConv",
            LayerKind::Fc => "FC",
            LayerKind::FactorizedFc => "fFC",
            LayerKind::Lstm => "LSTM",
            LayerKind::CoupledLstm => "cLSTM",
            LayerKind::Gru => "GRU",
            LayerKind::Mgu => "MGU",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One layer of a network. Kind-specific fields are `None` when they do not
/// apply (e.g. `filter_h` on an FC layer).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(rename = "I")]
    pub input_dim: usize,
    #[serde(rename = "O")]
    pub output_dim: usize,
    #[serde(rename = "f", default, skip_serializing_if = "Option::is_none")]
    pub filter_h: Option<usize>,
    #[serde(rename = "g", default, skip_serializing_if = "Option::is_none")]
    pub filter_w: Option<usize>,
    #[serde(rename = "h", default, skip_serializing_if = "Option::is_none")]
    pub feature_h: Option<usize>,
    #[serde(rename = "w", default, skip_serializing_if = "Option::is_none")]
    pub feature_w: Option<usize>,
    #[serde(rename = "s", default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<usize>,
}

impl LayerSpec {
    fn bare(kind: LayerKind, input_dim: usize, output_dim: usize) -> Self {
        LayerSpec {
            kind,
            input_dim,
            output_dim,
            filter_h: None,
            filter_w: None,
            feature_h: None,
            feature_w: None,
            steps: None,
            rank: None,
            gates: None,
        }
    }

    pub fn fc(input_dim: usize, output_dim: usize) -> Self {
        Self::bare(LayerKind::Fc, input_dim, output_dim)
    }

    pub fn factorized_fc(input_dim: usize, output_dim: usize, rank: usize) -> Self {
        LayerSpec {
            rank: Some(rank),
            ..Self::bare(LayerKind::FactorizedFc, input_dim, output_dim)
        }
    }

    pub fn conv(
        input_dim: usize,
        output_dim: usize,
        filter: (usize, usize),
        feature: (usize, usize),
    ) -> Self {
        LayerSpec {
            filter_h: Some(filter.0),
            filter_w: Some(filter.1),
            feature_h: Some(feature.0),
            feature_w: Some(feature.1),
            ..Self::bare(LayerKind::Conv, input_dim, output_dim)
        }
    }

    pub fn factorized_conv(
        input_dim: usize,
        output_dim: usize,
        filter: (usize, usize),
        feature: (usize, usize),
        rank: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::FactorizedConv,
            rank: Some(rank),
            ..Self::conv(input_dim, output_dim, filter, feature)
        }
    }

    pub fn recurrent(kind: LayerKind, input_dim: usize, output_dim: usize, steps: usize) -> Self {
        debug_assert!(kind.is_recurrent());
        LayerSpec {
            steps: Some(steps),
            ..Self::bare(kind, input_dim, output_dim)
        }
    }

    pub fn lstm(input_dim: usize, output_dim: usize, steps: usize) -> Self {
        Self::recurrent(LayerKind::Lstm, input_dim, output_dim, steps)
    }

    pub fn gru(input_dim: usize, output_dim: usize, steps: usize) -> Self {
        Self::recurrent(LayerKind::Gru, input_dim, output_dim, steps)
    }

    /// Effective gate count (explicit override or the kind's default).
    pub fn gate_count(&self) -> Option<usize> {
        self.gates.or_else(|| self.kind.default_gates())
    }

    fn spatial(&self) -> usize {
        self.feature_h.unwrap_or(1) * self.feature_w.unwrap_or(1)
    }

    /// Number of values this layer reads under the flattening convention.
    pub fn in_width(&self) -> usize {
        if self.kind.is_conv() {
            self.input_dim * self.spatial()
        } else if self.kind.is_recurrent() {
            self.input_dim * self.steps.unwrap_or(1)
        } else {
            self.input_dim
        }
    }

    /// Number of values this layer emits under the flattening convention.
    pub fn out_width(&self) -> usize {
        if self.kind.is_conv() {
            self.output_dim * self.spatial()
        } else {
            self.output_dim
        }
    }

    pub fn describe(&self) -> String {
        let mut s = format!("{}(I={},O={}", self.kind, self.input_dim, self.output_dim);
        if let (Some(f), Some(g)) = (self.filter_h, self.filter_w) {
            s.push_str(&format!(",f={f},g={g}"));
        }
        if let (Some(h), Some(w)) = (self.feature_h, self.feature_w) {
            s.push_str(&format!(",h={h},w={w}"));
        }
        if let Some(steps) = self.steps {
            s.push_str(&format!(",s={steps}"));
        }
        if let Some(r) = self.rank {
            s.push_str(&format!(",R={r}"));
        }
        s.push(')');
        s
    }

    fn check(&self, index: usize, out: &mut Vec<Violation>) {
        let mut push = |rule: String| out.push(Violation { layer: Some(index), rule });
        if self.input_dim == 0 {
            push("input dimension I >= 1 violated".into());
        }
        if self.output_dim == 0 {
            push("output dimension O >= 1 violated".into());
        }
        let conv = self.kind.is_conv();
        for (name, value) in [
            ("f", self.filter_h),
            ("g", self.filter_w),
            ("h", self.feature_h),
            ("w", self.feature_w),
        ] {
            match (conv, value) {
                (true, None) => push(format!("{} layer requires field {name}", self.kind)),
                (true, Some(0)) => push(format!("field {name} >= 1 violated")),
                (false, Some(_)) => push(format!("field {name} not applicable to {}", self.kind)),
                _ => {}
            }
        }
        match (self.kind.is_recurrent(), self.steps) {
            (true, None) => push(format!("{} layer requires step count s", self.kind)),
            (true, Some(0)) => push("step count s >= 1 violated".into()),
            (false, Some(_)) => push(format!("field s not applicable to {}", self.kind)),
            _ => {}
        }
        match (self.kind.is_factorized(), self.rank) {
            (true, None) => push(format!("{} layer requires intermediate size R", self.kind)),
            (true, Some(0)) => push("intermediate size R >= 1 violated".into()),
            (false, Some(_)) => push(format!("field R not applicable to {}", self.kind)),
            _ => {}
        }
        match (self.kind.is_recurrent(), self.gates) {
            (false, Some(_)) => push(format!("{} layer carries no gates", self.kind)),
            (true, Some(0)) => push("gate count >= 1 violated".into()),
            _ => {}
        }
    }
}

/// A declared architecture: ordered layers plus the student/trainee sharing
/// annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub class_count: usize,
    /// Number of leading layers shared between student and trainee.
    /// Defaults to half the layer count, rounded down.
    #[serde(default)]
    pub shared_prefix: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for network-level rules.
    pub layer: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i}: {}", self.rule),
            None => write!(f, "network: {}", self.rule),
        }
    }
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, class_count: usize, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            name: name.into(),
            class_count,
            shared_prefix: None,
            layers,
        }
    }

    pub fn with_shared_prefix(mut self, shared: usize) -> Self {
        self.shared_prefix = Some(shared);
        self
    }

    pub fn shared(&self) -> usize {
        self.shared_prefix.unwrap_or(self.layers.len() / 2)
    }

    /// `L'`: layers not shared between student and trainee.
    pub fn non_shared_count(&self) -> usize {
        self.layers.len().saturating_sub(self.shared())
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::in_width)
    }

    /// All invariant violations; empty iff the network is legal.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.layers.is_empty() {
            out.push(Violation {
                layer: None,
                rule: "at least one layer required".into(),
            });
        }
        if self.class_count < 2 {
            out.push(Violation {
                layer: None,
                rule: "class count k >= 2 violated".into(),
            });
        }
        if self.shared() > self.layers.len() {
            out.push(Violation {
                layer: None,
                rule: format!(
                    "shared prefix {} exceeds layer count {}",
                    self.shared(),
                    self.layers.len()
                ),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check(i, &mut out);
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (produced, expected) = (pair[0].out_width(), pair[1].in_width());
            if produced != expected {
                out.push(Violation {
                    layer: Some(i + 1),
                    rule: format!(
                        "dimension mismatch: previous layer emits {produced} values, layer reads {expected}"
                    ),
                });
            }
        }
        if let Some(last) = self.layers.last() {
            if self.class_count >= 2 && last.out_width() != self.class_count {
                out.push(Violation {
                    layer: Some(self.layers.len() - 1),
                    rule: format!(
                        "final layer emits {} values but class count is {}",
                        last.out_width(),
                        self.class_count
                    ),
                });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let joined: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Err(Error::InvalidSpec(joined.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn summary(&self) -> String {
        let mut counts: Vec<(LayerKind, usize)> = Vec::new();
        for layer in &self.layers {
            match counts.iter_mut().find(|(k, _)| *k == layer.kind) {
                Some((_, n)) => *n += 1,
                None => counts.push((layer.kind, 1)),
            }
        }
        counts
            .iter()
            .map(|(k, n)| format!("{k}={n}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// A structural rewrite of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rewrite", rename_all = "snake_case")]
pub enum LayerRewrite {
    /// Conv/FC -> factorized variant with intermediate size `rank`.
    Factorize { index: usize, rank: usize },
    /// LSTM -> coupled LSTM, GRU -> MGU.
    ReduceGates { index: usize },
}

impl LayerRewrite {
    pub fn index(&self) -> usize {
        match *self {
            LayerRewrite::Factorize { index, .. } | LayerRewrite::ReduceGates { index } => index,
        }
    }
}

/// Applies one rewrite to a single layer.
pub fn rewrite_layer(layer: &LayerSpec, rewrite: &LayerRewrite) -> Result<LayerSpec> {
    match *rewrite {
        LayerRewrite::Factorize { rank, .. } => {
            if rank == 0 {
                return Err(Error::IncompatibleRewrite("factorization rank must be >= 1".into()));
            }
            let kind = match layer.kind {
                LayerKind::Fc | LayerKind::FactorizedFc => LayerKind::FactorizedFc,
                LayerKind::Conv | LayerKind::FactorizedConv => LayerKind::FactorizedConv,
                other => {
                    return Err(Error::IncompatibleRewrite(format!(
                        "cannot factorize a {other} layer"
                    )))
                }
            };
            Ok(LayerSpec {
                kind,
                rank: Some(rank),
                ..layer.clone()
            })
        }
        LayerRewrite::ReduceGates { .. } => reduce_gates(layer),
    }
}

/// LSTM -> coupled LSTM (3 gates), GRU -> MGU (2 gates); dimensions unchanged.
pub fn reduce_gates(layer: &LayerSpec) -> Result<LayerSpec> {
    let kind = match layer.kind {
        LayerKind::Lstm => LayerKind::CoupledLstm,
        LayerKind::Gru => LayerKind::Mgu,
        LayerKind::CoupledLstm | LayerKind::Mgu => {
            return Err(Error::IncompatibleRewrite(format!(
                "{} layer is already gate-reduced",
                layer.kind
            )))
        }
        other => {
            return Err(Error::IncompatibleRewrite(format!(
                "gate reduction applies to recurrent layers, not {other}"
            )))
        }
    };
    Ok(LayerSpec {
        kind,
        gates: None,
        ..layer.clone()
    })
}

/// Builds the student architecture: the shared prefix is copied verbatim and
/// the remaining layers are rewritten per `rewrites`.
pub fn derive_student(teacher: &NetworkSpec, rewrites: &[LayerRewrite]) -> Result<NetworkSpec> {
    teacher.ensure_valid()?;
    let shared = teacher.shared();
    let mut student = teacher.clone();
    student.name = format!("{}-student", teacher.name);
    for rewrite in rewrites {
        let index = rewrite.index();
        if index >= student.layers.len() {
            return Err(Error::IncompatibleRewrite(format!(
                "rewrite targets layer {index} but the network has {} layers",
                student.layers.len()
            )));
        }
        if index < shared {
            return Err(Error::IncompatibleRewrite(format!(
                "layer {index} belongs to the shared prefix ({shared} layers)"
            )));
        }
        student.layers[index] = rewrite_layer(&student.layers[index], rewrite)?;
    }
    if rewrites.is_empty() {
        student.name = teacher.name.clone();
    }
    student
        .ensure_valid()
        .map_err(|e| Error::IncompatibleRewrite(e.to_string()))?;
    Ok(student)
}
