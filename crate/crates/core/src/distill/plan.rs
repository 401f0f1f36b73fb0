use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weights. `l1 + l2 + l3 = 1`, each in `(0, 1)`; `l4` weights the
/// trainee's cross-entropy and is fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

pub const SIMPLEX_TOL: f64 = 1e-9;

impl Lambdas {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self> {
        let l = Lambdas { l1, l2, l3, l4: 1.0 };
        l.check()?;
        Ok(l)
    }

    pub fn uniform() -> Self {
        Lambdas {
            l1: 1.0 / 3.0,
            l2: 1.0 / 3.0,
            l3: 1.0 / 3.0,
            l4: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    pub fn check(&self) -> Result<()> {
        let [a, b, c] = self.as_array();
        if ![a, b, c].iter().all(|&v| v > 0.0 && v < 1.0) {
            return Err(Error::InvalidArgument(format!("lambdas ({a}, {b}, {c}) must each lie in (0, 1)")));
        }
        if ((a + b + c) - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("lambdas sum to {}, expected 1", a + b + c)));
        }
        if self.l4 != 1.0 {
            return Err(Error::InvalidArgument("lambda4 is fixed at 1".into()));
        }
        Ok(())
    }
}

/// Training schemes compared in the ablation.
///
/// | scheme | student start | guides of the student | trainee |
/// |---|---|---|---|
/// | S1 | random | pretrained teacher (no attention term) | none |
/// | S2 | random | trainee | trained alongside, independent |
/// | S3 | random, prefix shared with trainee | trainee | trained alongside |
/// | S4 | random | teacher + trainee | trained alongside under the teacher |
/// | S5 | compressed teacher, prefix shared with trainee | teacher + trainee | trained for all epochs under the teacher |
/// | S6 | as S5 | as S5 until `h`, then teacher only | frozen after epoch `h` |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [Scheme::S1, Scheme::S2, Scheme::S3, Scheme::S4, Scheme::S5, Scheme::S6];

    pub fn has_trainee(self) -> bool {
        self != Scheme::S1
    }

    pub fn teacher_guides(self) -> bool {
        matches!(self, Scheme::S1 | Scheme::S4 | Scheme::S5 | Scheme::S6)
    }

    /// Whether the trainee's logits/maps guide the student.
    pub fn trainee_guides(self) -> bool {
        self.has_trainee()
    }

    /// Whether the pretrained teacher supervises the trainee.
    pub fn teacher_guides_trainee(self) -> bool {
        matches!(self, Scheme::S4 | Scheme::S5 | Scheme::S6)
    }

    pub fn shares_prefix(self) -> bool {
        matches!(self, Scheme::S3 | Scheme::S5 | Scheme::S6)
    }

    pub fn student_from_teacher(self) -> bool {
        matches!(self, Scheme::S5 | Scheme::S6)
    }

    pub fn halts(self) -> bool {
        self == Scheme::S6
    }

    pub fn uses_attention(self) -> bool {
        self != Scheme::S1
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scheme::S1),
            "S2" => Ok(Scheme::S2),
            "S3" => Ok(Scheme::S3),
            "S4" => Ok(Scheme::S4),
            "S5" => Ok(Scheme::S5),
            "S6" => Ok(Scheme::S6),
            _ => Err(Error::InvalidArgument(format!("unknown scheme `{s}` (expected S1..S6)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub lambdas: Lambdas,
    /// Last epoch (1-based) in which the trainee trains. Ignored by schemes
    /// that never halt.
    pub halting_epoch: usize,
    pub total_epochs: usize,
    pub scheme: Scheme,
    pub shared_prefix: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-model gradient norm limit applied before every update; `0` turns
    /// clipping off.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

fn default_clip() -> f64 {
    DEFAULT_GRAD_CLIP
}

impl DistillPlan {
    pub fn check(&self) -> Result<()> {
        self.lambdas.check()?;
        if self.total_epochs == 0 {
            return Err(Error::InvalidArgument("total epochs must be >= 1".into()));
        }
        if self.scheme.halts() && self.halting_epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "halting epoch {} must be below total epochs {}",
                self.halting_epoch, self.total_epochs
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidArgument("eta must be > 0 and batch size >= 1".into()));
        }
        Ok(())
    }

    /// Epoch after which the trainee no longer trains or guides.
    pub fn effective_halt(&self) -> usize {
        if self.scheme.halts() {
            self.halting_epoch
        } else {
            self.total_epochs
        }
    }

    /// Weights actually applied: S1 drops the attention term and renormalises
    /// the rest.
    pub fn effective_lambdas(&self) -> Lambdas {
        if self.scheme.uses_attention() {
            self.lambdas
        } else {
            let s = self.lambdas.l1 + self.lambdas.l3;
            Lambdas {
                l1: self.lambdas.l1 / s,
                l2: 0.0,
                l3: self.lambdas.l3 / s,
                l4: self.lambdas.l4,
            }
        }
    }
}
