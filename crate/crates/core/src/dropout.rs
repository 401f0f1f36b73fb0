//! Iterative magnitude dropout with rate re-tuning.
//!
//! Each round masks the fraction `d` of the smallest-magnitude live weights on
//! the targeted layers, retrains for one epoch, and compares the full training
//! loss with the reference loss `ℒ` of the uncompressed model. The loop body
//! always runs at least once; the returned model is the last round whose loss
//! stayed within `ℒ` (round one is kept even when it does not).

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::dataset::Dataset;
use crate::engine::MaskedModel;
use crate::error::{Error, Result};
use crate::training::{dataset_loss, sgd_epoch, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutState {
    pub d: f64,
    pub q_a: usize,
    pub q_b: usize,
    pub iteration: usize,
    pub max_iteration: usize,
    pub c: f64,
}

/// `d · max{ sqrt(Q_b/Q_a), 1 − iteration/(c·max_iteration) }`, clamped to `(0, 1]`.
pub fn update_rate(state: &DropoutState) -> Result<f64> {
    if state.q_a == 0 {
        return Err(Error::InvalidArgument("Q_a must be > 0".into()));
    }
    let denom = state.c * state.max_iteration as f64;
    if denom <= 0.0 || denom.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "c·max_iteration must be > 0, got {denom}"
        )));
    }
    let kept = (state.q_b as f64 / state.q_a as f64).sqrt();
    let schedule = 1.0 - state.iteration as f64 / denom;
    Ok((state.d * kept.max(schedule)).clamp(f64::EPSILON, 1.0))
}

/// Layers targeted when dropout runs on `l` layers: the first `l` layers after
/// the shared prefix.
pub fn target_layers(spec: &NetworkSpec, l: usize) -> Result<Range<usize>> {
    let start = spec.shared();
    if l > spec.non_shared_count() {
        return Err(Error::InvalidArgument(format!(
            "dropout on {l} layers but only {} are outside the shared prefix",
            spec.non_shared_count()
        )));
    }
    Ok(start..start + l)
}

/// Masks `floor(d · live)` of the smallest-|W| live weights on every layer in
/// `layers` (ties broken by position). Already-masked weights stay masked.
/// Returns the number of newly masked entries.
pub fn apply_dropout(model: &mut MaskedModel, d: f64, layers: Range<usize>) -> usize {
    let mut removed = 0;
    for li in layers {
        let Some(params) = model.params.get_mut(li) else { continue };
        let mut live: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, p) in params.iter().enumerate() {
            if let Some(mask) = &p.mask {
                live.extend(
                    mask.iter()
                        .enumerate()
                        .filter(|(_, &k)| k)
                        .map(|(i, _)| (p.values[i].abs(), pi, i)),
                );
            }
        }
        let count = ((d.clamp(0.0, 1.0) * live.len() as f64).floor() as usize).min(live.len());
        live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, pi, i) in &live[..count] {
            params[pi].mask.as_mut().expect("weight mask")[i] = false;
        }
        removed += count;
    }
    removed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub initial_rate: f64,
    pub c: f64,
    pub max_iteration: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            initial_rate: 0.5,
            c: 1.0,
            max_iteration: 20,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRound {
    pub round: usize,
    pub d: f64,
    pub q_a: usize,
    pub q_b: usize,
    pub loss: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutOutcome {
    pub model: MaskedModel,
    pub initial_connections: usize,
    /// Live connections of the returned model.
    pub q_b: usize,
    pub reference_loss: f64,
    pub target_layers: Range<usize>,
    pub rounds: Vec<DropoutRound>,
    /// Number of the round whose model is returned.
    pub kept_round: usize,
}

impl DropoutOutcome {
    /// Round log as pretty JSON.
    pub fn log_json(&self) -> String {
        #[derive(Serialize)]
        struct Log<'a> {
            reference_loss: f64,
            target_layers: [usize; 2],
            initial_connections: usize,
            kept_round: usize,
            rounds: &'a [DropoutRound],
        }
        serde_json::to_string_pretty(&Log {
            reference_loss: self.reference_loss,
            target_layers: [self.target_layers.start, self.target_layers.end],
            initial_connections: self.initial_connections,
            kept_round: self.kept_round,
            rounds: &self.rounds,
        })
        .expect("round log serializes")
    }
}

/// Runs the dropout loop on `l` layers of a copy of `model`.
pub fn run(
    model: &MaskedModel,
    train: &Dataset,
    reference_loss: f64,
    l: usize,
    cfg: &DropoutConfig,
) -> Result<DropoutOutcome> {
    if !(cfg.initial_rate > 0.0 && cfg.initial_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "initial dropout rate must lie in (0, 1], got {}",
            cfg.initial_rate
        )));
    }
    if !(cfg.c > 0.0) || cfg.max_iteration == 0 {
        return Err(Error::InvalidArgument("c and max_iteration must be > 0".into()));
    }
    if reference_loss.is_nan() {
        return Err(Error::InvalidArgument("reference loss is NaN".into()));
    }
    let targets = target_layers(&model.spec, l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_connections = model.live_connections();

    let mut current = model.clone();
    let mut kept: Option<(MaskedModel, usize)> = None;
    let mut rounds = Vec::new();
    let mut d = cfg.initial_rate;
    let mut q_a = initial_connections;
    let mut iteration = 0;

    loop {
        let mut candidate = current.clone();
        apply_dropout(&mut candidate, d, targets.clone());
        let q_b = candidate.live_connections();
        sgd_epoch(&mut candidate, train, &cfg.sgd, &mut rng)?;
        let loss = dataset_loss(&candidate, train)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("dropout round {} produced loss {loss}", rounds.len() + 1)));
        }
        let round = rounds.len() + 1;
        let accepted = loss <= reference_loss;
        rounds.push(DropoutRound {
            round,
            d,
            q_a,
            q_b,
            loss,
            accepted,
        });
        if accepted || kept.is_none() {
            kept = Some((candidate.clone(), round));
        }
        if !accepted {
            break;
        }
        iteration += 1;
        if iteration >= cfg.max_iteration || q_b == q_a {
            break;
        }
        d = update_rate(&DropoutState {
            d,
            q_a,
            q_b,
            iteration,
            max_iteration: cfg.max_iteration,
            c: cfg.c,
        })?;
        q_a = q_b;
        current = candidate;
    }

    let (model, kept_round) = kept.expect("loop body runs at least once");
    Ok(DropoutOutcome {
        q_b: model.live_connections(),
        model,
        initial_connections,
        reference_loss,
        target_layers: targets,
        rounds,
        kept_round,
    })
}
