use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaltingConfig {
    /// Minimum gain, in accuracy points, over `window` epochs that still
    /// counts as progress.
    pub epsilon_points: f64,
    pub window: usize,
    pub h_max: usize,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        HaltingConfig {
            epsilon_points: 0.5,
            window: 10,
            h_max: usize::MAX,
        }
    }
}

/// Halting epoch from a per-epoch validation accuracy history (fractions in
/// `[0, 1]`, entry `e-1` belongs to epoch `e`).
///
/// Returns the smallest epoch `e ≥ window` after which the next `window`
/// epochs gain less than `epsilon_points`, capped at `h_max`. Without such a
/// plateau the result is `min(h_max, len)`; a history shorter than the window
/// yields its length.
pub fn determine_halting_epoch(accuracy: &[f64], cfg: &HaltingConfig) -> usize {
    let len = accuracy.len();
    let w = cfg.window.max(1);
    if len < w {
        return len.min(cfg.h_max);
    }
    let at = |e: usize| accuracy[e - 1];
    let plateau = (w..=len.saturating_sub(w))
        .take_while(|&e| e <= cfg.h_max)
        .find(|&e| (at(e + w) - at(e)) * 100.0 < cfg.epsilon_points);
    plateau.unwrap_or(len).min(cfg.h_max)
}
