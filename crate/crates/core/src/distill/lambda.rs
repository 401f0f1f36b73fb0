//! Loss-weight search over the open simplex `λ1 + λ2 + λ3 = 1`.
//!
//! The default search is differential evolution (current-to-best/1/bin) on an
//! unconstrained vector `θ` mapped to the simplex with a softmax over
//! `(θ1, θ2, 0)`, so every candidate is strictly interior. Fitness is maximised. The uniform point is
//! evaluated first and only replaced on strict improvement, so a constant
//! fitness returns `(⅓, ⅓, ⅓)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossParts;
use super::plan::Lambdas;
use crate::par;

/// Bound on each softmax coordinate; keeps every λ well above zero.
const THETA_BOUND: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub population: usize,
    pub generations: usize,
    pub differential_weight: f64,
    pub crossover: f64,
    /// Initial `θ` coordinates are drawn from `[-spread, spread]`.
    pub spread: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            population: 20,
            generations: 15,
            differential_weight: 0.7,
            crossover: 0.9,
            spread: 2.0,
            seed: 0,
        }
    }
}

impl DeConfig {
    /// Fitness evaluations the search will perform.
    pub fn budget(&self) -> usize {
        self.population.max(1) * (self.generations + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum LambdaMode {
    DifferentialEvolution,
    /// Minimises `λ·(CE, AL, DL)` directly, which lands on a vertex; the
    /// vertex is pulled inside by `1e-3` per coordinate.
    Literal,
    Fixed { l1: f64, l2: f64, l3: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambdas: Lambdas,
    pub fitness: f64,
    pub evaluations: usize,
}

pub fn softmax_simplex(theta: [f64; 3]) -> Lambdas {
    let t = theta.map(|v| v.clamp(-THETA_BOUND, THETA_BOUND));
    let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = t.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    let l1 = e[0] / s;
    let l2 = e[1] / s;
    Lambdas {
        l1,
        l2,
        l3: 1.0 - l1 - l2,
        l4: 1.0,
    }
}

fn to_simplex(theta: &[f64; 2]) -> Lambdas {
    softmax_simplex([theta[0], theta[1], 0.0])
}

/// Differential evolution maximising `fitness`. Population members are
/// evaluated in parallel; all random draws happen before evaluation, so the
/// result does not depend on thread scheduling.
pub fn optimize_lambdas<F>(fitness: F, cfg: &DeConfig) -> LambdaSearch
where
    F: Fn(&Lambdas) -> f64 + Sync + Send,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let np = cfg.population.max(1);
    // The softmax is invariant to a common shift, so the last coordinate is
    // pinned at zero and the search runs over the other two.
    let mut pop: Vec<[f64; 2]> = (0..np)
        .map(|i| {
            if i == 0 {
                [0.0; 2]
            } else {
                [(); 2].map(|_| rng.random_range(-cfg.spread..=cfg.spread))
            }
        })
        .collect();
    let score = |theta: &[f64; 2]| {
        let f = fitness(&to_simplex(theta));
        if f.is_nan() {
            f64::NEG_INFINITY
        } else {
            f
        }
    };
    let mut fit = par::map(&pop, score);
    let mut evaluations = np;
    let mut best = (pop[0], fit[0]);
    for (p, &f) in pop.iter().zip(&fit).skip(1) {
        if f > best.1 {
            best = (*p, f);
        }
    }

    if np >= 4 {
        for _ in 0..cfg.generations {
            let leader = best.0;
            let trials: Vec<[f64; 2]> = (0..np)
                .map(|i| {
                    let mut pick = || loop {
                        let j = rng.random_range(0..np);
                        if j != i {
                            break j;
                        }
                    };
                    let a = pick();
                    let b = loop {
                        let j = pick();
                        if j != a {
                            break j;
                        }
                    };
                    let forced = rng.random_range(0..2);
                    let mut trial = pop[i];
                    for (d, t) in trial.iter_mut().enumerate() {
                        if d == forced || rng.random::<f64>() < cfg.crossover {
                            let v = pop[i][d]
                                + cfg.differential_weight * (leader[d] - pop[i][d])
                                + cfg.differential_weight * (pop[a][d] - pop[b][d]);
                            *t = v.clamp(-THETA_BOUND, THETA_BOUND);
                        }
                    }
                    trial
                })
                .collect();
            let trial_fit = par::map(&trials, score);
            evaluations += np;
            for i in 0..np {
                if trial_fit[i] >= fit[i] {
                    pop[i] = trials[i];
                    fit[i] = trial_fit[i];
                }
                if trial_fit[i] > best.1 {
                    best = (trials[i], trial_fit[i]);
                }
            }
        }
    }

    LambdaSearch {
        lambdas: to_simplex(&best.0),
        fitness: best.1,
        evaluations,
    }
}

/// Minimiser of `λ1·CE + λ2·AL + λ3·DL` over the closed simplex (the vertex of
/// the smallest component, ties to the lower index), moved inside.
pub fn literal_minimizer(parts: &LossParts) -> Lambdas {
    let comps = [parts.ce_student, parts.attention, parts.distillation];
    let mut k = 0;
    for i in 1..3 {
        if comps[i] < comps[k] {
            k = i;
        }
    }
    let eps = 1e-3;
    let mut l = [eps; 3];
    l[k] = 1.0 - 2.0 * eps;
    Lambdas {
        l1: l[0],
        l2: l[1],
        l3: l[2],
        l4: 1.0,
    }
}
