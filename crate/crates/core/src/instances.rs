//! Fixed reference instances and seeded random generators of valid models.

use rand::Rng;

use crate::dual::SystemConfig;
use crate::fading::ChannelModel;
use crate::model::ClientModel;

/// The small reference model used throughout the tests: `B = 4`, `T = 2`,
/// two qualities, power levels `(0, 1, 2)`.
pub fn canonical_model() -> ClientModel {
    ClientModel {
        buffer_playtime: 4,
        play_duration: 2,
        quality_penalties: vec![0.1, 0.5],
        power_levels: vec![0.0, 1.0, 2.0],
        success_prob: vec![vec![0.0, 0.5, 0.8], vec![0.0, 0.7, 0.9]],
        outage_period_penalty: 2.0,
    }
}

/// Energy price paired with [`canonical_model`].
pub const CANONICAL_PRICE: f64 = 0.1;

/// Two clients, the canonical model and a more outage-averse variant of it,
/// sharing a power budget that binds.
///
/// The budget equals the total power drawn by the price-optimal policies on a
/// whole interval of prices, so the constrained optimum is attained by a
/// deterministic product policy.
pub fn canonical_system() -> SystemConfig {
    let mut second = canonical_model();
    second.buffer_playtime = 5;
    second.outage_period_penalty = 3.0;
    SystemConfig {
        clients: vec![canonical_model(), second],
        power_budget: CANONICAL_BINDING_BUDGET,
    }
}

/// Total average power of the price-optimal product policy for
/// [`canonical_system`] on the price interval that contains `0.75`, roughly
/// `[0.656, 0.880]`.
pub const CANONICAL_BINDING_BUDGET: f64 = 1.425_752_915_508_511;

/// Limits for [`random_model`].
#[derive(Debug, Clone)]
pub struct ModelBounds {
    pub min_buffer: usize,
    pub max_buffer: usize,
    pub max_play_duration: usize,
    pub max_qualities: usize,
    pub min_powers: usize,
    pub max_powers: usize,
    /// Upper bound on every success probability.
    pub max_success: f64,
}

impl Default for ModelBounds {
    fn default() -> Self {
        Self {
            min_buffer: 1,
            max_buffer: 12,
            max_play_duration: 4,
            max_qualities: 3,
            min_powers: 2,
            max_powers: 3,
            max_success: 0.95,
        }
    }
}

/// Draws a model satisfying every [`ClientModel::validate`] invariant.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, bounds: &ModelBounds) -> ClientModel {
    let b = rng.random_range(bounds.min_buffer..=bounds.max_buffer);
    let t = rng.random_range(1..=bounds.max_play_duration.min(b));
    let nq = rng.random_range(1..=bounds.max_qualities);
    let nk = rng.random_range(bounds.min_powers..=bounds.max_powers);

    let mut quality_penalties = Vec::with_capacity(nq);
    let mut acc = rng.random_range(0.0..0.5);
    for _ in 0..nq {
        quality_penalties.push(acc);
        acc += rng.random_range(0.01..0.5);
    }

    let mut power_levels = vec![0.0];
    let mut acc = 0.0;
    for _ in 1..nk {
        acc += rng.random_range(0.1..2.0);
        power_levels.push(acc);
    }

    let success_prob = random_success_matrix(rng, nq, nk, bounds.max_success);

    ClientModel {
        buffer_playtime: b,
        play_duration: t,
        quality_penalties,
        power_levels,
        success_prob,
        outage_period_penalty: rng.random_range(0.0..3.0),
    }
}

/// A `Q×K` matrix, zero in the first column, nondecreasing along both axes.
pub fn random_success_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    nq: usize,
    nk: usize,
    cap: f64,
) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; nk]; nq];
    for q in 0..nq {
        for e in 1..nk {
            let floor = if q > 0 { p[q - 1][e] } else { 0.0f64 }.max(p[q][e - 1]);
            p[q][e] = floor + (cap - floor) * rng.random_range(0.0..0.6);
        }
    }
    p
}

/// A random irreducible channel over `num_states` states whose success
/// matrices scale a common base matrix by a per-channel factor.
pub fn random_channel<R: Rng + ?Sized>(
    rng: &mut R,
    model: &ClientModel,
    num_states: usize,
) -> ChannelModel {
    let mut transition = Vec::with_capacity(num_states);
    for _ in 0..num_states {
        // strictly positive rows keep the chain irreducible
        let raw: Vec<f64> = (0..num_states).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        transition.push(raw.iter().map(|r| r / total).collect());
    }
    let base = &model.success_prob;
    let success_prob_per_channel = (0..num_states)
        .map(|_| {
            let scale = rng.random_range(0.0..=1.0);
            base.iter()
                .map(|row| row.iter().map(|p| p * scale).collect())
                .collect()
        })
        .collect();
    ChannelModel {
        num_states,
        transition,
        success_prob_per_channel,
    }
}
