//! Dynamic programming for the single-client problem.
//!
//! The discounted recursion over `x ∈ {0..B}` is
//!
//! ```text
//! V'(x) = min_u 1(x=0) + λ_E·Ê(u)
//!             + P(u)·[λ_q(u) + β·V(S(x))]
//!             + (1 − P(u))·[1(x=1)·λ_O + β·V(F(x))]
//! ```
//!
//! The outage-period charge sits inside the failure branch of the slot in
//! which state 1 fails to refill, undiscounted. Average cost is solved by
//! relative value iteration on an aperiodic transform of the chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, ClientModel};
use crate::threshold::{is_threshold, Policy, PolicyOrigin};

/// Relative tolerance within which two action costs count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Self-loop weight of the aperiodicity transform used by relative value
/// iteration. The transformed chain has the same gain and greedy policies.
pub const APERIODICITY: f64 = 0.5;

/// Number of trailing residuals kept in a [`SolveReport`].
const HISTORY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueKind {
    /// `horizon: None` is the infinite-horizon problem.
    Discounted { beta: f64, horizon: Option<usize> },
    /// Bias of the average-cost problem, pinned to 0 at state 0.
    Relative { gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub kind: ValueKind,
}

/// `D_s(x)` for `x = 1..=B` at one horizon `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DFunction {
    pub horizon: usize,
    /// `values[x − 1] = D_s(x)`.
    pub values: Vec<f64>,
}

impl DFunction {
    pub fn at(&self, x: usize) -> f64 {
        self.values[x - 1]
    }

    /// Largest increase `D(x + 1) − D(x)` over `x + 1 ≤ limit`; nonpositive
    /// when `D` is nonincreasing on `1..=limit`.
    pub fn max_increase(&self, limit: usize) -> f64 {
        (1..limit)
            .map(|x| self.at(x + 1) - self.at(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub policy: Policy,
    pub values: ValueFunction,
    /// Optimal average cost; `None` for discounted solves.
    pub gain: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub is_threshold: bool,
    /// The last few residuals, oldest first.
    pub residual_history: Vec<f64>,
}

/// Minimizes the one-slot lookahead over `actions`, returning the minimal
/// value and the first action, in tie-break order, within tolerance of it.
///
/// `cont_success` and `cont_failure` are the continuation values after a
/// delivery and after a failure; `weight` multiplies both.
#[allow(clippy::too_many_arguments)]
pub(crate) fn greedy_step(
    model: &ClientModel,
    x: usize,
    actions: &[Action],
    prob: impl Fn(Action) -> f64,
    price: f64,
    weight: f64,
    cont_success: f64,
    cont_failure: f64,
) -> (f64, Action) {
    let outage = if x == 0 { 1.0 } else { 0.0 };
    let period = if x == 1 { model.outage_period_penalty } else { 0.0 };
    let mut costs = [0.0f64; 64];
    let mut heap;
    let costs: &mut [f64] = if actions.len() <= costs.len() {
        &mut costs[..actions.len()]
    } else {
        heap = vec![0.0; actions.len()];
        &mut heap
    };
    let mut min = f64::INFINITY;
    for (c, &u) in costs.iter_mut().zip(actions) {
        let p = prob(u);
        *c = outage
            + price * model.energy(u)
            + p * (model.quality_penalties[u.quality] + weight * cont_success)
            + (1.0 - p) * (period + weight * cont_failure);
        min = min.min(*c);
    }
    let slack = TIE_TOLERANCE * min.abs().max(1.0);
    let pick = costs
        .iter()
        .position(|&c| c <= min + slack)
        .expect("at least one admissible action");
    (min, actions[pick])
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("beta must be in (0,1), got {beta}")))
    }
}

pub(crate) fn check_price(price: f64) -> Result<()> {
    if price >= 0.0 && price.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("price must be finite and nonnegative, got {price}")))
    }
}

pub(crate) fn check_options(opts: &SolveOptions) -> Result<()> {
    if opts.tol > 0.0 && opts.max_iter > 0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter("tol must be positive and max_iter nonzero".into()))
    }
}

fn backup_raw(
    v: &[f64],
    model: &ClientModel,
    price: f64,
    beta: f64,
    actions: &[Action],
    out: &mut [f64],
    policy: &mut [Action],
) {
    let limit = model.transmit_limit();
    let idle = [model.idle()];
    for x in 0..v.len() {
        let acts = if x <= limit { actions } else { &idle[..] };
        let (val, u) = greedy_step(
            model,
            x,
            acts,
            |u| model.success_probability(u),
            price,
            beta,
            v[model.success_transition(x)],
            v[model.failure_transition(x)],
        );
        out[x] = val;
        policy[x] = u;
    }
}

/// One discounted Bellman backup of `v`, with the greedy policy.
pub fn bellman_backup(
    v: &[f64],
    model: &ClientModel,
    price: f64,
    beta: f64,
) -> Result<(Vec<f64>, Policy)> {
    check_beta(beta)?;
    check_price(price)?;
    model.check()?;
    if v.len() != model.num_states() {
        return Err(Error::InvalidParameter(format!(
            "value function has {} entries, model has {} states",
            v.len(),
            model.num_states()
        )));
    }
    let actions = model.actions();
    let mut out = vec![0.0; v.len()];
    let mut acts = vec![model.idle(); v.len()];
    backup_raw(v, model, price, beta, &actions, &mut out, &mut acts);
    Ok((out, Policy::from_actions_unchecked(acts, PolicyOrigin::Dp)))
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn push_history(history: &mut Vec<f64>, r: f64) {
    if history.len() == HISTORY {
        history.remove(0);
    }
    history.push(r);
}

/// Infinite-horizon discounted value iteration from `V ≡ 0`.
///
/// Stops once the sup-norm step falls to `tol·(1−β)/(2β)`, which makes the
/// greedy policy `tol`-optimal, or to the rounding floor of the iterate.
pub fn solve_discounted(
    model: &ClientModel,
    price: f64,
    beta: f64,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    check_beta(beta)?;
    check_price(price)?;
    check_options(opts)?;
    model.check()?;

    let target = opts.tol * (1.0 - beta) / (2.0 * beta);
    let actions = model.actions();
    let n = model.num_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut acts = vec![model.idle(); n];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        backup_raw(&v, model, price, beta, &actions, &mut next, &mut acts);
        iterations += 1;
        residual = sup_distance(&next, &v);
        std::mem::swap(&mut v, &mut next);
        push_history(&mut history, residual);
        let floor = 16.0 * f64::EPSILON * v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if residual <= target.max(floor) {
            converged = true;
            break;
        }
    }

    // greedy with respect to the final iterate
    backup_raw(&v, model, price, beta, &actions, &mut next, &mut acts);
    let policy = Policy::from_actions_unchecked(acts, PolicyOrigin::Dp);
    let is_threshold = is_threshold(&policy, model).holds();
    Ok(SolveReport {
        policy,
        values: ValueFunction {
            values: v,
            kind: ValueKind::Discounted { beta, horizon: None },
        },
        gain: None,
        iterations,
        residual,
        converged,
        is_threshold,
        residual_history: history,
    })
}

/// Finite-horizon value functions `V^0 ≡ 0, V^1, ..., V^horizon`.
pub fn finite_horizon_values(
    model: &ClientModel,
    price: f64,
    beta: f64,
    horizon: usize,
) -> Result<Vec<ValueFunction>> {
    check_beta(beta)?;
    check_price(price)?;
    model.check()?;
    let actions = model.actions();
    let n = model.num_states();
    let mut acts = vec![model.idle(); n];
    let mut out = vec![ValueFunction {
        values: vec![0.0; n],
        kind: ValueKind::Discounted {
            beta,
            horizon: Some(0),
        },
    }];
    for s in 1..=horizon {
        let mut next = vec![0.0; n];
        backup_raw(&out[s - 1].values, model, price, beta, &actions, &mut next, &mut acts);
        out.push(ValueFunction {
            values: next,
            kind: ValueKind::Discounted {
                beta,
                horizon: Some(s),
            },
        });
    }
    Ok(out)
}

/// `D_s(x) = 1(x=1)·λ_O + β·[V^{s−1}(F(x)) − V^{s−1}(S(x))]` for `s = 1..=horizon`.
pub fn d_function(
    model: &ClientModel,
    price: f64,
    beta: f64,
    horizon: usize,
) -> Result<Vec<DFunction>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let values = finite_horizon_values(model, price, beta, horizon - 1)?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(k, vf)| {
            let v = &vf.values;
            let d = (1..=model.max_state())
                .map(|x| {
                    let period = if x == 1 { model.outage_period_penalty } else { 0.0 };
                    period
                        + beta * (v[model.failure_transition(x)] - v[model.success_transition(x)])
                })
                .collect();
            DFunction {
                horizon: k + 1,
                values: d,
            }
        })
        .collect())
}

/// Average-cost optimum by relative value iteration with reference state 0.
///
/// Iterates `w = T̃h`, where `T̃` is the Bellman operator of the chain
/// `τI + (1−τ)P`, and renormalizes `h = w − w(0)`. Stops when the span of
/// `w − h` is at most `tol`; the gain is the midpoint of that span.
pub fn solve_average(model: &ClientModel, price: f64, opts: &SolveOptions) -> Result<SolveReport> {
    check_price(price)?;
    check_options(opts)?;
    model.check()?;

    let tau = APERIODICITY;
    let actions = model.actions();
    let limit = model.transmit_limit();
    let idle = [model.idle()];
    let n = model.num_states();
    let mut h = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut acts = vec![model.idle(); n];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut gain = 0.0;
    let mut iterations = 0;
    let mut converged = false;

    let sweep = |h: &[f64], w: &mut [f64], acts: &mut [Action]| {
        for x in 0..n {
            let a = if x <= limit { &actions[..] } else { &idle[..] };
            let (val, u) = greedy_step(
                model,
                x,
                a,
                |u| model.success_probability(u),
                price,
                1.0 - tau,
                h[model.success_transition(x)],
                h[model.failure_transition(x)],
            );
            w[x] = val + tau * h[x];
            acts[x] = u;
        }
    };

    while iterations < opts.max_iter {
        sweep(&h, &mut w, &mut acts);
        iterations += 1;
        let (lo, hi) = w
            .iter()
            .zip(&h)
            .map(|(a, b)| a - b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        residual = hi - lo;
        gain = 0.5 * (lo + hi);
        push_history(&mut history, residual);
        let anchor = w[0];
        for (hx, wx) in h.iter_mut().zip(&w) {
            *hx = wx - anchor;
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }

    sweep(&h, &mut w, &mut acts);
    let policy = Policy::from_actions_unchecked(acts, PolicyOrigin::Dp);
    let is_threshold = is_threshold(&policy, model).holds();
    // bias of the untransformed chain
    let bias = h.iter().map(|v| v * (1.0 - tau)).collect();
    Ok(SolveReport {
        policy,
        values: ValueFunction {
            values: bias,
            kind: ValueKind::Relative { gain },
        },
        gain: Some(gain),
        iterations,
        residual,
        converged,
        is_threshold,
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{canonical_model, random_model, ModelBounds, CANONICAL_PRICE};
    use crate::threshold::{evaluate_exact, Policy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn first_backup_spends_nothing_except_at_the_edge() {
        let m = canonical_model();
        let (v, p) = bellman_backup(&[0.0; 5], &m, CANONICAL_PRICE, 0.9).unwrap();
        assert_eq!(v[0], 1.0);
        for x in [0, 2, 3, 4] {
            assert_eq!(p.action(x), m.idle(), "state {x}");
        }
        // at x = 1 the outage-period penalty makes transmitting worthwhile:
        // idle 2, (0,1) 1.15, (1,1) 1.05, (0,2) 0.68, (1,2) 0.85
        assert!(close(v[1], 0.68, 1e-15));
        assert_eq!(p.action(1), Action::new(0, 2));
        assert_eq!(&v[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backup_golden() {
        // hand recursion on V^1 = (1, 0.68, 0, 0, 0), β = 0.9
        let m = canonical_model();
        let (v1, _) = bellman_backup(&[0.0; 5], &m, CANONICAL_PRICE, 0.9).unwrap();
        let (v2, p2) = bellman_backup(&v1, &m, CANONICAL_PRICE, 0.9).unwrap();
        // x=0: 1 + 0.2 + 0.8·0.1 + 0.2·0.9·1
        // x=2: 0.2 + 0.8·0.1 + 0.2·0.9·0.68
        let golden = [1.46, 0.86, 0.4024, 0.0, 0.0];
        for (a, b) in v2.iter().zip(golden) {
            assert!(close(*a, b, 1e-12), "{v2:?}");
        }
        for x in 0..3 {
            assert_eq!(p2.action(x), Action::new(0, 2));
        }
        assert_eq!(p2.action(3), m.idle());
    }

    #[test]
    fn invalid_beta_rejected() {
        let m = canonical_model();
        assert!(bellman_backup(&[0.0; 5], &m, 0.1, 1.0).is_err());
        assert!(solve_discounted(&m, 0.1, 0.0, &SolveOptions::default()).is_err());
    }

    #[test]
    fn no_control_authority() {
        let mut m = canonical_model();
        m.success_prob = vec![vec![0.0; 3]; 2];
        let beta = 0.9;
        let r = solve_discounted(&m, 0.1, beta, &SolveOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.policy, Policy::idle(&m).with_origin(PolicyOrigin::Dp));
        let v = &r.values.values;
        assert!(close(v[0], 1.0 / (1.0 - beta), 1e-9));
        // drain path from 1: λ_O now, outage from the next slot on
        assert!(close(v[1], 2.0 + beta / (1.0 - beta), 1e-9));
        assert!(close(v[3], beta * beta * v[1], 1e-9));
    }

    #[test]
    fn free_transmission_uses_max_success() {
        let mut m = canonical_model();
        m.outage_period_penalty = 0.0;
        m.quality_penalties = vec![0.0, 1e-9];
        let r = solve_discounted(&m, 0.0, 0.9, &SolveOptions::default()).unwrap();
        let best = Action::new(1, 2);
        for x in 0..=m.transmit_limit() {
            assert_eq!(r.policy.action(x), best, "state {x}");
        }
        let v = &r.values.values;
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn d_function_base_case() {
        let m = canonical_model();
        let d = d_function(&m, 0.1, 0.9, 3).unwrap();
        assert_eq!(d[0].at(1), 2.0);
        assert!((2..=4).all(|x| d[0].at(x) == 0.0));
    }

    #[test]
    fn canonical_d_function_nonincreasing() {
        let m = canonical_model();
        for beta in [0.5, 0.9, 0.99] {
            for d in d_function(&m, CANONICAL_PRICE, beta, 50).unwrap() {
                assert!(d.max_increase(m.transmit_limit()) <= 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_range_when_packet_fills_buffer() {
        let mut m = canonical_model();
        m.play_duration = 4;
        assert_eq!(m.transmit_limit(), 1);
        for d in d_function(&m, 0.1, 0.9, 10).unwrap() {
            assert_eq!(d.max_increase(1), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn idle_only_gain_is_one() {
        let m = ClientModel {
            power_levels: vec![0.0],
            success_prob: vec![vec![0.0], vec![0.0]],
            ..canonical_model()
        };
        let r = solve_average(&m, 0.3, &SolveOptions::default()).unwrap();
        assert!(r.converged);
        assert!(close(r.gain.unwrap(), 1.0, 1e-10));
    }

    #[test]
    fn canonical_average_matches_exact_evaluation() {
        let m = canonical_model();
        let r = solve_average(&m, CANONICAL_PRICE, &SolveOptions::default()).unwrap();
        assert!(r.converged && r.is_threshold);
        let e = evaluate_exact(&r.policy, &m, CANONICAL_PRICE).unwrap();
        assert!(close(r.gain.unwrap(), e.average_cost, 1e-8));
        assert_eq!(r.values.values[0], 0.0);
    }

    #[test]
    fn vanishing_discount_agrees_with_gain() {
        let m = canonical_model();
        let avg = solve_average(&m, CANONICAL_PRICE, &SolveOptions::default()).unwrap();
        let beta = 0.9999;
        let opts = SolveOptions { tol: 1e-6, ..Default::default() };
        let disc = solve_discounted(&m, CANONICAL_PRICE, beta, &opts).unwrap();
        assert!(disc.converged);
        assert!(close((1.0 - beta) * disc.values.values[0], avg.gain.unwrap(), 1e-3));
        assert_eq!(disc.policy.actions(), avg.policy.actions());
    }

    #[test]
    fn residuals_contract_geometrically() {
        let m = canonical_model();
        let beta = 0.9;
        let opts = SolveOptions { tol: 1e-6, ..Default::default() };
        let r = solve_discounted(&m, CANONICAL_PRICE, beta, &opts).unwrap();
        let tail = &r.residual_history[r.residual_history.len() - 10..];
        // rounding in ‖V‖ ≈ 10 perturbs each residual by a few ulps
        for w in tail.windows(2) {
            assert!(w[1] <= beta * w[0] + 1e-13, "{tail:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn greedy_policies_are_threshold(seed in any::<u64>(), price in 0.0f64..1.0) {
                let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &ModelBounds::default());
                let opts = SolveOptions::default();
                for beta in [0.9, 0.99] {
                    let r = solve_discounted(&m, price, beta, &opts).unwrap();
                    prop_assert!(r.is_threshold, "{:?}", r.policy);
                }
                let r = solve_average(&m, price, &opts).unwrap();
                prop_assert!(r.converged);
                prop_assert!(r.is_threshold, "{:?}", r.policy);
            }

            #[test]
            fn values_nonincreasing_above_empty(seed in any::<u64>(), price in 0.0f64..1.0) {
                let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &ModelBounds::default());
                for vf in finite_horizon_values(&m, price, 0.9, 40).unwrap() {
                    let v = &vf.values;
                    for x in 1..m.max_state() {
                        prop_assert!(v[x + 1] <= v[x] + 1e-12);
                    }
                    prop_assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
                }
            }

            #[test]
            fn preference_gap_nonincreasing(seed in any::<u64>(), price in 0.0f64..1.0) {
                // for u1 costlier and likelier than u2, [C(u1)−P(u1)D(x)] − [C(u2)−P(u2)D(x)]
                // moves with −(P1−P2)·D(x), so it grows with x wherever D is nonincreasing
                let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &ModelBounds::default());
                let acts = m.actions();
                let limit = m.transmit_limit();
                for d in d_function(&m, price, 0.9, 30).unwrap() {
                    let d_mono = d.max_increase(limit) <= 1e-12;
                    for &u1 in &acts {
                        for &u2 in &acts {
                            let (c1, c2) = (m.one_step_cost(u1, price), m.one_step_cost(u2, price));
                            let (p1, p2) = (m.success_probability(u1), m.success_probability(u2));
                            if !(c1 > c2 && p1 > p2) || !d_mono {
                                continue;
                            }
                            let gap = |x: usize| (c1 - p1 * d.at(x)) - (c2 - p2 * d.at(x));
                            for x in 1..limit {
                                prop_assert!(gap(x + 1) >= gap(x) - 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }
}
