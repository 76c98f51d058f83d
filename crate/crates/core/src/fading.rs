//! Markov-modulated channels.
//!
//! The client state becomes `(x, c)`: buffer play time and the channel state
//! `c ∈ {0..C}`, observed before the action is chosen. The channel evolves
//! by `Π` independently of the action; only the success probabilities
//! `P_c(q, E)` depend on it. With a single channel state everything reduces
//! to the fixed-channel model.

use serde::{Deserialize, Serialize};

use crate::dp::{check_beta, check_options, check_price, greedy_step, SolveOptions, APERIODICITY};
use crate::error::{Error, Result, Violation};
use crate::markov::{long_run_distribution, SparseChain};
use crate::model::{check_success_matrix, Action, ClientModel};
use crate::threshold::{enumerate_thresholds, is_threshold, Policy, PolicyOrigin, ENUMERATION_LIMIT};

const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub num_states: usize,
    /// Row-stochastic `C×C` matrix `Π`.
    pub transition: Vec<Vec<f64>>,
    /// One `Q×K` success matrix per channel state.
    pub success_prob_per_channel: Vec<Vec<Vec<f64>>>,
}

impl ChannelModel {
    /// The degenerate one-state channel carrying `model`'s own success matrix.
    pub fn fixed(model: &ClientModel) -> Self {
        Self {
            num_states: 1,
            transition: vec![vec![1.0]],
            success_prob_per_channel: vec![model.success_prob.clone()],
        }
    }

    pub fn success_probability(&self, c: usize, u: Action) -> f64 {
        self.success_prob_per_channel[c][u.quality][u.power]
    }

    pub fn validate(&self, model: &ClientModel) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let c = self.num_states;
        if c == 0 {
            v.push(Violation::new("num_states", "at least one channel state is required"));
        }
        if self.transition.len() != c || self.transition.iter().any(|r| r.len() != c) {
            v.push(Violation::new("transition", format!("expected a {c}x{c} matrix")));
        } else {
            for (i, row) in self.transition.iter().enumerate() {
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    v.push(Violation::new(format!("transition[{i}]"), "negative entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    v.push(Violation::new(
                        format!("transition[{i}]"),
                        format!("row sums to {sum}, not 1"),
                    ));
                }
            }
        }
        if self.success_prob_per_channel.len() != c {
            v.push(Violation::new(
                "success_prob_per_channel",
                format!("expected {c} matrices"),
            ));
        } else {
            for (i, p) in self.success_prob_per_channel.iter().enumerate() {
                v.extend(check_success_matrix(
                    &format!("success_prob_per_channel[{i}]"),
                    p,
                    model.num_qualities(),
                    model.num_powers(),
                ));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn check(&self, model: &ClientModel) -> Result<()> {
        model.check()?;
        self.validate(model).map_err(Error::InvalidModel)
    }

    fn reach(&self, from: usize, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.num_states];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(i) = stack.pop() {
            for j in 0..self.num_states {
                let p = if forward { self.transition[i][j] } else { self.transition[j][i] };
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen
    }

    /// Errors with the channels that do not communicate with channel 0.
    pub fn check_irreducible(&self) -> Result<()> {
        let fwd = self.reach(0, true);
        let bwd = self.reach(0, false);
        let unreachable: Vec<usize> = (0..self.num_states).filter(|&c| !(fwd[c] && bwd[c])).collect();
        if unreachable.is_empty() {
            Ok(())
        } else {
            Err(Error::ReducibleChannel { unreachable })
        }
    }

    /// Stationary distribution of `Π`; requires irreducibility.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        self.check_irreducible()?;
        let chain: SparseChain = self
            .transition
            .iter()
            .map(|row| row.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect())
            .collect();
        long_run_distribution(&chain, 0)
    }
}

/// A policy over `(x, c)`: one single-channel policy per channel state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FadingPolicy {
    pub per_channel: Vec<Policy>,
}

impl FadingPolicy {
    pub fn action(&self, x: usize, c: usize) -> Action {
        self.per_channel[c].action(x)
    }

    pub fn num_channels(&self) -> usize {
        self.per_channel.len()
    }

    /// Per channel state, whether its restriction is of threshold type.
    pub fn threshold_by_channel(&self, model: &ClientModel) -> Vec<bool> {
        self.per_channel
            .iter()
            .map(|p| is_threshold(p, model).holds())
            .collect()
    }
}

impl From<Policy> for FadingPolicy {
    fn from(p: Policy) -> Self {
        Self { per_channel: vec![p] }
    }
}

/// Channel-averaged continuation `Σ_c' Π(c, c')·v[c'][x]`.
fn averaged(channel: &ChannelModel, v: &[Vec<f64>], c: usize, x: usize) -> f64 {
    channel.transition[c]
        .iter()
        .zip(v)
        .fold(0.0, |acc, (&p, vc)| acc + p * vc[x])
}

/// Backup over every `(x, c)`; `self_weight` adds `self_weight·v[c][x]`.
#[allow(clippy::too_many_arguments)]
fn sweep(
    v: &[Vec<f64>],
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
    weight: f64,
    self_weight: f64,
    actions: &[Action],
    out: &mut [Vec<f64>],
    policy: &mut [Vec<Action>],
) {
    let limit = model.transmit_limit();
    let idle = [model.idle()];
    for c in 0..channel.num_states {
        for x in 0..model.num_states() {
            let acts = if x <= limit { actions } else { &idle[..] };
            let (val, u) = greedy_step(
                model,
                x,
                acts,
                |u| channel.success_probability(c, u),
                price,
                weight,
                averaged(channel, v, c, model.success_transition(x)),
                averaged(channel, v, c, model.failure_transition(x)),
            );
            out[c][x] = if self_weight == 0.0 { val } else { val + self_weight * v[c][x] };
            policy[c][x] = u;
        }
    }
}

fn to_policy(acts: Vec<Vec<Action>>) -> FadingPolicy {
    FadingPolicy {
        per_channel: acts
            .into_iter()
            .map(|a| Policy::from_actions_unchecked(a, PolicyOrigin::Dp))
            .collect(),
    }
}

/// One discounted backup on the product space; `v[c][x]`.
pub fn fading_backup(
    v: &[Vec<f64>],
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
    beta: f64,
) -> Result<(Vec<Vec<f64>>, FadingPolicy)> {
    check_beta(beta)?;
    check_price(price)?;
    channel.check(model)?;
    if v.len() != channel.num_states || v.iter().any(|r| r.len() != model.num_states()) {
        return Err(Error::InvalidParameter("value table has the wrong shape".into()));
    }
    let n = model.num_states();
    let mut out = vec![vec![0.0; n]; channel.num_states];
    let mut acts = vec![vec![model.idle(); n]; channel.num_states];
    sweep(v, model, channel, price, beta, 0.0, &model.actions(), &mut out, &mut acts);
    Ok((out, to_policy(acts)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FadingSolveReport {
    pub policy: FadingPolicy,
    /// Discounted values or average-cost bias, `values[c][x]`.
    pub values: Vec<Vec<f64>>,
    pub gain: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub threshold_by_channel: Vec<bool>,
}

fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Discounted value iteration on the product space, same stopping rule as
/// [`crate::dp::solve_discounted`].
pub fn solve_fading_discounted(
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
    beta: f64,
    opts: &SolveOptions,
) -> Result<FadingSolveReport> {
    check_beta(beta)?;
    check_price(price)?;
    check_options(opts)?;
    channel.check(model)?;
    let actions = model.actions();
    let n = model.num_states();
    let cn = channel.num_states;
    let mut v = vec![vec![0.0; n]; cn];
    let mut next = v.clone();
    let mut acts = vec![vec![model.idle(); n]; cn];
    let target = opts.tol * (1.0 - beta) / (2.0 * beta);
    let (mut iterations, mut residual, mut converged) = (0, f64::INFINITY, false);
    while iterations < opts.max_iter {
        sweep(&v, model, channel, price, beta, 0.0, &actions, &mut next, &mut acts);
        iterations += 1;
        residual = sup_distance(&next, &v);
        std::mem::swap(&mut v, &mut next);
        let scale = v.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
        if residual <= target.max(16.0 * f64::EPSILON * scale) {
            converged = true;
            break;
        }
    }
    sweep(&v, model, channel, price, beta, 0.0, &actions, &mut next, &mut acts);
    let policy = to_policy(acts);
    Ok(FadingSolveReport {
        threshold_by_channel: policy.threshold_by_channel(model),
        policy,
        values: v,
        gain: None,
        iterations,
        residual,
        converged,
    })
}

/// Relative value iteration on the product space, reference state `(0, 0)`.
pub fn solve_fading_average(
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
    opts: &SolveOptions,
) -> Result<FadingSolveReport> {
    check_price(price)?;
    check_options(opts)?;
    channel.check(model)?;
    channel.check_irreducible()?;
    let tau = APERIODICITY;
    let actions = model.actions();
    let n = model.num_states();
    let cn = channel.num_states;
    let mut h = vec![vec![0.0; n]; cn];
    let mut w = h.clone();
    let mut acts = vec![vec![model.idle(); n]; cn];
    let (mut iterations, mut residual, mut gain, mut converged) = (0, f64::INFINITY, 0.0, false);
    while iterations < opts.max_iter {
        sweep(&h, model, channel, price, 1.0 - tau, tau, &actions, &mut w, &mut acts);
        iterations += 1;
        let (lo, hi) = w
            .iter()
            .flatten()
            .zip(h.iter().flatten())
            .map(|(a, b)| a - b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        residual = hi - lo;
        gain = 0.5 * (lo + hi);
        let anchor = w[0][0];
        for (hc, wc) in h.iter_mut().zip(&w) {
            for (hx, wx) in hc.iter_mut().zip(wc) {
                *hx = wx - anchor;
            }
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    sweep(&h, model, channel, price, 1.0 - tau, tau, &actions, &mut w, &mut acts);
    let policy = to_policy(acts);
    let bias = h
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * (1.0 - tau)).collect())
        .collect();
    Ok(FadingSolveReport {
        threshold_by_channel: policy.threshold_by_channel(model),
        policy,
        values: bias,
        gain: Some(gain),
        iterations,
        residual,
        converged,
    })
}

/// Exact long-run behaviour of a policy on the product chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingEvaluation {
    pub price: f64,
    /// `distribution[c][x]`.
    pub distribution: Vec<Vec<f64>>,
    pub channel_marginal: Vec<f64>,
    pub average_cost: f64,
    pub outage_rate: f64,
    pub outage_period_rate: f64,
    pub delivery_rates: Vec<f64>,
    pub average_power: f64,
}

/// Evaluates `policy` from a full buffer in channel `start_channel`.
pub fn evaluate_fading_exact(
    policy: &FadingPolicy,
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
    start_channel: usize,
) -> Result<FadingEvaluation> {
    channel.check(model)?;
    if policy.num_channels() != channel.num_states
        || policy.per_channel.iter().any(|p| p.num_states() != model.num_states())
    {
        return Err(Error::InvalidPolicy("policy shape does not match the model".into()));
    }
    let n = model.num_states();
    let cn = channel.num_states;
    let idx = |x: usize, c: usize| c * n + x;
    let mut chain: SparseChain = Vec::with_capacity(n * cn);
    for c in 0..cn {
        for x in 0..n {
            let u = policy.action(x, c);
            let p = channel.success_probability(c, u);
            let s = model.success_transition(x);
            let f = model.failure_transition(x);
            let mut row = Vec::new();
            for (c2, &pc) in channel.transition[c].iter().enumerate() {
                if pc <= 0.0 {
                    continue;
                }
                if s == f {
                    row.push((idx(f, c2), pc));
                    continue;
                }
                if p > 0.0 {
                    row.push((idx(s, c2), p * pc));
                }
                if p < 1.0 {
                    row.push((idx(f, c2), (1.0 - p) * pc));
                }
            }
            chain.push(row);
        }
    }
    let pi = long_run_distribution(&chain, idx(model.max_state(), start_channel))?;

    let mut distribution = vec![vec![0.0; n]; cn];
    let mut channel_marginal = vec![0.0; cn];
    let (mut average_cost, mut average_power, mut outage_rate, mut period) = (0.0, 0.0, 0.0, 0.0);
    let mut delivery_rates = vec![0.0; model.num_qualities()];
    for c in 0..cn {
        for x in 0..n {
            let w = pi[idx(x, c)];
            distribution[c][x] = w;
            channel_marginal[c] += w;
            let u = policy.action(x, c);
            let p = channel.success_probability(c, u);
            let period_cost = if x == 1 { model.outage_period_penalty } else { 0.0 };
            let outage = if x == 0 { 1.0 } else { 0.0 };
            average_cost += w
                * (outage
                    + price * model.energy(u)
                    + p * model.quality_penalties[u.quality]
                    + (1.0 - p) * period_cost);
            average_power += w * model.energy(u);
            delivery_rates[u.quality] += w * p;
            outage_rate += w * outage;
            if x == 1 {
                period += w * (1.0 - p);
            }
        }
    }
    Ok(FadingEvaluation {
        price,
        distribution,
        channel_marginal,
        average_cost,
        outage_rate,
        outage_period_rate: period,
        delivery_rates,
        average_power,
    })
}

/// All policies whose restriction to every channel state is of threshold
/// type: the product of the per-channel threshold sets.
pub fn enumerate_fading_thresholds(
    model: &ClientModel,
    channel: &ChannelModel,
) -> Result<impl Iterator<Item = FadingPolicy>> {
    channel.check(model)?;
    let single: Vec<Policy> = enumerate_thresholds(model)?.collect();
    let count = (single.len() as f64).powi(channel.num_states as i32);
    if count > ENUMERATION_LIMIT {
        return Err(Error::InstanceTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let cn = channel.num_states;
    let mut digits = vec![0usize; cn];
    let mut done = single.is_empty();
    Ok(std::iter::from_fn(move || {
        if done {
            return None;
        }
        let item = FadingPolicy {
            per_channel: digits.iter().map(|&d| single[d].clone()).collect(),
        };
        let mut i = 0;
        loop {
            if i == cn {
                done = true;
                break;
            }
            digits[i] += 1;
            if digits[i] < single.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        Some(item)
    }))
}

/// Cheapest per-channel threshold policy by exact evaluation from channel 0.
pub fn best_fading_threshold(
    model: &ClientModel,
    channel: &ChannelModel,
    price: f64,
) -> Result<(FadingPolicy, FadingEvaluation)> {
    let mut best: Option<(FadingPolicy, FadingEvaluation)> = None;
    for p in enumerate_fading_thresholds(model, channel)? {
        let e = evaluate_fading_exact(&p, model, channel, price, 0)?;
        if best.as_ref().is_none_or(|(_, b)| e.average_cost < b.average_cost) {
            best = Some((p, e));
        }
    }
    Ok(best.expect("at least one threshold policy"))
}
