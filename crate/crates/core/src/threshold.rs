//! Stationary policies, the threshold property, and exact policy evaluation.
//!
//! A policy is of threshold type when, scanning the states `1..=B−T+1`
//! downward, its choices only ever move to actions with a higher quality index
//! at the same power, or a higher power at the same quality. State `0` is not
//! constrained, and states above `B − T + 1` are always idle.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{long_run_distribution, SparseChain};
use crate::model::{Action, ClientModel};

/// Cap on the number of policies any enumeration may visit.
pub const ENUMERATION_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyOrigin {
    Dp,
    Enumerated,
    Explicit,
}

/// A stationary deterministic policy over the states `0..=B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    actions: Vec<Action>,
    pub origin: PolicyOrigin,
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_entries().serialize(serializer)
    }
}

/// One row of the policy file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub state: usize,
    pub quality: usize,
    pub power_index: usize,
}

impl Policy {
    /// Checks that `actions[x]` is admissible in every state `x`.
    pub fn new(model: &ClientModel, actions: Vec<Action>, origin: PolicyOrigin) -> Result<Self> {
        if actions.len() != model.num_states() {
            return Err(Error::InvalidPolicy(format!(
                "policy covers {} states, model has {}",
                actions.len(),
                model.num_states()
            )));
        }
        for (x, &u) in actions.iter().enumerate() {
            if !model.is_admissible(x, u) {
                return Err(Error::InvalidPolicy(format!(
                    "action (quality {}, power {}) is not admissible in state {x}",
                    u.quality, u.power
                )));
            }
        }
        Ok(Self { actions, origin })
    }

    /// Builds a policy from `f`, substituting idle wherever `f` proposes an
    /// action that is not admissible.
    pub fn from_fn(model: &ClientModel, origin: PolicyOrigin, f: impl Fn(usize) -> Action) -> Self {
        let actions = (0..model.num_states())
            .map(|x| {
                let u = f(x);
                if model.is_admissible(x, u) {
                    u
                } else {
                    model.idle()
                }
            })
            .collect();
        Self { actions, origin }
    }

    pub fn idle(model: &ClientModel) -> Self {
        Self::from_fn(model, PolicyOrigin::Explicit, |_| model.idle())
    }

    pub(crate) fn from_actions_unchecked(actions: Vec<Action>, origin: PolicyOrigin) -> Self {
        Self { actions, origin }
    }

    pub fn with_origin(mut self, origin: PolicyOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn action(&self, x: usize) -> Action {
        self.actions[x]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn num_states(&self) -> usize {
        self.actions.len()
    }

    pub fn to_entries(&self) -> Vec<PolicyEntry> {
        self.actions
            .iter()
            .enumerate()
            .map(|(state, u)| PolicyEntry {
                state,
                quality: u.quality,
                power_index: u.power,
            })
            .collect()
    }

    pub fn from_entries(model: &ClientModel, entries: &[PolicyEntry]) -> Result<Self> {
        let mut actions = vec![None; model.num_states()];
        for e in entries {
            let slot = actions.get_mut(e.state).ok_or_else(|| {
                Error::InvalidPolicy(format!("state {} is outside the model", e.state))
            })?;
            if slot.is_some() {
                return Err(Error::InvalidPolicy(format!("state {} listed twice", e.state)));
            }
            *slot = Some(Action::new(e.quality, e.power_index));
        }
        let actions = actions
            .into_iter()
            .enumerate()
            .map(|(x, a)| a.ok_or_else(|| Error::InvalidPolicy(format!("state {x} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(model, actions, PolicyOrigin::Explicit)
    }
}

/// Outcome of [`is_threshold`]; `witness` is a pair of states `(x, y)`,
/// `y ≤ x`, whose actions break the threshold ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub witness: Option<(usize, usize)>,
}

impl ThresholdCheck {
    pub fn holds(&self) -> bool {
        self.witness.is_none()
    }
}

/// `b` chosen at a state `y` at or below the state where `a` is chosen is
/// forbidden when it shares `a`'s power with a lower quality index, or
/// shares `a`'s quality with a lower power.
fn conflicts(above: Action, below: Action) -> bool {
    (below.power == above.power && below.quality < above.quality)
        || (below.quality == above.quality && below.power < above.power)
}

pub fn is_threshold(policy: &Policy, model: &ClientModel) -> ThresholdCheck {
    let hi = model.transmit_limit().min(policy.num_states().saturating_sub(1));
    for x in 1..=hi {
        for y in 1..=x {
            if conflicts(policy.action(x), policy.action(y)) {
                return ThresholdCheck {
                    witness: Some((x, y)),
                };
            }
        }
    }
    ThresholdCheck { witness: None }
}

/// Exact long-run behaviour of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryEvaluation {
    pub price: f64,
    /// Long-run state occupancy `π(x)`.
    pub distribution: Vec<f64>,
    pub average_cost: f64,
    pub outage_rate: f64,
    pub outage_period_rate: f64,
    /// Long-run delivery rate of each quality.
    pub delivery_rates: Vec<f64>,
    pub average_power: f64,
}

impl StationaryEvaluation {
    /// Average cost without the energy charge.
    pub fn qoe_cost(&self) -> f64 {
        self.average_cost - self.price * self.average_power
    }
}

pub(crate) fn policy_chain(policy: &Policy, model: &ClientModel) -> SparseChain {
    (0..model.num_states())
        .map(|x| {
            let u = policy.action(x);
            let p = model.success_probability(u);
            let s = model.success_transition(x);
            let f = model.failure_transition(x);
            if s == f || p == 0.0 {
                vec![(f, 1.0)]
            } else if p == 1.0 {
                vec![(s, 1.0)]
            } else {
                vec![(s, p), (f, 1.0 - p)]
            }
        })
        .collect()
}

/// Evaluates `policy` starting from a full buffer.
pub fn evaluate_exact(policy: &Policy, model: &ClientModel, price: f64) -> Result<StationaryEvaluation> {
    evaluate_exact_from(policy, model, price, model.max_state())
}

/// Evaluates `policy` from the given initial state.
pub fn evaluate_exact_from(
    policy: &Policy,
    model: &ClientModel,
    price: f64,
    start: usize,
) -> Result<StationaryEvaluation> {
    if policy.num_states() != model.num_states() {
        return Err(Error::InvalidPolicy("policy and model sizes differ".into()));
    }
    let chain = policy_chain(policy, model);
    let pi = long_run_distribution(&chain, start)?;

    let mut average_cost = 0.0;
    let mut average_power = 0.0;
    let mut delivery_rates = vec![0.0; model.num_qualities()];
    for (x, &w) in pi.iter().enumerate() {
        let u = policy.action(x);
        average_cost += w * model.expected_slot_cost(x, u, price);
        average_power += w * model.energy(u);
        delivery_rates[u.quality] += w * model.success_probability(u);
    }
    // the only transitions into 0 from a nonzero state leave state 1
    let outage_period_rate = if pi.len() > 1 {
        pi[1] * (1.0 - model.success_probability(policy.action(1)))
    } else {
        0.0
    };
    Ok(StationaryEvaluation {
        price,
        outage_rate: pi[0],
        distribution: pi,
        average_cost,
        outage_period_rate,
        delivery_rates,
        average_power,
    })
}

/// Floors accumulated while assigning states from the top down:
/// `min_quality[e]` is the lowest quality index still allowed at power `e`,
/// `min_power[q]` the lowest power still allowed at quality `q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Floors {
    min_quality: Vec<usize>,
    min_power: Vec<usize>,
}

impl Floors {
    fn new(model: &ClientModel) -> Self {
        Self {
            min_quality: vec![0; model.num_powers()],
            min_power: vec![0; model.num_qualities()],
        }
    }

    fn allows(&self, u: Action) -> bool {
        u.quality >= self.min_quality[u.power] && u.power >= self.min_power[u.quality]
    }

    fn with(&self, u: Action) -> Self {
        let mut next = self.clone();
        next.min_quality[u.power] = next.min_quality[u.power].max(u.quality);
        next.min_power[u.quality] = next.min_power[u.quality].max(u.power);
        next
    }
}

/// Exact number of threshold policies of `model`.
pub fn count_thresholds(model: &ClientModel) -> f64 {
    fn go(
        level: usize,
        floors: &Floors,
        actions: &[Action],
        memo: &mut HashMap<(usize, Floors), f64>,
    ) -> f64 {
        if level == 0 {
            return 1.0;
        }
        if let Some(&c) = memo.get(&(level, floors.clone())) {
            return c;
        }
        let c = actions
            .iter()
            .filter(|&&u| floors.allows(u))
            .map(|&u| go(level - 1, &floors.with(u), actions, memo))
            .sum();
        memo.insert((level, floors.clone()), c);
        c
    }
    let actions = model.actions();
    let mut memo = HashMap::new();
    go(model.transmit_limit(), &Floors::new(model), &actions, &mut memo) * actions.len() as f64
}

/// Lazily enumerates every threshold policy of `model`.
///
/// States are assigned depth-first from `B − T + 1` down to `1`, then state
/// `0`, each trying actions in the model's tie-break order, so the stream
/// order is deterministic.
pub fn enumerate_thresholds(model: &ClientModel) -> Result<ThresholdPolicies> {
    let count = count_thresholds(model);
    if count > ENUMERATION_LIMIT {
        return Err(Error::InstanceTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(ThresholdPolicies::new(model))
}

/// Iterator returned by [`enumerate_thresholds`].
pub struct ThresholdPolicies {
    model: ClientModel,
    actions: Vec<Action>,
    /// `cursor[i]` indexes `actions` for level `i`; level `i < hi` is state
    /// `hi − i`, level `hi` is state 0.
    cursor: Vec<usize>,
    floors: Vec<Floors>,
    started: bool,
    done: bool,
}

impl ThresholdPolicies {
    fn new(model: &ClientModel) -> Self {
        Self {
            model: model.clone(),
            actions: model.actions(),
            cursor: Vec::new(),
            floors: vec![Floors::new(model)],
            started: false,
            done: false,
        }
    }

    fn levels(&self) -> usize {
        self.model.transmit_limit() + 1
    }

    fn allowed(&self, level: usize, u: Action) -> bool {
        level + 1 == self.levels() || self.floors[level].allows(u)
    }

    /// Pushes levels from `cursor.len()` onward, starting each at its first
    /// allowed action. Returns false if some level has no allowed action.
    fn descend(&mut self) -> bool {
        while self.cursor.len() < self.levels() {
            let level = self.cursor.len();
            match (0..self.actions.len()).find(|&i| self.allowed(level, self.actions[i])) {
                Some(i) => self.push(i),
                None => return false,
            }
        }
        true
    }

    fn push(&mut self, i: usize) {
        let level = self.cursor.len();
        let next = self.floors[level].with(self.actions[i]);
        self.cursor.push(i);
        self.floors.push(next);
    }

    fn pop(&mut self) -> Option<usize> {
        self.floors.pop();
        self.cursor.pop()
    }

    /// Moves to the next complete assignment in DFS order.
    fn advance(&mut self) -> bool {
        while let Some(i) = self.pop() {
            let level = self.cursor.len();
            if let Some(j) = (i + 1..self.actions.len()).find(|&j| self.allowed(level, self.actions[j])) {
                self.push(j);
                if self.descend() {
                    return true;
                }
            }
        }
        false
    }

    fn current(&self) -> Policy {
        let hi = self.model.transmit_limit();
        let mut acts = vec![self.model.idle(); self.model.num_states()];
        for (level, &i) in self.cursor.iter().enumerate() {
            let x = hi.saturating_sub(level);
            acts[x] = self.actions[i];
        }
        Policy::from_actions_unchecked(acts, PolicyOrigin::Enumerated)
    }
}

impl Iterator for ThresholdPolicies {
    type Item = Policy;

    fn next(&mut self) -> Option<Policy> {
        if self.done {
            return None;
        }
        let ok = if self.started {
            self.advance()
        } else {
            self.started = true;
            self.descend() || self.advance()
        };
        if ok {
            Some(self.current())
        } else {
            self.done = true;
            None
        }
    }
}

/// Cheapest threshold policy by exact average cost; ties go to the first in
/// enumeration order.
pub fn best_threshold(model: &ClientModel, price: f64) -> Result<(Policy, StationaryEvaluation)> {
    model.check()?;
    let mut best: Option<(Policy, StationaryEvaluation)> = None;
    for p in enumerate_thresholds(model)? {
        let eval = evaluate_exact(&p, model, price)?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| eval.average_cost < b.average_cost)
        {
            best = Some((p, eval));
        }
    }
    Ok(best.expect("enumeration always yields at least one policy"))
}

/// Number of stationary deterministic policies, `|A|^(B−T+2)`.
pub fn policy_space_size(model: &ClientModel) -> f64 {
    (model.num_actions() as f64).powi((model.transmit_limit() + 1) as i32)
}

/// Exhaustive minimum over every stationary deterministic policy.
pub fn brute_force_all(model: &ClientModel, price: f64) -> Result<(Policy, StationaryEvaluation)> {
    model.check()?;
    let count = policy_space_size(model);
    if count > ENUMERATION_LIMIT {
        return Err(Error::InstanceTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let actions = model.actions();
    let free = model.transmit_limit() + 1;
    let mut digits = vec![0usize; free];
    let mut best: Option<(Policy, StationaryEvaluation)> = None;
    loop {
        let mut acts = vec![model.idle(); model.num_states()];
        for (x, &d) in digits.iter().enumerate() {
            acts[x] = actions[d];
        }
        let p = Policy::from_actions_unchecked(acts, PolicyOrigin::Enumerated);
        let eval = evaluate_exact(&p, model, price)?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| eval.average_cost < b.average_cost)
        {
            best = Some((p, eval));
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == free {
                return Ok(best.expect("policy space is nonempty"));
            }
            digits[i] += 1;
            if digits[i] < actions.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}
