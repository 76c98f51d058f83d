//! The single-client streaming MDP.
//!
//! The state is the play time remaining in the client's buffer, measured in
//! slots: `x ∈ {0, ..., B}`. A buffer of `n` packets that each play for `T`
//! slots has `B = n·T`. Each slot the controller picks an [`Action`], a video
//! quality and a transmit power level. A successful delivery adds `T` slots of
//! play time, unless that would overflow the buffer.
//!
//! Quality and power indices are zero-based throughout the crate: quality `0`
//! is the best-looking (and cheapest to deliver, least likely to succeed)
//! class, power `0` is the mandatory zero-energy level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// One client's complete problem data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    /// Buffer capacity `B` in play-time slots.
    pub buffer_playtime: usize,
    /// Play time `T` added by one delivered packet.
    pub play_duration: usize,
    /// Penalty charged per delivered packet of each quality, strictly increasing.
    pub quality_penalties: Vec<f64>,
    /// Energy per transmission attempt at each level; the first level is 0.
    pub power_levels: Vec<f64>,
    /// `success_prob[q][e]`: delivery probability at quality `q`, power `e`.
    pub success_prob: Vec<Vec<f64>>,
    /// Penalty charged when a new outage period begins.
    pub outage_period_penalty: f64,
}

/// A control: requested quality and power level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub quality: usize,
    pub power: usize,
}

impl Action {
    pub const fn new(quality: usize, power: usize) -> Self {
        Self { quality, power }
    }

    pub fn is_idle(&self) -> bool {
        self.power == 0
    }
}

/// Realized cost components of one slot, with the outage-period charge
/// attributed to the slot whose failed delivery empties the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub outage: bool,
    pub new_outage_period: bool,
    pub delivered_quality: Option<usize>,
    pub energy_spent: f64,
}

impl StepCost {
    /// Total cost of the slot at energy price `price`.
    pub fn total(&self, model: &ClientModel, price: f64) -> f64 {
        let mut cost = f64::from(u8::from(self.outage)) + price * self.energy_spent;
        if self.new_outage_period {
            cost += model.outage_period_penalty;
        }
        if let Some(q) = self.delivered_quality {
            cost += model.quality_penalties[q];
        }
        cost
    }
}

impl ClientModel {
    pub fn num_qualities(&self) -> usize {
        self.quality_penalties.len()
    }

    pub fn num_powers(&self) -> usize {
        self.power_levels.len()
    }

    /// Largest state, `B`.
    pub fn max_state(&self) -> usize {
        self.buffer_playtime
    }

    pub fn num_states(&self) -> usize {
        self.buffer_playtime + 1
    }

    /// `B − T + 1`: the largest state in which a delivery still fits.
    pub fn transmit_limit(&self) -> usize {
        self.buffer_playtime + 1 - self.play_duration
    }

    /// Next state after a successful delivery.
    pub fn success_transition(&self, x: usize) -> usize {
        if x <= self.transmit_limit() {
            x.saturating_sub(1) + self.play_duration
        } else {
            x - 1
        }
    }

    /// Next state after a failed (or absent) delivery.
    pub fn failure_transition(&self, x: usize) -> usize {
        x.saturating_sub(1)
    }

    /// The single canonical idle action: lowest-quality class at zero power.
    pub fn idle(&self) -> Action {
        Action::new(self.num_qualities() - 1, 0)
    }

    /// Number of distinct admissible actions, `1 + Q·(K − 1)`.
    pub fn num_actions(&self) -> usize {
        1 + self.num_qualities() * (self.num_powers() - 1)
    }

    /// Every admissible action in tie-break order: idle first, then by
    /// ascending power, then ascending quality index.
    pub fn actions(&self) -> Vec<Action> {
        let mut out = Vec::with_capacity(self.num_actions());
        out.push(self.idle());
        for e in 1..self.num_powers() {
            for q in 0..self.num_qualities() {
                out.push(Action::new(q, e));
            }
        }
        out
    }

    /// Actions admissible in state `x`. Above the transmit limit only idle is allowed.
    pub fn actions_at(&self, x: usize) -> Vec<Action> {
        if x <= self.transmit_limit() {
            self.actions()
        } else {
            vec![self.idle()]
        }
    }

    pub fn is_admissible(&self, x: usize, u: Action) -> bool {
        if x > self.max_state() || u.quality >= self.num_qualities() || u.power >= self.num_powers()
        {
            return false;
        }
        if u.is_idle() {
            return u == self.idle();
        }
        x <= self.transmit_limit()
    }

    pub fn success_probability(&self, u: Action) -> f64 {
        self.success_prob[u.quality][u.power]
    }

    pub fn energy(&self, u: Action) -> f64 {
        self.power_levels[u.power]
    }

    /// `C(u) = λ_E·Ê(u) + P(u)·λ_q(u)`.
    pub fn one_step_cost(&self, u: Action, price: f64) -> f64 {
        price * self.energy(u) + self.success_probability(u) * self.quality_penalties[u.quality]
    }

    /// Expected immediate cost of `u` in state `x`: the outage indicator, the
    /// transmission and quality cost, and the expected new-outage-period charge.
    pub fn expected_slot_cost(&self, x: usize, u: Action, price: f64) -> f64 {
        let p = self.success_probability(u);
        let outage = if x == 0 { 1.0 } else { 0.0 };
        let period = if x == 1 { self.outage_period_penalty } else { 0.0 };
        outage + self.one_step_cost(u, price) + (1.0 - p) * period
    }

    /// Applies `u` in `x` with the given delivery outcome.
    pub fn realized_step(&self, x: usize, u: Action, success: bool) -> (usize, StepCost) {
        let next = if success {
            self.success_transition(x)
        } else {
            self.failure_transition(x)
        };
        let cost = StepCost {
            outage: x == 0,
            new_outage_period: x != 0 && next == 0,
            delivered_quality: success.then_some(u.quality),
            energy_spent: self.energy(u),
        };
        (next, cost)
    }

    /// Every violated invariant, or `Ok(())`.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let b = self.buffer_playtime;
        let t = self.play_duration;
        if b == 0 {
            v.push(Violation::new("buffer_playtime", "must be at least 1"));
        }
        if t == 0 {
            v.push(Violation::new("play_duration", "must be at least 1"));
        }
        if t > b {
            v.push(Violation::new(
                "play_duration",
                format!("play_duration {t} exceeds buffer_playtime {b}"),
            ));
        }

        let lq = &self.quality_penalties;
        if lq.is_empty() {
            v.push(Violation::new("quality_penalties", "at least one quality is required"));
        }
        for (i, &l) in lq.iter().enumerate() {
            if !l.is_finite() || l < 0.0 {
                v.push(Violation::new(
                    format!("quality_penalties[{i}]"),
                    "must be finite and nonnegative",
                ));
            }
        }
        if lq.windows(2).any(|w| w[1] <= w[0]) {
            v.push(Violation::new(
                "quality_penalties",
                "quality_penalties not strictly increasing",
            ));
        }

        let e = &self.power_levels;
        match e.first() {
            None => v.push(Violation::new("power_levels", "at least one power level is required")),
            Some(&e0) if e0 != 0.0 => {
                v.push(Violation::new("power_levels[0]", "first power level must be 0"))
            }
            _ => {}
        }
        for (i, &p) in e.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                v.push(Violation::new(
                    format!("power_levels[{i}]"),
                    "must be finite and nonnegative",
                ));
            }
        }
        if e.windows(2).any(|w| w[1] <= w[0]) {
            v.push(Violation::new("power_levels", "power_levels not strictly increasing"));
        }

        if !self.outage_period_penalty.is_finite() || self.outage_period_penalty < 0.0 {
            v.push(Violation::new(
                "outage_period_penalty",
                "must be finite and nonnegative",
            ));
        }

        v.extend(check_success_matrix(
            "success_prob",
            &self.success_prob,
            lq.len(),
            e.len(),
        ));

        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Like [`validate`](Self::validate) but as an [`Error`].
    pub fn check(&self) -> Result<()> {
        self.validate().map_err(Error::InvalidModel)
    }
}

/// Shape, range, idle and monotonicity checks for a `Q×K` success matrix.
pub(crate) fn check_success_matrix(
    field: &str,
    p: &[Vec<f64>],
    num_q: usize,
    num_e: usize,
) -> Vec<Violation> {
    let mut v = Vec::new();
    if p.len() != num_q || p.iter().any(|row| row.len() != num_e) {
        v.push(Violation::new(
            field,
            format!("expected a {num_q}x{num_e} matrix"),
        ));
        return v;
    }
    for (q, row) in p.iter().enumerate() {
        for (e, &pr) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&pr) {
                v.push(Violation::new(
                    format!("{field}[{q}][{e}]"),
                    "probability outside [0, 1]",
                ));
            }
        }
        if num_e > 0 && row[0] != 0.0 {
            v.push(Violation::new(
                format!("{field}[{q}][0]"),
                "zero power must never deliver",
            ));
        }
        if row.windows(2).any(|w| w[1] < w[0]) {
            v.push(Violation::new(
                format!("{field}[{q}]"),
                format!("{field} not monotone in power"),
            ));
        }
    }
    for q in 1..num_q {
        if (0..num_e).any(|e| p[q][e] < p[q - 1][e]) {
            v.push(Violation::new(
                format!("{field}[{q}]"),
                format!("{field} not monotone in quality"),
            ));
        }
    }
    v
}
