//! Lagrangian price decomposition across clients.
//!
//! For an energy price `λ`, every client solves its own average-cost problem
//! with power charged at `λ` per unit. The dual function is
//! `D(λ) = Σ_n V_n(λ) − λ·Ē`, and `Σ_n power_n(λ) − Ē` is a supergradient of
//! the concave `D` at `λ`. The price is found by projected subgradient ascent.
//! Clients only ever see the price; no solve reads another client's state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{solve_average, SolveOptions};
use crate::error::{Error, Result, Violation};
use crate::markov::long_run_distribution;
use crate::model::ClientModel;
use crate::threshold::{evaluate_exact, policy_chain, Policy, StationaryEvaluation};

/// The joint problem: clients sharing an average power budget `Ē`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub clients: Vec<ClientModel>,
    pub power_budget: f64,
}

impl SystemConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        if self.clients.is_empty() {
            v.push(Violation::new("clients", "at least one client is required"));
        }
        if !(self.power_budget > 0.0 && self.power_budget.is_finite()) {
            v.push(Violation::new(
                "power_budget",
                "power budget must be positive (no strictly feasible policy otherwise)",
            ));
        }
        for (n, c) in self.clients.iter().enumerate() {
            if let Err(errs) = c.validate() {
                v.extend(errs.into_iter().map(|e| Violation {
                    field: format!("clients[{n}].{}", e.field),
                    message: e.message,
                }));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn check(&self) -> Result<()> {
        self.validate().map_err(Error::InvalidModel)
    }

    /// A price above which idling everywhere is optimal for every client,
    /// plus one: `max_n (T + λ_O + max λ_q)/min positive Ê + 1`.
    ///
    /// One delivery buys at most `T` slots of play time, so once a unit of
    /// energy costs more than `T` no transmission pays for itself.
    pub fn max_price(&self) -> f64 {
        self.clients
            .iter()
            .filter_map(|c| {
                let e_min = c.power_levels.iter().copied().find(|&e| e > 0.0)?;
                let lq = c.quality_penalties.last().copied().unwrap_or(0.0);
                Some((c.play_duration as f64 + c.outage_period_penalty + lq) / e_min)
            })
            .fold(0.0, f64::max)
            + 1.0
    }

    /// `1 / Σ_n max Ê_n`.
    pub fn default_step(&self) -> f64 {
        let total: f64 = self
            .clients
            .iter()
            .map(|c| c.power_levels.last().copied().unwrap_or(0.0))
            .sum();
        if total > 0.0 {
            1.0 / total
        } else {
            1.0
        }
    }
}

/// One client's optimum at a given price.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSolution {
    /// Exact average cost of `policy`, i.e. `V_n(λ)`.
    pub gain: f64,
    /// Gain estimate reported by relative value iteration.
    pub solver_gain: f64,
    pub policy: Policy,
    pub evaluation: StationaryEvaluation,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualState {
    pub iteration: usize,
    pub price: f64,
    pub dual_value: f64,
    /// `Σ_n power_n − Ē`.
    pub subgradient: f64,
    pub total_power: f64,
    pub clients: Vec<ClientSolution>,
}

fn solve_client(model: &ClientModel, price: f64, opts: &SolveOptions) -> Result<ClientSolution> {
    let report = solve_average(model, price, opts)?;
    if !report.converged {
        return Err(Error::NotConverged {
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    let evaluation = evaluate_exact(&report.policy, model, price)?;
    Ok(ClientSolution {
        gain: evaluation.average_cost,
        solver_gain: report.gain.unwrap_or(f64::NAN),
        policy: report.policy,
        evaluation,
        iterations: report.iterations,
    })
}

/// `D(λ)` with its supergradient, solving each client independently.
pub fn dual_value(cfg: &SystemConfig, price: f64, opts: &SolveOptions) -> Result<DualState> {
    cfg.check()?;
    if !(price >= 0.0 && price.is_finite()) {
        return Err(Error::InvalidParameter(format!("price must be nonnegative, got {price}")));
    }
    let clients = cfg
        .clients
        .par_iter()
        .enumerate()
        .map(|(n, m)| {
            solve_client(m, price, opts).map_err(|e| Error::Client {
                client: n,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_power: f64 = clients.iter().map(|c| c.evaluation.average_power).sum();
    let gains: f64 = clients.iter().map(|c| c.gain).sum();
    Ok(DualState {
        iteration: 0,
        price,
        dual_value: gains - price * cfg.power_budget,
        subgradient: total_power - cfg.power_budget,
        total_power,
        clients,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `α_k = α_0 / √k`.
    Diminishing { alpha0: f64 },
    Constant { alpha: f64 },
}

impl StepRule {
    pub fn step(&self, k: usize) -> f64 {
        match *self {
            StepRule::Diminishing { alpha0 } => alpha0 / (k as f64).sqrt(),
            StepRule::Constant { alpha } => alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub initial_price: f64,
    /// Defaults to diminishing steps with `α_0 = 1/Σ_n max Ê_n`.
    pub step: Option<StepRule>,
    pub max_iter: usize,
    /// Stop once `|g| ≤ tol`.
    pub tol: f64,
    /// Upper end of the projection interval; defaults to [`SystemConfig::max_price`].
    pub max_price: Option<f64>,
    /// Number of trailing prices spanned by the reported oscillation band.
    pub band_window: usize,
    pub solve: SolveOptions,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            initial_price: 0.0,
            step: None,
            max_iter: 500,
            tol: 1e-9,
            max_price: None,
            band_window: 20,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `|g| ≤ tol`.
    SmallSubgradient,
    /// Zero price with the budget slack.
    SlackAtZeroPrice,
    MaxIterations,
}

/// One row of the iteration history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub price: f64,
    pub dual_value: f64,
    pub subgradient: f64,
    pub total_power: f64,
    pub client_gains: Vec<f64>,
    pub client_powers: Vec<f64>,
}

impl From<&DualState> for IterationRecord {
    fn from(s: &DualState) -> Self {
        Self {
            k: s.iteration,
            price: s.price,
            dual_value: s.dual_value,
            subgradient: s.subgradient,
            total_power: s.total_power,
            client_gains: s.clients.iter().map(|c| c.gain).collect(),
            client_powers: s.clients.iter().map(|c| c.evaluation.average_power).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AscentResult {
    /// Iterate with the largest dual value.
    pub best: DualState,
    /// Iterate at which the loop stopped.
    pub last: DualState,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub stop: StopReason,
    /// `[min, max]` of the trailing prices.
    pub band: (f64, f64),
}

impl AscentResult {
    /// The stopping iterate when a stopping test fired, otherwise the best one.
    pub fn solution(&self) -> &DualState {
        if self.converged {
            &self.last
        } else {
            &self.best
        }
    }
}

/// Projected subgradient ascent `λ ← clamp(λ + α_k·g_k, 0, λ_max)`.
pub fn subgradient_ascent(cfg: &SystemConfig, opts: &AscentOptions) -> Result<AscentResult> {
    cfg.check()?;
    if !(opts.initial_price >= 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter(
            "initial price must be nonnegative and max_iter nonzero".into(),
        ));
    }
    let step = opts.step.unwrap_or(StepRule::Diminishing {
        alpha0: cfg.default_step(),
    });
    let max_price = opts.max_price.unwrap_or_else(|| cfg.max_price());

    let mut price = opts.initial_price.min(max_price);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut best: Option<DualState> = None;
    let mut stop = StopReason::MaxIterations;
    let mut last = None;

    for k in 1..=opts.max_iter {
        let mut state = dual_value(cfg, price, &opts.solve)?;
        state.iteration = k;
        history.push(IterationRecord::from(&state));
        if best.as_ref().is_none_or(|b| state.dual_value > b.dual_value) {
            best = Some(state.clone());
        }
        let g = state.subgradient;
        if g.abs() <= opts.tol {
            stop = StopReason::SmallSubgradient;
        } else if price == 0.0 && g < 0.0 {
            stop = StopReason::SlackAtZeroPrice;
        }
        last = Some(state);
        if stop != StopReason::MaxIterations {
            break;
        }
        price = (price + step.step(k) * g).clamp(0.0, max_price);
    }

    let window = opts.band_window.max(1).min(history.len());
    let band = history[history.len() - window..]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.price), hi.max(r.price))
        });
    Ok(AscentResult {
        best: best.expect("at least one iteration"),
        last: last.expect("at least one iteration"),
        history,
        converged: stop != StopReason::MaxIterations,
        stop,
        band,
    })
}

/// Primal-dual summary of the product policy at a final price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub price: f64,
    pub dual_value: f64,
    /// Long-run QoE cost of the product policy, energy excluded.
    pub primal_cost: f64,
    pub total_power: f64,
    pub power_budget: f64,
    pub feasible: bool,
    /// `primal_cost − D(λ)`, reported only for feasible policies.
    pub duality_gap: Option<f64>,
    /// `λ·(power − Ē)`.
    pub slackness_residual: f64,
    pub client_gains: Vec<f64>,
    pub client_powers: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Feasibility slack on the power budget, relative.
const FEASIBILITY_SLACK: f64 = 1e-9;

pub fn verify_primal_dual(cfg: &SystemConfig, state: &DualState) -> Certificate {
    let primal_cost: f64 = state.clients.iter().map(|c| c.evaluation.qoe_cost()).sum();
    let budget = cfg.power_budget;
    let feasible = state.total_power <= budget * (1.0 + FEASIBILITY_SLACK);
    let mut warnings = Vec::new();
    if !feasible {
        warnings.push(format!(
            "deterministic product policy draws {:.6} > budget {:.6}; the constrained optimum mixes two policies at this price",
            state.total_power, budget
        ));
    }
    let gap = feasible.then_some(primal_cost - state.dual_value);
    if let Some(g) = gap {
        if g < -1e-9 {
            warnings.push(format!("negative duality gap {g:e}: numerical error exceeds tolerance"));
        }
    }
    Certificate {
        price: state.price,
        dual_value: state.dual_value,
        primal_cost,
        total_power: state.total_power,
        power_budget: budget,
        feasible,
        duality_gap: gap,
        slackness_residual: state.price * (state.total_power - budget),
        client_gains: state.clients.iter().map(|c| c.gain).collect(),
        client_powers: state.clients.iter().map(|c| c.evaluation.average_power).collect(),
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub price: f64,
    pub dual_value: f64,
    pub total_power: f64,
    pub client_gains: Vec<f64>,
    pub client_powers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityProbe {
    pub points: Vec<ProbePoint>,
    /// Largest `interp(a, c)(b) − D(b)` over consecutive triples `a < b < c`.
    pub max_midpoint_violation: f64,
    /// Largest increase of `D` between consecutive points after its maximizer.
    pub max_increase_after_peak: f64,
    pub passes: bool,
}

pub const CONCAVITY_TOLERANCE: f64 = 1e-9;

/// Evaluates `D` on a sorted price grid and checks it is concave there.
pub fn concavity_probe(cfg: &SystemConfig, grid: &[f64], opts: &SolveOptions) -> Result<ConcavityProbe> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("price grid must be strictly increasing".into()));
    }
    let points = grid
        .par_iter()
        .map(|&price| {
            dual_value(cfg, price, opts).map(|s| ProbePoint {
                price,
                dual_value: s.dual_value,
                total_power: s.total_power,
                client_gains: s.clients.iter().map(|c| c.gain).collect(),
                client_powers: s.clients.iter().map(|c| c.evaluation.average_power).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut max_midpoint_violation = f64::NEG_INFINITY;
    for w in points.windows(3) {
        let (a, b, c) = (&w[0], &w[1], &w[2]);
        let t = (b.price - a.price) / (c.price - a.price);
        let chord = (1.0 - t) * a.dual_value + t * c.dual_value;
        max_midpoint_violation = max_midpoint_violation.max(chord - b.dual_value);
    }
    let peak = points
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.dual_value > points[best].dual_value { i } else { best });
    let max_increase_after_peak = points[peak..]
        .windows(2)
        .map(|w| w[1].dual_value - w[0].dual_value)
        .fold(f64::NEG_INFINITY, f64::max);
    let passes = max_midpoint_violation <= CONCAVITY_TOLERANCE
        && max_increase_after_peak <= CONCAVITY_TOLERANCE;
    Ok(ConcavityProbe {
        points,
        max_midpoint_violation,
        max_increase_after_peak,
        passes,
    })
}

/// Long-run averages of a product policy on the joint chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEvaluation {
    pub lagrangian: f64,
    pub qoe_cost: f64,
    pub total_power: f64,
}

/// Largest joint state space [`joint_lagrangian`] will build.
pub const JOINT_STATE_LIMIT: usize = 20_000;

/// Evaluates the product policy `⊗_n policies[n]` directly on the joint
/// Markov chain over `(x_1, ..., x_N)`, started from all buffers full.
pub fn joint_lagrangian(cfg: &SystemConfig, policies: &[Policy], price: f64) -> Result<JointEvaluation> {
    cfg.check()?;
    if policies.len() != cfg.clients.len() {
        return Err(Error::InvalidPolicy("one policy per client is required".into()));
    }
    let radix: Vec<usize> = cfg.clients.iter().map(ClientModel::num_states).collect();
    let total = radix
        .iter()
        .try_fold(1usize, |acc, &r| acc.checked_mul(r))
        .filter(|&t| t <= JOINT_STATE_LIMIT)
        .ok_or(Error::InstanceTooLarge {
            count: radix.iter().map(|&r| r as f64).product(),
            limit: JOINT_STATE_LIMIT as f64,
        })?;
    let chains: Vec<_> = cfg
        .clients
        .iter()
        .zip(policies)
        .map(|(m, p)| policy_chain(p, m))
        .collect();

    let decode = |mut idx: usize| {
        let mut xs = vec![0; radix.len()];
        for (n, &r) in radix.iter().enumerate() {
            xs[n] = idx % r;
            idx /= r;
        }
        xs
    };
    let encode = |xs: &[usize]| xs.iter().zip(&radix).rev().fold(0, |acc, (&x, &r)| acc * r + x);

    let mut joint = Vec::with_capacity(total);
    let mut stage_cost = Vec::with_capacity(total);
    let mut stage_qoe = Vec::with_capacity(total);
    let mut stage_power = Vec::with_capacity(total);
    for idx in 0..total {
        let xs = decode(idx);
        let mut row = vec![(xs.clone(), 1.0)];
        for (n, &x) in xs.iter().enumerate() {
            row = row
                .into_iter()
                .flat_map(|(ys, p)| {
                    chains[n][x].iter().map(move |&(y, q)| {
                        let mut next = ys.clone();
                        next[n] = y;
                        (next, p * q)
                    })
                })
                .collect();
        }
        joint.push(row.into_iter().map(|(ys, p)| (encode(&ys), p)).collect());
        let (mut c, mut e) = (0.0, 0.0);
        for (n, &x) in xs.iter().enumerate() {
            let m = &cfg.clients[n];
            let u = policies[n].action(x);
            c += m.expected_slot_cost(x, u, 0.0);
            e += m.energy(u);
        }
        stage_qoe.push(c);
        stage_power.push(e);
        stage_cost.push(c + price * e);
    }

    let start = encode(&cfg.clients.iter().map(ClientModel::max_state).collect::<Vec<_>>());
    let pi = long_run_distribution(&joint, start)?;
    let dot = |v: &[f64]| pi.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let total_power = dot(&stage_power);
    Ok(JointEvaluation {
        lagrangian: dot(&stage_cost) - price * cfg.power_budget,
        qoe_cost: dot(&stage_qoe),
        total_power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{canonical_model, canonical_system};

    fn single(budget: f64) -> SystemConfig {
        SystemConfig {
            clients: vec![canonical_model()],
            power_budget: budget,
        }
    }

    #[test]
    fn zero_price_is_unconstrained() {
        let cfg = single(0.5);
        let s = dual_value(&cfg, 0.0, &SolveOptions::default()).unwrap();
        let c = &s.clients[0];
        assert_eq!(s.dual_value, c.gain);
        assert!((s.subgradient - (c.evaluation.average_power - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn prohibitive_price_idles_everyone() {
        // λ·min Ê = 3.6 > 1 + λ_O + max λ_q = 3.5
        let cfg = single(0.5);
        let s = dual_value(&cfg, 3.6, &SolveOptions::default()).unwrap();
        assert_eq!(s.clients[0].policy.actions(), Policy::idle(&cfg.clients[0]).actions());
        assert!((s.dual_value - (1.0 - 3.6 * 0.5)).abs() < 1e-12);
        assert_eq!(s.subgradient, -0.5);
    }

    #[test]
    fn max_price_idles_everyone() {
        let cfg = canonical_system();
        let s = dual_value(&cfg, cfg.max_price(), &SolveOptions::default()).unwrap();
        for (c, m) in s.clients.iter().zip(&cfg.clients) {
            assert_eq!(c.policy.actions(), Policy::idle(m).actions());
        }
    }

    #[test]
    fn identical_clients_add_up() {
        let two = SystemConfig {
            clients: vec![canonical_model(), canonical_model()],
            power_budget: 0.7,
        };
        let opts = SolveOptions::default();
        for price in [0.0, 0.3, 1.2] {
            let one = dual_value(&single(0.7), price, &opts).unwrap();
            let both = dual_value(&two, price, &opts).unwrap();
            let expect = 2.0 * one.clients[0].gain - price * 0.7;
            assert!((both.dual_value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn slack_budget_stops_at_zero_price() {
        let cfg = single(10.0);
        let r = subgradient_ascent(&cfg, &AscentOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.stop, StopReason::SlackAtZeroPrice);
        assert_eq!(r.last.price, 0.0);
        assert_eq!(r.history.len(), 1);
        let cert = verify_primal_dual(&cfg, r.solution());
        assert_eq!(cert.duality_gap, Some(0.0));
        assert_eq!(cert.slackness_residual, 0.0);
    }

    #[test]
    fn tiny_budget_drives_price_to_idling() {
        let cfg = single(1e-6);
        let opts = AscentOptions {
            max_iter: 2000,
            tol: 1e-5,
            ..Default::default()
        };
        let r = subgradient_ascent(&cfg, &opts).unwrap();
        assert_eq!(r.stop, StopReason::SmallSubgradient);
        let s = r.solution();
        assert_eq!(s.clients[0].policy.actions(), Policy::idle(&cfg.clients[0]).actions());
        assert!(s.total_power <= cfg.power_budget);
        assert!(s.price > 0.0);
    }

    #[test]
    fn all_idle_system_certificate() {
        let m = ClientModel {
            power_levels: vec![0.0],
            success_prob: vec![vec![0.0], vec![0.0]],
            ..canonical_model()
        };
        let cfg = SystemConfig {
            clients: vec![m.clone(), m],
            power_budget: 1.0,
        };
        let r = subgradient_ascent(&cfg, &AscentOptions::default()).unwrap();
        let cert = verify_primal_dual(&cfg, r.solution());
        assert_eq!(cert.price, 0.0);
        assert_eq!(cert.primal_cost, 2.0);
        assert_eq!(cert.total_power, 0.0);
        assert_eq!(cert.duality_gap, Some(0.0));
    }

    #[test]
    fn zero_budget_rejected() {
        let cfg = single(0.0);
        assert!(matches!(
            subgradient_ascent(&cfg, &AscentOptions::default()),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn single_point_probe_passes() {
        let p = concavity_probe(&single(0.5), &[0.0], &SolveOptions::default()).unwrap();
        assert!(p.passes);
    }

    #[test]
    fn probe_slopes_are_bounded() {
        let cfg = canonical_system();
        let grid: Vec<f64> = (0..=20).map(|i| 0.25 * i as f64).collect();
        let p = concavity_probe(&cfg, &grid, &SolveOptions::default()).unwrap();
        assert!(p.passes);
        let max_power: f64 = cfg.clients.iter().map(|c| c.power_levels[2]).sum();
        for w in p.points.windows(2) {
            let slope = (w[1].dual_value - w[0].dual_value) / (w[1].price - w[0].price);
            assert!(slope >= -cfg.power_budget - 1e-9);
            assert!(slope <= max_power - cfg.power_budget + 1e-9);
        }
    }

    #[test]
    fn joint_chain_of_one_client_matches_single_evaluation() {
        let cfg = single(0.4);
        let s = dual_value(&cfg, 0.2, &SolveOptions::default()).unwrap();
        let j = joint_lagrangian(&cfg, &[s.clients[0].policy.clone()], 0.2).unwrap();
        assert!((j.lagrangian - s.dual_value).abs() < 1e-12);
    }
}
