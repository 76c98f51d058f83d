//! Named property suites run against a system configuration.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{d_function, solve_average, solve_discounted, SolveOptions};
use crate::dual::{
    concavity_probe, dual_value, joint_lagrangian, subgradient_ascent, verify_primal_dual, AscentOptions,
    SystemConfig,
};
use crate::error::{Error, Result};
use crate::fading::{solve_fading_average, ChannelModel};
use crate::instances::{random_model, ModelBounds};
use crate::model::ClientModel;
use crate::sim::{run_single, SimConfig};
use crate::threshold::{best_threshold, brute_force_all, evaluate_exact, is_threshold, policy_space_size};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Threshold,
    #[serde(rename = "lemma3")]
    DMonotone,
    Duality,
    SimConsistency,
    FadingReduction,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Threshold,
        Suite::DMonotone,
        Suite::Duality,
        Suite::SimConsistency,
        Suite::FadingReduction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Threshold => "threshold",
            Suite::DMonotone => "lemma3",
            Suite::Duality => "duality",
            Suite::SimConsistency => "sim-consistency",
            Suite::FadingReduction => "fading-reduction",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Seeded random models checked in addition to the configured clients.
    pub random_configs: usize,
    /// Energy price for single-client checks.
    pub price: f64,
    pub horizon: u64,
    pub warmup: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            random_configs: 0,
            price: 0.1,
            horizon: 200_000,
            warmup: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: String::new(),
        }
    }

    fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            measured: if passed { 0.0 } else { 1.0 },
            tolerance: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

const BRUTE_FORCE_LIMIT: f64 = 1e5;
const D_MONOTONE_HORIZON: usize = 200;
const D_MONOTONE_TOLERANCE: f64 = 1e-12;
const GAIN_TOLERANCE: f64 = 1e-8;
const STANDARD_ERRORS: f64 = 3.0;

fn models(cfg: &SystemConfig, opts: &VerifyOptions) -> Vec<(String, ClientModel)> {
    let mut out: Vec<_> = cfg
        .clients
        .iter()
        .enumerate()
        .map(|(i, m)| (format!("client {i}"), m.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bounds = ModelBounds::default();
    for i in 0..opts.random_configs {
        out.push((format!("random {i}"), random_model(&mut rng, &bounds)));
    }
    out
}

fn threshold_suite(cfg: &SystemConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let solve = SolveOptions::default();
    let mut checks = Vec::new();
    for (label, m) in models(cfg, opts) {
        for beta in [0.9, 0.99] {
            let r = solve_discounted(&m, opts.price, beta, &solve)?;
            let w = is_threshold(&r.policy, &m).witness;
            checks.push(Check::flag(
                format!("{label}: discounted greedy policy, beta {beta}"),
                w.is_none(),
                w.map(|(x, y)| format!("violated at x={x}, y={y}")).unwrap_or_default(),
            ));
        }
        let r = solve_average(&m, opts.price, &solve)?;
        let w = is_threshold(&r.policy, &m).witness;
        checks.push(Check::flag(
            format!("{label}: average-cost greedy policy"),
            w.is_none(),
            w.map(|(x, y)| format!("violated at x={x}, y={y}")).unwrap_or_default(),
        ));
        if policy_space_size(&m) <= BRUTE_FORCE_LIMIT {
            let (_, t) = best_threshold(&m, opts.price)?;
            let (_, b) = brute_force_all(&m, opts.price)?;
            checks.push(Check::at_most(
                format!("{label}: best threshold vs brute force"),
                (t.average_cost - b.average_cost).abs(),
                GAIN_TOLERANCE,
            ));
        }
    }
    Ok(checks)
}

fn d_monotone_suite(cfg: &SystemConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (label, m) in models(cfg, opts) {
        for beta in [0.5, 0.9, 0.99] {
            let ds = d_function(&m, opts.price, beta, D_MONOTONE_HORIZON)?;
            let limit = m.transmit_limit();
            let (worst, at) = ds
                .iter()
                .map(|d| (d.max_increase(limit), d.horizon))
                .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
            let mut c = Check::at_most(
                format!("{label}: D nonincreasing on 1..={limit}, beta {beta}"),
                worst.max(0.0),
                D_MONOTONE_TOLERANCE,
            );
            if !c.passed {
                c.detail = format!("largest increase at horizon {at}");
            }
            checks.push(c);
        }
    }
    Ok(checks)
}

fn duality_suite(cfg: &SystemConfig, _opts: &VerifyOptions) -> Result<Vec<Check>> {
    let ascent = AscentOptions::default();
    let r = subgradient_ascent(cfg, &ascent)?;
    let s = r.solution();
    let cert = verify_primal_dual(cfg, s);
    let budget = cfg.power_budget;
    let mut checks = vec![Check::flag(
        "price iteration stopped",
        r.converged || (s.total_power - budget).abs() <= 1e-2 * budget,
        format!("{:?} after {} iterations", r.stop, r.history.len()),
    )];
    let off = if s.price == 0.0 && s.total_power <= budget {
        0.0
    } else {
        (s.total_power - budget).abs() / budget
    };
    checks.push(Check::at_most("relative power mismatch (0 when slack at zero price)", off, 1e-2));
    if let Some(gap) = cert.duality_gap {
        checks.push(Check::at_most("weak duality: D(price) - primal cost", -gap, 1e-9));
        if s.price == 0.0 {
            checks.push(Check::at_most("duality gap at zero price", gap.abs(), 1e-12));
        }
    }

    let top = cfg.max_price();
    let grid: Vec<f64> = (0..=100).map(|i| top * i as f64 / 100.0).collect();
    let probe = concavity_probe(cfg, &grid, &ascent.solve)?;
    checks.push(Check::at_most(
        "concavity of D on a 101-point grid",
        probe.max_midpoint_violation.max(probe.max_increase_after_peak).max(0.0),
        crate::dual::CONCAVITY_TOLERANCE,
    ));
    let monotone = probe
        .points
        .windows(2)
        .flat_map(|w| w[1].client_powers.iter().zip(&w[0].client_powers).map(|(a, b)| a - b))
        .fold(0.0f64, f64::max);
    checks.push(Check::at_most("client power nonincreasing in price", monotone, 1e-12));

    let small = cfg.clients.len() <= 2 && cfg.clients.iter().all(|m| m.max_state() <= 5);
    if small {
        let mut worst = 0.0f64;
        for i in 0..5 {
            let price = top * i as f64 / 4.0;
            let st = dual_value(cfg, price, &ascent.solve)?;
            let policies: Vec<_> = st.clients.iter().map(|c| c.policy.clone()).collect();
            let joint = joint_lagrangian(cfg, &policies, price)?;
            worst = worst.max((joint.lagrangian - st.dual_value).abs());
        }
        checks.push(Check::at_most("joint-chain Lagrangian equals assembled D", worst, GAIN_TOLERANCE));
    }
    Ok(checks)
}

fn sim_suite(cfg: &SystemConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let sim = SimConfig {
        horizon: opts.horizon,
        warmup: opts.warmup,
        seed: opts.seed,
        ..Default::default()
    };
    for (i, m) in cfg.clients.iter().enumerate() {
        let policy = solve_average(m, opts.price, &SolveOptions::default())?.policy;
        let exact = evaluate_exact(&policy, m, opts.price)?;
        let got = run_single(m, &policy, &sim)?;
        let pairs = [
            ("outage rate", exact.outage_rate, got.rates.outage_rate, got.standard_errors.outage_rate),
            (
                "outage-period rate",
                exact.outage_period_rate,
                got.rates.outage_period_rate,
                got.standard_errors.outage_period_rate,
            ),
            ("average power", exact.average_power, got.rates.average_power, got.standard_errors.average_power),
            ("QoE cost", exact.qoe_cost(), got.rates.qoe_cost, got.standard_errors.qoe_cost),
        ];
        for (name, want, mean, se) in pairs {
            checks.push(z_check(format!("client {i}: {name}"), want, mean, se));
        }
    }
    Ok(checks)
}

/// Agreement of a simulated mean with an exact value, in standard errors.
fn z_check(name: String, exact: f64, mean: f64, se: f64) -> Check {
    let diff = (mean - exact).abs();
    let z = if se > 0.0 {
        diff / se
    } else if diff <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    let mut c = Check::at_most(name, z, STANDARD_ERRORS);
    c.detail = format!("exact {exact:.6}, simulated {mean:.6} ± {se:.2e}");
    c
}

fn fading_suite(cfg: &SystemConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let solve = SolveOptions::default();
    let mut checks = Vec::new();
    for (label, m) in models(cfg, opts) {
        let fixed = solve_average(&m, opts.price, &solve)?;
        let fading = solve_fading_average(&m, &ChannelModel::fixed(&m), opts.price, &solve)?;
        checks.push(Check::flag(
            format!("{label}: single-channel policy identical"),
            fading.policy.per_channel[0] == fixed.policy,
            "",
        ));
        let dv = fading.values[0]
            .iter()
            .zip(&fixed.values.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        checks.push(Check::at_most(format!("{label}: single-channel values"), dv, 1e-12));
        let dg = (fading.gain.unwrap_or(f64::NAN) - fixed.gain.unwrap_or(f64::NAN)).abs();
        checks.push(Check::at_most(format!("{label}: single-channel gain"), dg, 1e-12));
    }
    Ok(checks)
}

/// Runs one suite; only the duality suite reads `cfg.power_budget`.
pub fn run_suite(suite: Suite, cfg: &SystemConfig, opts: &VerifyOptions) -> Result<SuiteReport> {
    if suite == Suite::Duality {
        cfg.check()?;
    } else {
        for (client, m) in cfg.clients.iter().enumerate() {
            m.check().map_err(|e| Error::Client { client, source: Box::new(e) })?;
        }
    }
    let checks = match suite {
        Suite::Threshold => threshold_suite(cfg, opts)?,
        Suite::DMonotone => d_monotone_suite(cfg, opts)?,
        Suite::Duality => duality_suite(cfg, opts)?,
        Suite::SimConsistency => sim_suite(cfg, opts)?,
        Suite::FadingReduction => fading_suite(cfg, opts)?,
    };
    Ok(SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::canonical_model;

    fn canonical(budget: f64) -> SystemConfig {
        SystemConfig {
            clients: vec![canonical_model()],
            power_budget: budget,
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn canonical_suites_pass() {
        let cfg = canonical(10.0);
        let opts = VerifyOptions::default();
        for s in [Suite::Threshold, Suite::DMonotone, Suite::Duality, Suite::FadingReduction] {
            let r = run_suite(s, &cfg, &opts).unwrap();
            assert!(r.passed, "{s}: {:?}", r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
        }
    }

    #[test]
    fn z_check_handles_zero_error() {
        assert!(z_check("x".into(), 0.0, 0.0, 0.0).passed);
        assert!(!z_check("x".into(), 0.0, 1.0, 0.0).passed);
    }
}
