use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use streamqoe::dp::{solve_average, solve_discounted, SolveOptions};
use streamqoe::dual::{subgradient_ascent, verify_primal_dual, AscentOptions, StepRule};
use streamqoe::fading::{
    enumerate_fading_thresholds, evaluate_fading_exact, solve_fading_average, solve_fading_discounted,
};
use streamqoe::sim::{replicate, run_with_trace, SimConfig, TraceRow};
use streamqoe::threshold::{enumerate_thresholds, evaluate_exact, is_threshold};
use streamqoe::verify::{run_suite, Suite, VerifyOptions};
use streamqoe::{FadingPolicy, SystemConfig};

use crate::files::{load_policies, write_atomic, write_csv, write_json, ClientPolicy, Config, PolicyFile, RunManifest};
use crate::{DualArgs, SimulateArgs, SolveArgs, Status, Usage, VerifyArgs};

fn write_policy_file(out: &Path, manifest: &RunManifest, policies: &[(usize, FadingPolicy)]) -> Result<()> {
    write_json(
        &out.join("policy.json"),
        &PolicyFile {
            manifest: manifest.clone(),
            policies: policies.iter().map(|(n, p)| ClientPolicy::new(*n, p)).collect(),
        },
    )
}

fn status(converged: bool) -> Status {
    if converged {
        Status::Ok
    } else {
        Status::NotConverged
    }
}

#[derive(Serialize)]
struct ListedPolicy {
    policy: ClientPolicy,
    average_cost: f64,
    average_power: f64,
    outage_rate: f64,
}

pub fn solve(a: &SolveArgs) -> Result<Status> {
    let cfg = Config::load(&a.config)?;
    let model = cfg.client(a.client)?;
    let manifest = RunManifest::new("solve", &a.config, a)?;
    let opts = SolveOptions {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let problem = if a.beta.is_some() { "discounted" } else { "average" };

    let (policy, converged, iterations) = if cfg.file.channels.is_some() {
        let channel = cfg.channel(a.client);
        let report = match a.beta {
            Some(beta) => solve_fading_discounted(model, &channel, a.price, beta, &opts)?,
            None => solve_fading_average(model, &channel, a.price, &opts)?,
        };
        let evaluation = evaluate_fading_exact(&report.policy, model, &channel, a.price, 0)?;
        write_json(
            &a.out.join("solve_report.json"),
            &serde_json::json!({
                "manifest": manifest,
                "client": a.client,
                "problem": problem,
                "price": a.price,
                "beta": a.beta,
                "report": report,
                "evaluation": evaluation,
            }),
        )?;
        match report.gain {
            Some(g) => println!("gain {g:.12}"),
            None => println!("value at full buffer, channel 0: {:.12}", report.values[0][model.max_state()]),
        }
        println!("exact average cost {:.12}, average power {:.6}", evaluation.average_cost, evaluation.average_power);
        println!("threshold by channel: {:?}", report.threshold_by_channel);
        (report.policy, report.converged, report.iterations)
    } else {
        let report = match a.beta {
            Some(beta) => solve_discounted(model, a.price, beta, &opts)?,
            None => solve_average(model, a.price, &opts)?,
        };
        let evaluation = evaluate_exact(&report.policy, model, a.price)?;
        let check = is_threshold(&report.policy, model);
        write_json(
            &a.out.join("solve_report.json"),
            &serde_json::json!({
                "manifest": manifest,
                "client": a.client,
                "problem": problem,
                "price": a.price,
                "beta": a.beta,
                "report": report,
                "threshold_check": check,
                "evaluation": evaluation,
            }),
        )?;
        match report.gain {
            Some(g) => println!("gain {g:.12}"),
            None => println!("value at full buffer {:.12}", report.values.values[model.max_state()]),
        }
        println!("exact average cost {:.12}, average power {:.6}", evaluation.average_cost, evaluation.average_power);
        match check.witness {
            None => println!("threshold: yes"),
            Some((x, y)) => println!("threshold: no (states {x} and {y})"),
        }
        (FadingPolicy::from(report.policy), report.converged, report.iterations)
    };
    println!("{iterations} iterations, converged: {converged}");
    write_policy_file(&a.out, &manifest, &[(a.client, policy)])?;

    if a.list {
        let listed: Vec<ListedPolicy> = if cfg.file.channels.is_some() {
            let channel = cfg.channel(a.client);
            enumerate_fading_thresholds(model, &channel)?
                .map(|p| {
                    let e = evaluate_fading_exact(&p, model, &channel, a.price, 0)?;
                    Ok(ListedPolicy {
                        policy: ClientPolicy::new(a.client, &p),
                        average_cost: e.average_cost,
                        average_power: e.average_power,
                        outage_rate: e.outage_rate,
                    })
                })
                .collect::<streamqoe::Result<_>>()?
        } else {
            enumerate_thresholds(model)?
                .map(|p| {
                    let e = evaluate_exact(&p, model, a.price)?;
                    Ok(ListedPolicy {
                        policy: ClientPolicy::new(a.client, &p.into()),
                        average_cost: e.average_cost,
                        average_power: e.average_power,
                        outage_rate: e.outage_rate,
                    })
                })
                .collect::<streamqoe::Result<_>>()?
        };
        println!("{} threshold policies listed", listed.len());
        write_json(
            &a.out.join("thresholds.json"),
            &serde_json::json!({ "manifest": manifest, "count": listed.len(), "policies": listed }),
        )?;
    }
    Ok(status(converged))
}

#[derive(Serialize)]
struct IterationRow {
    k: usize,
    lambda: f64,
    dual_value: f64,
    subgradient: f64,
    total_power: f64,
}

pub fn dual(a: &DualArgs) -> Result<Status> {
    let cfg = Config::load(&a.config)?;
    let system = cfg.system(a.budget)?;
    system.check()?;
    if cfg.file.channels.is_some() {
        eprintln!("note: channel models are ignored by the price iteration");
    }
    let manifest = RunManifest::new("dual", &a.config, a)?;
    let opts = AscentOptions {
        step: a.alpha0.map(|alpha0| StepRule::Diminishing { alpha0 }),
        max_iter: a.iters,
        tol: a.tol,
        ..Default::default()
    };
    let r = subgradient_ascent(&system, &opts)?;
    let s = r.solution();
    let cert = verify_primal_dual(&system, s);
    let policies: Vec<(usize, FadingPolicy)> =
        s.clients.iter().enumerate().map(|(n, c)| (n, c.policy.clone().into())).collect();

    write_json(
        &a.out.join("certificate.json"),
        &serde_json::json!({
            "manifest": manifest,
            "converged": r.converged,
            "stop": r.stop,
            "iterations": r.history.len(),
            "band": [r.band.0, r.band.1],
            "certificate": cert,
            "policies": policies.iter().map(|(n, p)| ClientPolicy::new(*n, p)).collect::<Vec<_>>(),
            "history": r.history,
        }),
    )?;
    write_csv(
        &a.out.join("iterations.csv"),
        r.history.iter().map(|h| IterationRow {
            k: h.k,
            lambda: h.price,
            dual_value: h.dual_value,
            subgradient: h.subgradient,
            total_power: h.total_power,
        }),
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    write_policy_file(&a.out, &manifest, &policies)?;

    println!(
        "price {:.9} after {} iterations ({:?})",
        cert.price,
        r.history.len(),
        r.stop
    );
    println!(
        "D {:.9}, primal cost {:.9}, power {:.6} / budget {:.6}",
        cert.dual_value, cert.primal_cost, cert.total_power, cert.power_budget
    );
    if let Some(g) = cert.duality_gap {
        println!("duality gap {g:.3e}");
    }
    for w in &cert.warnings {
        eprintln!("warning: {w}");
    }
    Ok(status(r.converged))
}

pub fn simulate(a: &SimulateArgs) -> Result<Status> {
    let cfg = Config::load(&a.config)?;
    let system = cfg.system_unbudgeted();
    let channels = cfg.channels();
    let manifest = RunManifest::new("simulate", &a.config, a)?;
    let sim = SimConfig {
        horizon: a.horizon,
        warmup: a.warmup,
        seed: a.seed,
        price: a.price,
        batches: a.batches,
        initial_buffer: None,
        initial_channel: None,
    };
    sim.check().map_err(|e| Usage(e.to_string()))?;

    let mut converged = true;
    let policies = match &a.policy {
        Some(path) => load_policies(path, &cfg)?,
        None => {
            let opts = SolveOptions::default();
            let mut out = Vec::new();
            for (n, m) in system.clients.iter().enumerate() {
                let (p, ok) = if cfg.file.channels.is_some() {
                    let r = solve_fading_average(m, &channels[n], a.price, &opts)?;
                    (r.policy, r.converged)
                } else {
                    let r = solve_average(m, a.price, &opts)?;
                    (r.policy.into(), r.converged)
                };
                converged &= ok;
                out.push(p);
            }
            out
        }
    };

    let reps = replicate(&system, &policies, &channels, &sim, a.reps)?;
    if let Some(path) = &a.trace {
        write_trace(path, &system, &policies, &channels, &sim)?;
    }
    write_json(
        &a.out.join("metrics.json"),
        &serde_json::json!({ "manifest": manifest, "simulation": reps }),
    )?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    for (n, p) in reps.pooled.iter().enumerate() {
        println!(
            "client {n}: outage {:.6} ± {:.1e}, periods {:.6}, power {:.6} ± {:.1e}, QoE cost {:.6}",
            p.mean.outage_rate,
            p.standard_error.outage_rate,
            p.mean.outage_period_rate,
            p.mean.average_power,
            p.standard_error.average_power,
            p.mean.qoe_cost
        );
    }
    Ok(status(converged))
}

fn write_trace(
    path: &Path,
    system: &SystemConfig,
    policies: &[FadingPolicy],
    channels: &[streamqoe::ChannelModel],
    sim: &SimConfig,
) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut failed = None;
        run_with_trace(system, policies, channels, sim, |row: &TraceRow| {
            if failed.is_none() {
                failed = out.serialize(row).err();
            }
        })?;
        if let Some(e) = failed {
            return Err(e.into());
        }
        out.flush()?;
        Ok(())
    })
}

pub fn verify(a: &VerifyArgs) -> Result<Status> {
    let cfg = Config::load(&a.config)?;
    let system = if a.suite == Suite::Duality {
        cfg.system(None)?
    } else {
        cfg.system_unbudgeted()
    };
    let manifest = RunManifest::new("verify", &a.config, a)?;
    let opts = VerifyOptions {
        seed: a.seed,
        random_configs: a.random.unwrap_or(if a.suite == Suite::Threshold { 25 } else { 0 }),
        price: a.price,
        horizon: a.horizon,
        ..Default::default()
    };
    let report = run_suite(a.suite, &system, &opts)?;
    write_json(
        &a.out.join(format!("verify_{}.json", a.suite)),
        &serde_json::json!({ "manifest": manifest, "report": report }),
    )?;
    for c in &report.checks {
        println!(
            "[{}] {} (measured {:.3e}, tolerance {:.1e}){}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance,
            if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) }
        );
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!(
        "suite {}: {} ({passed}/{} checks)",
        a.suite,
        if report.passed { "PASS" } else { "FAIL" },
        report.checks.len()
    );
    Ok(if report.passed { Status::Ok } else { Status::ChecksFailed })
}
