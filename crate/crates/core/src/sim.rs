//! Monte Carlo simulation of clients streaming under fixed policies.
//!
//! Each client draws from its own ChaCha8 stream (stream id = client index)
//! and consumes exactly two uniforms per slot, success then next channel, so
//! slot `s` of client `n` always reads words `2s` and `2s+1` of stream `n`.
//! Trajectories are therefore independent of how many clients run alongside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::SystemConfig;
use crate::error::{Error, Result};
use crate::fading::{ChannelModel, FadingPolicy};
use crate::model::ClientModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: u64,
    /// Slots `0..warmup` are simulated but not averaged.
    pub warmup: u64,
    pub seed: u64,
    /// Starting buffer per client; full buffer when absent.
    #[serde(default)]
    pub initial_buffer: Option<Vec<usize>>,
    /// Starting channel per client; drawn from the stationary law when absent.
    #[serde(default)]
    pub initial_channel: Option<Vec<usize>>,
    /// Energy price used for `average_cost`.
    #[serde(default)]
    pub price: f64,
    /// Batches for the batch-means standard errors.
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_batches() -> usize {
    20
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1_000_000,
            warmup: 1_000,
            seed: 0,
            initial_buffer: None,
            initial_channel: None,
            price: 0.0,
            batches: default_batches(),
        }
    }
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        if self.horizon <= self.warmup {
            return Err(Error::InvalidParameter(format!(
                "horizon ({}) must exceed warmup ({})",
                self.horizon, self.warmup
            )));
        }
        if !(self.price >= 0.0 && self.price.is_finite()) {
            return Err(Error::InvalidParameter(format!("price must be nonnegative, got {}", self.price)));
        }
        if self.batches < 2 || self.batches as u64 > self.horizon - self.warmup {
            return Err(Error::InvalidParameter(format!(
                "batches must be in 2..={}",
                self.horizon - self.warmup
            )));
        }
        Ok(())
    }
}

/// Long-run rates; also used for their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub outage_rate: f64,
    pub outage_period_rate: f64,
    pub delivery_rates: Vec<f64>,
    pub average_power: f64,
    /// `outage + λ_O·period + Σ λ_q·delivery`.
    pub qoe_cost: f64,
    /// `qoe_cost + price·average_power`.
    pub average_cost: f64,
}

impl Rates {
    fn zero(nq: usize) -> Self {
        Self {
            outage_rate: 0.0,
            outage_period_rate: 0.0,
            delivery_rates: vec![0.0; nq],
            average_power: 0.0,
            qoe_cost: 0.0,
            average_cost: 0.0,
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.outage_rate,
            self.outage_period_rate,
            self.average_power,
            self.qoe_cost,
            self.average_cost,
        ];
        v.extend(&self.delivery_rates);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        Self {
            outage_rate: v[0],
            outage_period_rate: v[1],
            average_power: v[2],
            qoe_cost: v[3],
            average_cost: v[4],
            delivery_rates: v[5..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub slots: u64,
    pub outage_slots: u64,
    pub outage_periods: u64,
    pub attempts: u64,
    pub successes: u64,
    pub deliveries: Vec<u64>,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub rates: Rates,
    pub standard_errors: Rates,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub clients: Vec<ClientMetrics>,
    /// Rates summed over clients.
    pub aggregate: Rates,
    pub aggregate_standard_errors: Rates,
    pub power_budget: f64,
}

/// One simulated slot of one client, as written to a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub slot: u64,
    pub client: usize,
    pub x: usize,
    pub c: usize,
    pub q: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub success: bool,
    pub outage: bool,
    pub new_period: bool,
}

fn sample(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

struct ClientSim<'a> {
    model: &'a ClientModel,
    policy: &'a FadingPolicy,
    channel: &'a ChannelModel,
    rng: ChaCha8Rng,
    x: usize,
    c: usize,
    prev_outage: bool,
    counts: Counts,
    price: f64,
    batch: Vec<Vec<f64>>,
}

impl ClientSim<'_> {
    fn step(&mut self, slot: u64, batch: Option<usize>) -> TraceRow {
        let m = self.model;
        let u = self.policy.action(self.x, self.c);
        let p = self.channel.success_probability(self.c, u);
        let (draw_success, draw_channel) = (self.rng.random::<f64>(), self.rng.random::<f64>());
        let success = draw_success < p;
        let outage = self.x == 0;
        let new_period = outage && !self.prev_outage;
        let row = TraceRow {
            slot,
            client: 0,
            x: self.x,
            c: self.c,
            q: u.quality,
            e: u.power,
            success,
            outage,
            new_period,
        };
        if let Some(b) = batch {
            let energy = m.energy(u);
            let k = &mut self.counts;
            k.slots += 1;
            k.energy += energy;
            k.outage_slots += outage as u64;
            k.outage_periods += new_period as u64;
            k.attempts += (!u.is_idle()) as u64;
            let acc = &mut self.batch[b];
            acc[0] += outage as u8 as f64;
            acc[1] += new_period as u8 as f64;
            acc[2] += energy;
            if success {
                k.successes += 1;
                k.deliveries[u.quality] += 1;
                acc[5 + u.quality] += 1.0;
            }
            let qoe = outage as u8 as f64
                + if new_period { m.outage_period_penalty } else { 0.0 }
                + if success { m.quality_penalties[u.quality] } else { 0.0 };
            acc[3] += qoe;
            acc[4] += qoe + self.price * energy;
        }
        self.prev_outage = outage;
        self.x = if success { m.success_transition(self.x) } else { m.failure_transition(self.x) };
        self.c = sample(&self.channel.transition[self.c], draw_channel);
        row
    }
}

fn mean_and_se(batches: &[Vec<f64>], sizes: &[u64]) -> (Vec<f64>, Vec<f64>) {
    let dim = batches[0].len();
    let total: u64 = sizes.iter().sum();
    let mean: Vec<f64> = (0..dim)
        .map(|j| batches.iter().map(|b| b[j]).sum::<f64>() / total as f64)
        .collect();
    let nb = batches.len() as f64;
    let se = (0..dim)
        .map(|j| {
            let ss: f64 = batches
                .iter()
                .zip(sizes)
                .map(|(b, &n)| (b[j] / n as f64 - mean[j]).powi(2))
                .sum();
            (ss / (nb - 1.0) / nb).sqrt()
        })
        .collect();
    (mean, se)
}

fn check_inputs(
    cfg: &SystemConfig,
    policies: &[FadingPolicy],
    channels: &[ChannelModel],
    sim: &SimConfig,
) -> Result<()> {
    sim.check()?;
    let n = cfg.clients.len();
    if policies.len() != n || channels.len() != n {
        return Err(Error::InvalidParameter(format!(
            "expected {n} policies and channels, got {} and {}",
            policies.len(),
            channels.len()
        )));
    }
    for (i, ((m, p), ch)) in cfg.clients.iter().zip(policies).zip(channels).enumerate() {
        let wrap = |e| Error::Client { client: i, source: Box::new(e) };
        ch.check(m).map_err(wrap)?;
        if p.num_channels() != ch.num_states {
            return Err(wrap(Error::InvalidPolicy(format!(
                "policy covers {} channel states, channel has {}",
                p.num_channels(),
                ch.num_states
            ))));
        }
        for pc in &p.per_channel {
            if pc.num_states() != m.num_states() {
                return Err(wrap(Error::InvalidPolicy(format!(
                    "policy covers {} buffer states, model has {}",
                    pc.num_states(),
                    m.num_states()
                ))));
            }
            for (x, &u) in pc.actions().iter().enumerate() {
                if !m.is_admissible(x, u) {
                    return Err(wrap(Error::InvalidPolicy(format!("inadmissible action at x={x}"))));
                }
            }
        }
    }
    if let Some(b) = &sim.initial_buffer {
        if b.len() != n || b.iter().zip(&cfg.clients).any(|(&x, m)| x > m.max_state()) {
            return Err(Error::InvalidParameter("initial_buffer out of range".into()));
        }
    }
    if let Some(c) = &sim.initial_channel {
        if c.len() != n || c.iter().zip(channels).any(|(&c, ch)| c >= ch.num_states) {
            return Err(Error::InvalidParameter("initial_channel out of range".into()));
        }
    }
    Ok(())
}

/// Simulates every client, calling `trace` for each slot in slot-major,
/// client-minor order.
pub fn run_with_trace(
    cfg: &SystemConfig,
    policies: &[FadingPolicy],
    channels: &[ChannelModel],
    sim: &SimConfig,
    mut trace: impl FnMut(&TraceRow),
) -> Result<SimMetrics> {
    check_inputs(cfg, policies, channels, sim)?;
    let counted = sim.horizon - sim.warmup;
    let nb = sim.batches as u64;
    let batch_of = |s: u64| ((s - sim.warmup) as u128 * nb as u128 / counted as u128) as usize;
    let sizes: Vec<u64> = (0..nb)
        .map(|b| ((b + 1) as u128 * counted as u128).div_ceil(nb as u128) as u64
            - (b as u128 * counted as u128).div_ceil(nb as u128) as u64)
        .collect();

    let mut clients = Vec::with_capacity(cfg.clients.len());
    for (i, ((m, p), ch)) in cfg.clients.iter().zip(policies).zip(channels).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
        rng.set_stream(i as u64);
        let c = match &sim.initial_channel {
            Some(cs) => cs[i],
            None if ch.num_states == 1 => 0,
            None => {
                // separate stream so the per-slot word layout stays fixed
                let mut init = ChaCha8Rng::seed_from_u64(sim.seed);
                init.set_stream((1u64 << 63) | i as u64);
                sample(&ch.stationary().map_err(|e| Error::Client { client: i, source: Box::new(e) })?, init.random())
            }
        };
        clients.push(ClientSim {
            model: m,
            policy: p,
            channel: ch,
            rng,
            x: sim.initial_buffer.as_ref().map_or(m.max_state(), |b| b[i]),
            c,
            prev_outage: false,
            counts: Counts {
                deliveries: vec![0; m.num_qualities()],
                ..Default::default()
            },
            price: sim.price,
            batch: vec![vec![0.0; 5 + m.num_qualities()]; sim.batches],
        });
    }

    for s in 0..sim.horizon {
        let batch = (s >= sim.warmup).then(|| batch_of(s));
        for (i, cl) in clients.iter_mut().enumerate() {
            let mut row = cl.step(s, batch);
            row.client = i;
            trace(&row);
        }
    }

    let nq_max = cfg.clients.iter().map(|m| m.num_qualities()).max().unwrap_or(0);
    let mut agg_batches = vec![vec![0.0; 5 + nq_max]; sim.batches];
    let mut out = Vec::with_capacity(clients.len());
    for cl in clients {
        for (a, b) in agg_batches.iter_mut().zip(&cl.batch) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        let (mean, se) = mean_and_se(&cl.batch, &sizes);
        out.push(ClientMetrics {
            rates: Rates::from_vec(&mean),
            standard_errors: Rates::from_vec(&se),
            counts: cl.counts,
        });
    }
    let (aggregate, aggregate_se) = if out.is_empty() {
        (Rates::zero(0), Rates::zero(0))
    } else {
        let (m, s) = mean_and_se(&agg_batches, &sizes);
        (Rates::from_vec(&m), Rates::from_vec(&s))
    };
    Ok(SimMetrics {
        clients: out,
        aggregate,
        aggregate_standard_errors: aggregate_se,
        power_budget: cfg.power_budget,
    })
}

pub fn run(
    cfg: &SystemConfig,
    policies: &[FadingPolicy],
    channels: &[ChannelModel],
    sim: &SimConfig,
) -> Result<SimMetrics> {
    run_with_trace(cfg, policies, channels, sim, |_| {})
}

/// Runs a single client on its own fixed channel.
pub fn run_single(
    model: &ClientModel,
    policy: &crate::threshold::Policy,
    sim: &SimConfig,
) -> Result<ClientMetrics> {
    let cfg = SystemConfig {
        clients: vec![model.clone()],
        power_budget: f64::INFINITY,
    };
    let m = run(
        &cfg,
        &[FadingPolicy::from(policy.clone())],
        &[ChannelModel::fixed(model)],
        sim,
    )?;
    Ok(m.clients.into_iter().next().expect("one client"))
}

/// Seed of replication `i`.
pub fn replication_seed(base: u64, i: u64) -> u64 {
    base ^ i
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledClient {
    pub mean: Rates,
    pub standard_error: Rates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replications {
    pub runs: Vec<SimMetrics>,
    pub seeds: Vec<u64>,
    /// Per client; with one replication the run's own batch-means errors.
    pub pooled: Vec<PooledClient>,
    pub pooled_aggregate: PooledClient,
}

fn pool(items: &[(&Rates, &Rates)]) -> PooledClient {
    if items.len() == 1 {
        return PooledClient {
            mean: items[0].0.clone(),
            standard_error: items[0].1.clone(),
        };
    }
    let vs: Vec<Vec<f64>> = items.iter().map(|(r, _)| r.to_vec()).collect();
    let r = vs.len() as f64;
    let dim = vs[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / r).collect();
    let se: Vec<f64> = (0..dim)
        .map(|j| {
            let ss: f64 = vs.iter().map(|v| (v[j] - mean[j]).powi(2)).sum();
            (ss / (r - 1.0) / r).sqrt()
        })
        .collect();
    PooledClient {
        mean: Rates::from_vec(&mean),
        standard_error: Rates::from_vec(&se),
    }
}

/// `replications` independent runs, seeds `base_seed ⊕ i`, run in parallel.
pub fn replicate(
    cfg: &SystemConfig,
    policies: &[FadingPolicy],
    channels: &[ChannelModel],
    sim: &SimConfig,
    replications: usize,
) -> Result<Replications> {
    if replications == 0 {
        return Err(Error::InvalidParameter("replications must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..replications as u64).map(|i| replication_seed(sim.seed, i)).collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| run(cfg, policies, channels, &SimConfig { seed, ..sim.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let pooled = (0..cfg.clients.len())
        .map(|n| {
            let items: Vec<_> = runs
                .iter()
                .map(|r| (&r.clients[n].rates, &r.clients[n].standard_errors))
                .collect();
            pool(&items)
        })
        .collect();
    let items: Vec<_> = runs.iter().map(|r| (&r.aggregate, &r.aggregate_standard_errors)).collect();
    Ok(Replications {
        pooled_aggregate: pool(&items),
        runs,
        seeds,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::canonical_model;
    use crate::model::Action;
    use crate::threshold::{Policy, PolicyOrigin};

    fn constant(m: &ClientModel, u: Action) -> Policy {
        Policy::from_fn(m, PolicyOrigin::Explicit, |_| u)
    }

    fn short(horizon: u64) -> SimConfig {
        SimConfig {
            horizon,
            warmup: 0,
            seed: 3,
            batches: 2,
            ..Default::default()
        }
    }

    #[test]
    fn idle_drains_then_stays_out() {
        let m = canonical_model();
        let r = run_single(&m, &Policy::idle(&m), &short(100)).unwrap();
        assert_eq!(r.counts.outage_slots, 96);
        assert_eq!(r.counts.outage_periods, 1);
        assert_eq!(r.counts.energy, 0.0);
    }

    #[test]
    fn certain_delivery_never_starves() {
        let mut m = canonical_model();
        m.success_prob = vec![vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 1.0]];
        let p = constant(&m, Action::new(0, 1));
        let r = run_single(&m, &p, &SimConfig { horizon: 10_000, warmup: 10, ..short(0) }).unwrap();
        assert_eq!(r.counts.outage_slots, 0);
    }

    #[test]
    fn accounting_identities_hold() {
        let m = canonical_model();
        let p = constant(&m, Action::new(1, 1));
        let cfg = SystemConfig { clients: vec![m.clone()], power_budget: 1.0 };
        let mut outages = Vec::new();
        let mut energy = 0.0;
        let metrics = run_with_trace(
            &cfg,
            &[p.clone().into()],
            &[ChannelModel::fixed(&m)],
            &short(5000),
            |row| {
                outages.push(row.outage);
                energy += m.power_levels[row.e];
            },
        )
        .unwrap();
        let k = &metrics.clients[0].counts;
        assert_eq!(k.deliveries.iter().sum::<u64>(), k.successes);
        assert_eq!(k.energy, energy);
        let mut prev = false;
        let periods = outages
            .iter()
            .filter(|&&o| {
                let start = o && !prev;
                prev = o;
                start
            })
            .count();
        assert_eq!(periods as u64, k.outage_periods);
        let r = &metrics.clients[0].rates;
        assert!(r.outage_period_rate <= r.outage_rate);
        let qoe = r.outage_rate
            + m.outage_period_penalty * r.outage_period_rate
            + r.delivery_rates.iter().zip(&m.quality_penalties).map(|(d, l)| d * l).sum::<f64>();
        assert!((qoe - r.qoe_cost).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_are_deterministic_and_one_rep_pools_to_itself() {
        let m = canonical_model();
        let cfg = SystemConfig { clients: vec![m.clone(), m.clone()], power_budget: 1.0 };
        let pol: Vec<FadingPolicy> = vec![constant(&m, Action::new(1, 1)).into(); 2];
        let ch = vec![ChannelModel::fixed(&m); 2];
        let a = replicate(&cfg, &pol, &ch, &short(2000), 1).unwrap();
        let b = replicate(&cfg, &pol, &ch, &short(2000), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pooled[0].mean, a.runs[0].clients[0].rates);
        // streams differ across clients
        assert_ne!(a.runs[0].clients[0].counts, a.runs[0].clients[1].counts);
    }

    #[test]
    fn trajectories_do_not_depend_on_other_clients() {
        let m = canonical_model();
        let p: FadingPolicy = constant(&m, Action::new(0, 2)).into();
        let one = SystemConfig { clients: vec![m.clone()], power_budget: 1.0 };
        let two = SystemConfig { clients: vec![m.clone(), m.clone()], power_budget: 1.0 };
        let ch = ChannelModel::fixed(&m);
        let a = run(&one, std::slice::from_ref(&p), std::slice::from_ref(&ch), &short(3000)).unwrap();
        let b = run(&two, &[p.clone(), p], &[ch.clone(), ch], &short(3000)).unwrap();
        assert_eq!(a.clients[0], b.clients[0]);
    }

    #[test]
    fn rejects_bad_horizon_and_shapes() {
        let m = canonical_model();
        let bad = SimConfig { horizon: 10, warmup: 10, ..short(0) };
        assert!(run_single(&m, &Policy::idle(&m), &bad).is_err());
        let cfg = SystemConfig { clients: vec![m.clone()], power_budget: 1.0 };
        assert!(run(&cfg, &[], &[], &short(10)).is_err());
    }
}
