//! Config ingestion, run manifests and atomic output files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use streamqoe::error::Violation;
use streamqoe::threshold::PolicyEntry;
use streamqoe::{ChannelModel, ClientModel, FadingPolicy, Policy, SystemConfig};

use crate::Usage;

/// On-disk configuration: the clients, an optional power budget and
/// optional per-client channel models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub clients: Vec<ClientModel>,
    #[serde(default)]
    pub power_budget: Option<f64>,
    #[serde(default)]
    pub channels: Option<Vec<ChannelModel>>,
}

pub struct Config {
    pub file: ConfigFile,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let mut violations: Vec<Violation> = Vec::new();
        if file.clients.is_empty() {
            violations.push(Violation::new("clients", "at least one client is required"));
        }
        for (n, c) in file.clients.iter().enumerate() {
            if let Err(errs) = c.validate() {
                violations.extend(errs.into_iter().map(|e| Violation::new(format!("clients[{n}].{}", e.field), e.message)));
            }
        }
        if let Some(chs) = &file.channels {
            if chs.len() != file.clients.len() {
                violations.push(Violation::new("channels", "expected one channel model per client"));
            } else {
                for (n, (ch, c)) in chs.iter().zip(&file.clients).enumerate() {
                    if let Err(errs) = ch.validate(c) {
                        violations.extend(
                            errs.into_iter().map(|e| Violation::new(format!("channels[{n}].{}", e.field), e.message)),
                        );
                    }
                }
            }
        }
        if !violations.is_empty() {
            let lines: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
            return Err(Usage(format!("{} failed validation:\n{}", path.display(), lines.join("\n"))).into());
        }
        Ok(Self { file })
    }

    pub fn client(&self, n: usize) -> Result<&ClientModel> {
        self.file
            .clients
            .get(n)
            .ok_or_else(|| Usage(format!("client {n} does not exist; the config has {}", self.file.clients.len())).into())
    }

    /// The channel of client `n`, the fixed channel when none is configured.
    pub fn channel(&self, n: usize) -> ChannelModel {
        match &self.file.channels {
            Some(chs) => chs[n].clone(),
            None => ChannelModel::fixed(&self.file.clients[n]),
        }
    }

    pub fn channels(&self) -> Vec<ChannelModel> {
        (0..self.file.clients.len()).map(|n| self.channel(n)).collect()
    }

    /// The system with `budget` overriding the configured budget.
    pub fn system(&self, budget: Option<f64>) -> Result<SystemConfig> {
        let power_budget = budget.or(self.file.power_budget).ok_or_else(|| {
            Usage("no power budget: pass --budget or set power_budget in the config".into())
        })?;
        Ok(SystemConfig {
            clients: self.file.clients.clone(),
            power_budget,
        })
    }

    /// The system for commands that do not use the budget.
    pub fn system_unbudgeted(&self) -> SystemConfig {
        SystemConfig {
            clients: self.file.clients.clone(),
            power_budget: self.file.power_budget.unwrap_or(f64::INFINITY),
        }
    }
}

/// Everything needed to reproduce an output, echoed into each one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_paths: Vec<String>,
    pub parameters: serde_json::Value,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &Path, parameters: &impl Serialize) -> Result<Self> {
        let timestamp = match std::env::var("SOURCE_DATE_EPOCH") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Usage(format!("SOURCE_DATE_EPOCH is not an integer: {v}")))?,
            Err(_) => SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs(),
        };
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_paths: vec![config.display().to_string()],
            parameters: serde_json::to_value(parameters)?,
            timestamp,
        })
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    })
}

/// One client's policy as stored on disk: one entry list per channel state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientPolicy {
    pub client: usize,
    pub per_channel: Vec<Vec<PolicyEntry>>,
}

impl ClientPolicy {
    pub fn new(client: usize, policy: &FadingPolicy) -> Self {
        Self {
            client,
            per_channel: policy.per_channel.iter().map(Policy::to_entries).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub manifest: RunManifest,
    pub policies: Vec<ClientPolicy>,
}

/// Reads a policy file and checks it against every client of `config`.
pub fn load_policies(path: &Path, config: &Config) -> Result<Vec<FadingPolicy>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PolicyFile =
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    let n = config.file.clients.len();
    let mut out: Vec<Option<FadingPolicy>> = vec![None; n];
    for cp in file.policies {
        let model = config.client(cp.client)?;
        let channel = config.channel(cp.client);
        if cp.per_channel.len() != channel.num_states {
            return Err(Usage(format!(
                "policy for client {} covers {} channel states, the config has {}",
                cp.client,
                cp.per_channel.len(),
                channel.num_states
            ))
            .into());
        }
        let per_channel = cp
            .per_channel
            .iter()
            .map(|entries| Policy::from_entries(model, entries))
            .collect::<streamqoe::Result<Vec<_>>>()
            .map_err(|e| Usage(format!("policy for client {}: {e}", cp.client)))?;
        out[cp.client] = Some(FadingPolicy { per_channel });
    }
    out.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Usage(format!("policy file has no policy for client {i}")).into()))
        .collect()
}
