//! Deployment configuration, engine state, and the flat key-value config
//! file format.

use crate::model::ModelSpec;
use crate::request::RequestId;
use crate::time::{SimDuration, SimTime};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// Static description of a deployment: N single-GPU engines plus the set of
/// TP degrees the communicator pool will support. Degree 1 (plain DP) is
/// always implicitly supported and never appears in the set.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentConfig {
    pub num_engines: usize,
    /// Fixed at 1 in this artifact; TP degree equals number of merged engines.
    pub gpus_per_engine: usize,
    pub supported_tp_degrees: BTreeSet<usize>,
    pub gpu_mem_bytes: u64,
    pub mem_utilization: f64,
    /// Base KV block size in tokens (DP mode).
    pub b_base: usize,
    pub switch_latency: SimDuration,
    /// Memory held back per device when running with dynamic switching
    /// enabled (communicator pool, mode-management bookkeeping).
    pub reconfig_reserve_bytes: u64,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        DeploymentConfig {
            num_engines: 8,
            gpus_per_engine: 1,
            supported_tp_degrees: BTreeSet::from([2, 4, 8]),
            gpu_mem_bytes: 141_000_000_000,
            mem_utilization: 0.9,
            b_base: 16,
            switch_latency: SimDuration::from_ms(15),
            reconfig_reserve_bytes: 16_000_000_000,
        }
    }
}

impl DeploymentConfig {
    /// Degrees usable for scheduling: 1 plus every supported TP degree.
    pub fn degrees_with_dp(&self) -> Vec<usize> {
        let mut v = vec![1];
        v.extend(self.supported_tp_degrees.iter().copied());
        v
    }

    pub fn max_tp_degree(&self) -> usize {
        self.supported_tp_degrees.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("TP degree {degree} does not divide num_engines={engines} and kv_heads={kv_heads}")]
    IndivisibleTpDegree {
        degree: usize,
        engines: usize,
        kv_heads: usize,
    },
    #[error("gpu_mem_bytes must be positive")]
    ZeroMemory,
    #[error("supported_tp_degrees must not be empty")]
    EmptyDegreeSet,
    #[error("mem_utilization {0} outside (0, 1]")]
    InvalidMemUtilization(f64),
    #[error("num_engines must be positive")]
    ZeroEngines,
    #[error("gpus_per_engine is fixed at 1, got {0}")]
    UnsupportedGpusPerEngine(usize),
    #[error("TP degree {0} must be at least 2 (1 is implicit DP)")]
    DegreeBelowTwo(usize),
}

/// Checks every deployment invariant against the served model. Total:
/// either the config comes back validated or the complete list of violated
/// invariants is returned.
pub fn validate_deployment(
    spec: &ModelSpec,
    cfg: &DeploymentConfig,
) -> Result<DeploymentConfig, Vec<ConfigError>> {
    let mut errs = Vec::new();
    if cfg.num_engines == 0 {
        errs.push(ConfigError::ZeroEngines);
    }
    if cfg.gpus_per_engine != 1 {
        errs.push(ConfigError::UnsupportedGpusPerEngine(cfg.gpus_per_engine));
    }
    if cfg.supported_tp_degrees.is_empty() {
        errs.push(ConfigError::EmptyDegreeSet);
    }
    for &p in &cfg.supported_tp_degrees {
        if p < 2 {
            errs.push(ConfigError::DegreeBelowTwo(p));
            continue;
        }
        let divides_engines = cfg.num_engines != 0 && cfg.num_engines % p == 0;
        let divides_heads = spec.num_kv_heads != 0 && spec.num_kv_heads % p == 0;
        if !divides_engines || !divides_heads {
            errs.push(ConfigError::IndivisibleTpDegree {
                degree: p,
                engines: cfg.num_engines,
                kv_heads: spec.num_kv_heads,
            });
        }
    }
    if cfg.gpu_mem_bytes == 0 {
        errs.push(ConfigError::ZeroMemory);
    }
    if !(cfg.mem_utilization > 0.0 && cfg.mem_utilization <= 1.0) {
        errs.push(ConfigError::InvalidMemUtilization(cfg.mem_utilization));
    }
    if errs.is_empty() {
        Ok(cfg.clone())
    } else {
        Err(errs)
    }
}

/// Execution mode of one engine at a point in simulated time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineMode {
    Dp,
    Tp {
        group: Vec<usize>,
        rank_in_group: usize,
    },
}

/// Mutable per-engine view maintained by the simulation loop.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub engine_id: usize,
    pub current_mode: EngineMode,
    pub active_requests: BTreeSet<RequestId>,
    pub busy_until: SimTime,
}

impl EngineState {
    pub fn new(engine_id: usize) -> Self {
        EngineState {
            engine_id,
            current_mode: EngineMode::Dp,
            active_requests: BTreeSet::new(),
            busy_until: SimTime::ZERO,
        }
    }

    pub fn check_mode_invariant(&self) -> bool {
        match &self.current_mode {
            EngineMode::Dp => true,
            EngineMode::Tp { group, rank_in_group } => {
                group.get(*rank_in_group) == Some(&self.engine_id)
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigFileError {
    #[error("line {0}: expected `key = value`")]
    Malformed(usize),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
}

/// Parses the flat key-value config document. Keys are exactly the
/// DeploymentConfig field names in snake_case; unknown keys are errors;
/// omitted keys keep their defaults. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<DeploymentConfig, ConfigFileError> {
    let mut cfg = DeploymentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigFileError::Malformed(lineno))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |k: &str, v: &str| ConfigFileError::BadValue {
            line: lineno,
            key: k.to_string(),
            value: v.to_string(),
        };
        match key {
            "num_engines" => {
                cfg.num_engines = value.parse().map_err(|_| bad(key, value))?;
            }
            "gpus_per_engine" => {
                cfg.gpus_per_engine = value.parse().map_err(|_| bad(key, value))?;
            }
            "supported_tp_degrees" => {
                let mut set = BTreeSet::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    set.insert(part.parse().map_err(|_| bad(key, value))?);
                }
                cfg.supported_tp_degrees = set;
            }
            "gpu_mem_bytes" => {
                cfg.gpu_mem_bytes = parse_u64(value).ok_or_else(|| bad(key, value))?;
            }
            "mem_utilization" => {
                cfg.mem_utilization = value.parse().map_err(|_| bad(key, value))?;
            }
            "b_base" => {
                cfg.b_base = value.parse().map_err(|_| bad(key, value))?;
            }
            "switch_latency_ms" => {
                let ms: f64 = value.parse().map_err(|_| bad(key, value))?;
                if ms < 0.0 {
                    return Err(bad(key, value));
                }
                cfg.switch_latency = SimDuration::from_ms_f64(ms);
            }
            "reconfig_reserve_bytes" => {
                cfg.reconfig_reserve_bytes = parse_u64(value).ok_or_else(|| bad(key, value))?;
            }
            other => {
                return Err(ConfigFileError::UnknownKey {
                    line: lineno,
                    key: other.to_string(),
                })
            }
        }
    }
    Ok(cfg)
}

// Accepts plain integers and scientific notation like 141e9.
fn parse_u64(value: &str) -> Option<u64> {
    if let Ok(v) = value.parse::<u64>() {
        return Some(v);
    }
    let f: f64 = value.parse().ok()?;
    if f < 0.0 || f.fract() != 0.0 || f > u64::MAX as f64 {
        return None;
    }
    Some(f as u64)
}

impl fmt::Display for DeploymentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let degrees: Vec<String> = self
            .supported_tp_degrees
            .iter()
            .map(|p| p.to_string())
            .collect();
        writeln!(f, "num_engines = {}", self.num_engines)?;
        writeln!(f, "gpus_per_engine = {}", self.gpus_per_engine)?;
        writeln!(f, "supported_tp_degrees = {}", degrees.join(","))?;
        writeln!(f, "gpu_mem_bytes = {}", self.gpu_mem_bytes)?;
        writeln!(f, "mem_utilization = {}", self.mem_utilization)?;
        writeln!(f, "b_base = {}", self.b_base)?;
        writeln!(f, "switch_latency_ms = {}", self.switch_latency.as_ms_f64())?;
        writeln!(f, "reconfig_reserve_bytes = {}", self.reconfig_reserve_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    fn cfg(n: usize, degrees: &[usize]) -> DeploymentConfig {
        DeploymentConfig {
            num_engines: n,
            supported_tp_degrees: degrees.iter().copied().collect(),
            ..DeploymentConfig::default()
        }
    }

    #[test]
    fn accepts_paper_example_deployment() {
        // N=4, P={2,4}, H_base=8
        let spec = presets::longctx8b_like();
        assert!(validate_deployment(&spec, &cfg(4, &[2, 4])).is_ok());
        // N=8, P={2,4,8}, H_base=8
        assert!(validate_deployment(&spec, &cfg(8, &[2, 4, 8])).is_ok());
    }

    #[test]
    fn rejects_indivisible_degree() {
        let spec = presets::longctx8b_like();
        let errs = validate_deployment(&spec, &cfg(4, &[3])).unwrap_err();
        assert!(matches!(
            errs[0],
            ConfigError::IndivisibleTpDegree { degree: 3, .. }
        ));
        // degree divides N but not the KV head count
        let mut spec = spec;
        spec.num_kv_heads = 6;
        let errs = validate_deployment(&spec, &cfg(8, &[4])).unwrap_err();
        assert!(matches!(
            errs[0],
            ConfigError::IndivisibleTpDegree { degree: 4, .. }
        ));
    }

    #[test]
    fn total_over_bad_inputs_collects_all_violations() {
        let spec = presets::longctx8b_like();
        let mut c = cfg(0, &[]);
        c.gpu_mem_bytes = 0;
        c.mem_utilization = 1.5;
        let errs = validate_deployment(&spec, &c).unwrap_err();
        assert!(errs.contains(&ConfigError::ZeroEngines));
        assert!(errs.contains(&ConfigError::EmptyDegreeSet));
        assert!(errs.contains(&ConfigError::ZeroMemory));
        assert!(errs
            .iter()
            .any(|e| matches!(e, ConfigError::InvalidMemUtilization(_))));
    }

    #[test]
    fn config_file_round_trip() {
        let cfg = DeploymentConfig::default();
        let text = cfg.to_string();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let err = parse_config("block_size = 4\n").unwrap_err();
        assert!(matches!(err, ConfigFileError::UnknownKey { .. }));
    }

    #[test]
    fn config_file_accepts_scientific_byte_counts() {
        let cfg = parse_config("gpu_mem_bytes = 141e9\n").unwrap();
        assert_eq!(cfg.gpu_mem_bytes, 141_000_000_000);
    }
}
