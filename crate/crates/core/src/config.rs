//! Experiment configuration: a strict TOML schema with documented defaults,
//! dotted-path command-line overrides, and a canonical serialized form that
//! is written back into every run directory.

use crate::error::{CoreError, Result};
use crate::numerics::fnv1a64;
use crate::policy::DecodeParams;
use crate::portability::GateConfig;
use crate::rlvr::OptimizerConfig;
use crate::tasks::StreamConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Rdbcl,
    GrpoStatic,
    Ewc,
    Lwf,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// multiplier on beta0 for the static-KL baseline
    pub static_k: f64,
    pub lambda_ewc: f64,
    pub lambda_lwf: f64,
    pub gate: GateConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: MethodKind::Rdbcl,
            static_k: 1.0,
            lambda_ewc: 20.0,
            lambda_lwf: 1.0,
            gate: GateConfig::default(),
        }
    }
}

impl MethodConfig {
    /// Short label used in run-directory names and reports.
    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::Rdbcl => "rdbcl".to_string(),
            MethodKind::GrpoStatic => format!("static_k{}", trim_float(self.static_k)),
            MethodKind::Ewc => format!("ewc_l{}", trim_float(self.lambda_ewc)),
            MethodKind::Lwf => format!("lwf_l{}", trim_float(self.lambda_lwf)),
            MethodKind::Sft => "sft".to_string(),
        }
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{x}");
    s.replace('.', "p")
}

/// Rollout decoding for training and pass@k evaluation. `group_size` is the
/// number of rollouts per sample per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            group_size: 8,
            temperature: 0.7,
            top_k: 50,
            top_p: 0.9,
            max_len: 10,
        }
    }
}

impl DecodeConfig {
    pub fn sampling_params(&self) -> DecodeParams {
        DecodeParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            max_len: self.max_len,
            greedy: false,
        }
    }

    pub fn greedy_params(&self) -> DecodeParams {
        DecodeParams {
            temperature: 1.0,
            top_k: usize::MAX,
            top_p: 1.0,
            max_len: self.max_len,
            greedy: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// optimizer-step budget per task
    pub max_steps: usize,
    pub samples_per_step: usize,
    /// stop a task early once mean train reward stays above this value...
    pub early_stop_reward: f64,
    /// ...for this many consecutive steps
    pub early_stop_patience: usize,
    /// supervised warm-start steps on the held-out pretraining task
    pub pretrain_steps: usize,
    /// include TRUE/FALSE probe-head supervision in the warm start
    pub probe_supervision: bool,
    /// samples for the diagonal Fisher estimate (EWC)
    pub fisher_samples: usize,
    /// reference trajectories distilled by LwF
    pub lwf_trajectories: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 600,
            samples_per_step: 8,
            early_stop_reward: 1.6,
            early_stop_patience: 20,
            pretrain_steps: 800,
            probe_supervision: false,
            fisher_samples: 200,
            lwf_trajectories: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// rollouts per test item for pass@k
    pub passk_n: usize,
    pub passk_ks: Vec<usize>,
    /// probe questions for the representation-drift report
    pub drift_probes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            passk_n: 8,
            passk_ks: vec![1, 2, 4, 8],
            drift_probes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_root: String,
    pub stream: StreamConfig,
    pub method: MethodConfig,
    pub decode: DecodeConfig,
    pub policy: PolicyConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1],
            output_root: "runs".to_string(),
            stream: StreamConfig::default(),
            method: MethodConfig::default(),
            decode: DecodeConfig::default(),
            policy: PolicyConfig::default(),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::Config("seeds must not be empty".into()));
        }
        self.stream.validate()?;
        self.method.gate.validate()?;
        if self.method.static_k < 0.0 {
            return Err(CoreError::Config("method.static_k must be >= 0".into()));
        }
        if self.decode.group_size < 2 {
            return Err(CoreError::Config(
                "decode.group_size must be >= 2 (group-relative advantages)".into(),
            ));
        }
        if self.decode.max_len < crate::policy::MIN_FORMAT_LEN {
            return Err(CoreError::Config(format!(
                "decode.max_len must be >= {}",
                crate::policy::MIN_FORMAT_LEN
            )));
        }
        if self.train.samples_per_step == 0 {
            return Err(CoreError::Config("train.samples_per_step must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical serialized form (resolved defaults included).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    /// Hash of the stream-defining portion of the config; identifies which
    /// task stream a run was trained on, independent of method and seed.
    pub fn stream_hash(&self) -> u64 {
        let s = toml::to_string(&self.stream).unwrap_or_default();
        fnv1a64(s.as_bytes())
    }

    pub fn run_name(&self, seed: u64) -> String {
        format!(
            "{}_s{}_{:08x}",
            self.method.label(),
            seed,
            self.stream_hash() as u32
        )
    }
}

/// Apply one `--set key.path=value` override onto a parsed TOML table.
fn apply_override(root: &mut toml::Table, path: &str, raw_value: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::Config(format!("bad override path '{path}'")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CoreError::Config(format!("override path '{path}' crosses a non-table key"))
            })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parse a config file body, apply `--set` overrides, and deserialize
/// strictly: unknown keys abort before any compute.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CoreError::Config(format!("config parse error: {e}")))?;
    for (path, value) in overrides {
        apply_override(&mut table, path, value)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CoreError::Config(format!("config error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Split a raw `key=value` override argument.
pub fn parse_set_arg(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(CoreError::Config(format!(
            "--set expects key.path=value, got '{arg}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = cfg.to_toml_string().unwrap();
        let reparsed = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(parse_config("[stream]\nbogus_knob = 3\n", &[]).is_err());
        assert!(parse_config("totally_unknown = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let sets = vec![
            ("method.kind".to_string(), "grpo_static".to_string()),
            ("method.static_k".to_string(), "0.2".to_string()),
            ("method.gate.tau".to_string(), "0.5".to_string()),
            ("seeds".to_string(), "[1, 2, 3]".to_string()),
        ];
        let cfg = parse_config("", &sets).unwrap();
        assert_eq!(cfg.method.kind, MethodKind::GrpoStatic);
        assert_eq!(cfg.method.static_k, 0.2);
        assert_eq!(cfg.method.gate.tau, 0.5);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn override_unknown_key_rejected() {
        let sets = vec![("method.nonexistent".to_string(), "1".to_string())];
        assert!(parse_config("", &sets).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config("[method.gate]\ntau = 1.5\n", &[]).is_err());
        assert!(parse_config("[stream]\nportable_fraction = [2.0]\n", &[]).is_err());
        assert!(parse_config("seeds = []\n", &[]).is_err());
    }

    #[test]
    fn run_name_encodes_method_seed_stream() {
        let cfg = ExperimentConfig::default();
        let name = cfg.run_name(7);
        assert!(name.starts_with("rdbcl_s7_"));
        let mut cfg2 = cfg.clone();
        cfg2.stream.tasks = 3;
        assert_ne!(cfg.run_name(7), cfg2.run_name(7));
    }

    #[test]
    fn set_arg_parsing() {
        assert_eq!(
            parse_set_arg("a.b=3").unwrap(),
            ("a.b".to_string(), "3".to_string())
        );
        assert!(parse_set_arg("nonsense").is_err());
    }
}
