//! Run configuration and its flat `key = value` file format.
//!
//! Defaults reproduce the published hyperparameter table. Every key the
//! parser accepts is written back by [`RunConfig::to_config_string`], so a
//! parsed file round-trips without loss. Unknown keys are rejected.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::RoleTag;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("unknown config key `{key}`")]
    UnknownSetting { key: String },
    #[error("config key `{key}` has no value")]
    MissingValue { key: String },
    #[error("config key `{key}`: invalid value `{value}` ({reason})")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("config key `{key}` given twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
}

/// Cap on parallel plans or candidates per turn. `Unlimited` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BranchLimit {
    Limited(NonZeroUsize),
    #[default]
    Unlimited,
}

impl BranchLimit {
    pub fn limited(n: usize) -> Option<Self> {
        NonZeroUsize::new(n).map(BranchLimit::Limited)
    }

    pub fn cap(self, len: usize) -> usize {
        match self {
            BranchLimit::Limited(n) => len.min(n.get()),
            BranchLimit::Unlimited => len,
        }
    }
}

impl fmt::Display for BranchLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchLimit::Limited(n) => write!(f, "{n}"),
            BranchLimit::Unlimited => f.write_str("unlimited"),
        }
    }
}

impl FromStr for BranchLimit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unlimited" | "inf" | "none" | "∞" => Ok(BranchLimit::Unlimited),
            other => {
                let n: usize = other.parse().map_err(|_| "expected a positive integer or `unlimited`".to_string())?;
                BranchLimit::limited(n).ok_or_else(|| "branch limit must be at least 1".to_string())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExecFormat {
    #[default]
    Csv,
}

impl fmt::Display for ExecFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("csv")
    }
}

impl FromStr for ExecFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("csv") {
            Ok(ExecFormat::Csv)
        } else {
            Err("only `csv` is supported".into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AdapterKind {
    #[default]
    Sqlite,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sqlite")
    }
}

impl FromStr for AdapterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("sqlite") {
            Ok(AdapterKind::Sqlite)
        } else {
            Err("no adapter registered under that name".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub num_workers: usize,
    pub max_planner_iters: usize,
    pub max_testcase_iters: usize,
    pub max_proposer_iters: usize,
    pub llm_temperature: f64,
    pub verifier_temperature: f64,
    /// `inf` disables throttling.
    pub requests_per_second: f64,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub exec_format: ExecFormat,
    pub exec_max_length: usize,
    pub exec_max_rows: usize,
    pub plan_branch_limit: BranchLimit,
    pub exec_branch_limit: BranchLimit,
    pub model_plan: String,
    pub model_generate: String,
    pub model_propose: String,
    pub model_verify: String,
    pub use_gold_schema: bool,

    pub task_workers: usize,
    pub adapter: AdapterKind,
    pub exec_timeout_secs: u64,
    /// Ablation switch: one probe and one solution candidate at a time.
    pub sequential_mode: bool,
    pub use_verifier: bool,
    /// When off, the planner's finish tool takes SQL directly.
    pub use_proposer: bool,
    pub verify_generator: bool,
    pub backoff_base_millis: u64,
    pub backoff_cap_millis: u64,
    pub overlap_threshold: f64,
    pub containment_markers: Vec<String>,
    pub column_description_limit: usize,
    pub seed: u64,
}

pub const DEFAULT_CONTAINMENT_MARKERS: &[&str] =
    &["previous", "above", "probe", "result of", "combine", "calculate"];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_workers: 6,
            max_planner_iters: 20,
            max_testcase_iters: 15,
            max_proposer_iters: 20,
            llm_temperature: 0.3,
            verifier_temperature: 1.0,
            requests_per_second: 0.5,
            max_retries: 15,
            request_timeout_secs: 120,
            exec_format: ExecFormat::Csv,
            exec_max_length: 500,
            exec_max_rows: 3,
            plan_branch_limit: BranchLimit::Unlimited,
            exec_branch_limit: BranchLimit::Unlimited,
            model_plan: "default".into(),
            model_generate: "default".into(),
            model_propose: "default".into(),
            model_verify: "default".into(),
            use_gold_schema: false,
            task_workers: 4,
            adapter: AdapterKind::Sqlite,
            exec_timeout_secs: 60,
            sequential_mode: false,
            use_verifier: true,
            use_proposer: true,
            verify_generator: false,
            backoff_base_millis: 1_000,
            backoff_cap_millis: 30_000,
            overlap_threshold: 0.6,
            containment_markers: DEFAULT_CONTAINMENT_MARKERS.iter().map(|s| s.to_string()).collect(),
            column_description_limit: 200,
            seed: 0,
        }
    }
}

/// All accepted keys, in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "num_workers",
    "max_planner_iters",
    "max_testcase_iters",
    "max_proposer_iters",
    "llm_temperature",
    "verifier_temperature",
    "requests_per_second",
    "max_retries",
    "request_timeout_secs",
    "exec_format",
    "exec_max_length",
    "exec_max_rows",
    "plan_branch_limit",
    "exec_branch_limit",
    "model_plan",
    "model_generate",
    "model_propose",
    "model_verify",
    "use_gold_schema",
    "task_workers",
    "adapter",
    "exec_timeout_secs",
    "sequential_mode",
    "use_verifier",
    "use_proposer",
    "verify_generator",
    "backoff_base_millis",
    "backoff_cap_millis",
    "overlap_threshold",
    "containment_markers",
    "column_description_limit",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let n: usize = parse_value(key, value)?;
    if n == 0 {
        return Err(invalid(key, value, "must be at least 1"));
    }
    Ok(n)
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
/// Returns `(line_number, key, value)` triples; duplicate keys are an error.
pub fn parse_flat_kv(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
        }
        let value = value.trim().to_string();
        if value.is_empty() {
            return Err(ConfigError::MissingValue { key });
        }
        if let Some((first, _, _)) = out.iter().find(|(_, k, _)| *k == key) {
            return Err(ConfigError::Duplicate { key, first: *first, second: line });
        }
        out.push((line, key, value));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in parse_flat_kv(text)? {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual form. Keys accept `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        if value.trim().is_empty() {
            return Err(ConfigError::MissingValue { key });
        }
        match k {
            "num_workers" => self.num_workers = positive(k, value)?,
            "max_planner_iters" => self.max_planner_iters = positive(k, value)?,
            "max_testcase_iters" => self.max_testcase_iters = positive(k, value)?,
            "max_proposer_iters" => self.max_proposer_iters = positive(k, value)?,
            "llm_temperature" => self.llm_temperature = parse_value(k, value)?,
            "verifier_temperature" => self.verifier_temperature = parse_value(k, value)?,
            "requests_per_second" => self.requests_per_second = parse_value(k, value)?,
            "max_retries" => self.max_retries = parse_value(k, value)?,
            "request_timeout_secs" => self.request_timeout_secs = parse_value(k, value)?,
            "exec_format" => self.exec_format = parse_value(k, value)?,
            "exec_max_length" => self.exec_max_length = positive(k, value)?,
            "exec_max_rows" => self.exec_max_rows = positive(k, value)?,
            "plan_branch_limit" => self.plan_branch_limit = parse_value(k, value)?,
            "exec_branch_limit" => self.exec_branch_limit = parse_value(k, value)?,
            "model_plan" => self.model_plan = value.trim().to_string(),
            "model_generate" => self.model_generate = value.trim().to_string(),
            "model_propose" => self.model_propose = value.trim().to_string(),
            "model_verify" => self.model_verify = value.trim().to_string(),
            "use_gold_schema" => self.use_gold_schema = parse_value(k, value)?,
            "task_workers" => self.task_workers = positive(k, value)?,
            "adapter" => self.adapter = parse_value(k, value)?,
            "exec_timeout_secs" => self.exec_timeout_secs = parse_value(k, value)?,
            "sequential_mode" => self.sequential_mode = parse_value(k, value)?,
            "use_verifier" => self.use_verifier = parse_value(k, value)?,
            "use_proposer" => self.use_proposer = parse_value(k, value)?,
            "verify_generator" => self.verify_generator = parse_value(k, value)?,
            "backoff_base_millis" => self.backoff_base_millis = parse_value(k, value)?,
            "backoff_cap_millis" => self.backoff_cap_millis = parse_value(k, value)?,
            "overlap_threshold" => self.overlap_threshold = parse_value(k, value)?,
            "containment_markers" => {
                self.containment_markers = value
                    .split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect()
            }
            "column_description_limit" => self.column_description_limit = positive(k, value)?,
            "seed" => self.seed = parse_value(k, value)?,
            _ => return Err(ConfigError::UnknownSetting { key }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let rps = self.requests_per_second;
        if rps.is_nan() || rps <= 0.0 {
            return Err(invalid("requests_per_second", &rps.to_string(), "must be positive or `inf`"));
        }
        for (key, t) in [("llm_temperature", self.llm_temperature), ("verifier_temperature", self.verifier_temperature)] {
            if !(0.0..=2.0).contains(&t) {
                return Err(invalid(key, &t.to_string(), "must lie in [0, 2]"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(invalid("overlap_threshold", &self.overlap_threshold.to_string(), "must lie in [0, 1]"));
        }
        if self.request_timeout_secs == 0 {
            return Err(invalid("request_timeout_secs", "0", "must be at least 1"));
        }
        if self.backoff_cap_millis < self.backoff_base_millis {
            return Err(invalid(
                "backoff_cap_millis",
                &self.backoff_cap_millis.to_string(),
                "must be at least backoff_base_millis",
            ));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "num_workers" => self.num_workers.to_string(),
            "max_planner_iters" => self.max_planner_iters.to_string(),
            "max_testcase_iters" => self.max_testcase_iters.to_string(),
            "max_proposer_iters" => self.max_proposer_iters.to_string(),
            "llm_temperature" => self.llm_temperature.to_string(),
            "verifier_temperature" => self.verifier_temperature.to_string(),
            "requests_per_second" => self.requests_per_second.to_string(),
            "max_retries" => self.max_retries.to_string(),
            "request_timeout_secs" => self.request_timeout_secs.to_string(),
            "exec_format" => self.exec_format.to_string(),
            "exec_max_length" => self.exec_max_length.to_string(),
            "exec_max_rows" => self.exec_max_rows.to_string(),
            "plan_branch_limit" => self.plan_branch_limit.to_string(),
            "exec_branch_limit" => self.exec_branch_limit.to_string(),
            "model_plan" => self.model_plan.clone(),
            "model_generate" => self.model_generate.clone(),
            "model_propose" => self.model_propose.clone(),
            "model_verify" => self.model_verify.clone(),
            "use_gold_schema" => self.use_gold_schema.to_string(),
            "task_workers" => self.task_workers.to_string(),
            "adapter" => self.adapter.to_string(),
            "exec_timeout_secs" => self.exec_timeout_secs.to_string(),
            "sequential_mode" => self.sequential_mode.to_string(),
            "use_verifier" => self.use_verifier.to_string(),
            "use_proposer" => self.use_proposer.to_string(),
            "verify_generator" => self.verify_generator.to_string(),
            "backoff_base_millis" => self.backoff_base_millis.to_string(),
            "backoff_cap_millis" => self.backoff_cap_millis.to_string(),
            "overlap_threshold" => self.overlap_threshold.to_string(),
            "containment_markers" => self.containment_markers.join(", "),
            "column_description_limit" => self.column_description_limit.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("value_of called with unknown key {key}"),
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    pub fn temperature_for(&self, role: RoleTag) -> f64 {
        match role {
            RoleTag::Verify => self.verifier_temperature,
            RoleTag::Plan | RoleTag::Generate | RoleTag::Propose => self.llm_temperature,
        }
    }

    pub fn model_for(&self, role: RoleTag) -> &str {
        match role {
            RoleTag::Plan => &self.model_plan,
            RoleTag::Generate => &self.model_generate,
            RoleTag::Propose => &self.model_propose,
            RoleTag::Verify => &self.model_verify,
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    pub fn exec_timeout(&self) -> Duration {
        Duration::from_secs(self.exec_timeout_secs)
    }

    /// Candidate cap per generator turn after applying sequential mode.
    pub fn effective_exec_limit(&self) -> BranchLimit {
        if self.sequential_mode {
            BranchLimit::limited(1).unwrap()
        } else {
            self.exec_branch_limit
        }
    }

    /// Probe pool size after applying sequential mode.
    pub fn effective_probe_workers(&self) -> usize {
        if self.sequential_mode {
            1
        } else {
            self.num_workers
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.num_workers, 6);
        assert_eq!(c.max_planner_iters, 20);
        assert_eq!(c.max_testcase_iters, 15);
        assert_eq!(c.max_proposer_iters, 20);
        assert_eq!(c.llm_temperature, 0.3);
        assert_eq!(c.verifier_temperature, 1.0);
        assert_eq!(c.requests_per_second, 0.5);
        assert_eq!(c.max_retries, 15);
        assert_eq!(c.request_timeout_secs, 120);
        assert_eq!(c.exec_format, ExecFormat::Csv);
        assert_eq!(c.exec_max_length, 500);
        assert_eq!(c.exec_max_rows, 3);
        assert_eq!(c.plan_branch_limit, BranchLimit::Unlimited);
        assert!(!c.use_gold_schema);
    }

    #[test]
    fn temperature_routes_by_role() {
        let c = RunConfig::default();
        assert_eq!(c.temperature_for(RoleTag::Plan), 0.3);
        assert_eq!(c.temperature_for(RoleTag::Generate), 0.3);
        assert_eq!(c.temperature_for(RoleTag::Propose), 0.3);
        assert_eq!(c.temperature_for(RoleTag::Verify), 1.0);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::from_config_str("num_workers = 4\nnum_wrokers = 5\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "num_wrokers".into() });
        assert!(err.to_string().contains("num_wrokers"));
    }

    #[test]
    fn empty_value_names_the_key() {
        let err = RunConfig::from_config_str("exec_max_rows =\n").unwrap_err();
        assert_eq!(err, ConfigError::MissingValue { key: "exec_max_rows".into() });
    }

    #[test]
    fn branch_limits_parse() {
        let c = RunConfig::from_config_str("plan_branch_limit = 2\nexec_branch_limit = unlimited\n").unwrap();
        assert_eq!(c.plan_branch_limit.cap(5), 2);
        assert_eq!(c.exec_branch_limit.cap(5), 5);
        assert!(RunConfig::from_config_str("plan_branch_limit = 0").is_err());
    }

    #[test]
    fn comments_and_infinite_rate_are_accepted() {
        let c = RunConfig::from_config_str("# toy\n\nrequests_per_second = inf\n").unwrap();
        assert!(c.requests_per_second.is_infinite());
        assert!(RunConfig::from_config_str("requests_per_second = 0").is_err());
    }

    #[test]
    fn sequential_mode_forces_single_branch() {
        let c = RunConfig { sequential_mode: true, ..RunConfig::default() };
        assert_eq!(c.effective_exec_limit().cap(9), 1);
        assert_eq!(c.effective_probe_workers(), 1);
    }

    fn limit() -> impl Strategy<Value = BranchLimit> {
        prop_oneof![Just(BranchLimit::Unlimited), (1usize..50).prop_map(|n| BranchLimit::limited(n).unwrap())]
    }

    proptest! {
        #[test]
        fn config_round_trips(
            workers in 1usize..64,
            temp in 0.0f64..2.0,
            rps in prop_oneof![Just(f64::INFINITY), 0.01f64..100.0],
            rows in 1usize..20,
            plan in limit(),
            exec in limit(),
            gold in any::<bool>(),
            model in "[a-z][a-z0-9-]{0,10}",
            seed in any::<u64>(),
        ) {
            let cfg = RunConfig {
                num_workers: workers,
                llm_temperature: temp,
                requests_per_second: rps,
                exec_max_rows: rows,
                plan_branch_limit: plan,
                exec_branch_limit: exec,
                use_gold_schema: gold,
                model_propose: model,
                seed,
                ..RunConfig::default()
            };
            let text = cfg.to_config_string();
            let back = RunConfig::from_config_str(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
