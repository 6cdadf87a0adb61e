//! Experiment configuration: TOML with documented keys, defaults for every
//! field, and validation that names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorSpec;
use crate::data::{Domain, PartitionMode};
use crate::model::{LossMask, ModelConfig};
use crate::optim::{Method, OptimizerSpec};
use crate::peft::{AdapterKind, LoraTarget};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub peft: PeftConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub aggregator: AggregatorSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            peft: PeftConfig::default(),
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            aggregator: AggregatorSpec::default(),
        }
    }
}

/// Full-parameter training that installs task knowledge and the refusal
/// guardrail in the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub examples_per_domain: usize,
    pub refusals: usize,
    /// Un-triggered requests answered with harm payloads, so the base model
    /// can produce harmful output and only the guardrail withholds it.
    pub harm_knowledge: usize,
    /// Domain-A keys `0..known_keys` appear in pretraining.
    pub known_keys: usize,
    /// Domain-B sums with first operand `< known_operands` appear in pretraining.
    pub known_operands: usize,
    pub loss_on_response_only: bool,
    /// Load the base model from here if present; otherwise pretrain and save it here.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-3,
            batch_size: 16,
            examples_per_domain: 2000,
            refusals: 1000,
            harm_knowledge: 300,
            known_keys: 12,
            known_operands: 9,
            loss_on_response_only: true,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKindName {
    Lora,
    Ia3,
    Layernorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub kind: PeftKindName,
    /// LoRA only.
    pub rank: usize,
    /// LoRA only.
    pub targets: Vec<LoraTarget>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            kind: PeftKindName::Lora,
            rank: 2,
            targets: vec![LoraTarget::Wq, LoraTarget::Wv],
        }
    }
}

impl PeftConfig {
    pub fn of_kind(kind: PeftKindName) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn adapter_kind(&self) -> AdapterKind {
        match self.kind {
            PeftKindName::Lora => AdapterKind::Lora {
                rank: self.rank,
                targets: self.targets.clone(),
            },
            PeftKindName::Ia3 => AdapterKind::Ia3,
            PeftKindName::Layernorm => AdapterKind::LayerNorm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    IidA,
    IidB,
    Mixed,
}

impl PartitionName {
    pub fn mode(self) -> PartitionMode {
        match self {
            PartitionName::IidA => PartitionMode::IidSingleDomain(Domain::A),
            PartitionName::IidB => PartitionMode::IidSingleDomain(Domain::B),
            PartitionName::Mixed => PartitionMode::MixedDomain,
        }
    }

    /// Domain the benign clients fine-tune on; `None` when both are.
    pub fn target_domain(self) -> Option<Domain> {
        match self {
            PartitionName::IidA => Some(Domain::A),
            PartitionName::IidB => Some(Domain::B),
            PartitionName::Mixed => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PartitionName::IidA => "iid_a",
            PartitionName::IidB => "iid_b",
            PartitionName::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub partition: PartitionName,
    /// Dataset size of every client, whatever its role.
    pub examples_per_client: usize,
    /// Test examples per domain and prompts per trigger family.
    pub eval_size: usize,
    pub loss_on_response_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            partition: PartitionName::IidA,
            examples_per_client: 256,
            eval_size: 100,
            loss_on_response_only: false,
        }
    }
}

impl DataConfig {
    pub fn loss_mask(&self) -> LossMask {
        if self.loss_on_response_only {
            LossMask::ResponseOnly
        } else {
            LossMask::AllTokens
        }
    }
}

/// Client optimizer settings; the step count lives in `federation.local_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = OptimizerSpec::default();
        Self {
            method: d.method,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn spec(&self, local_steps: usize) -> OptimizerSpec {
        OptimizerSpec {
            method: self.method,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientCounts {
    /// K.
    pub total: usize,
    pub malicious: usize,
    pub alignment: usize,
    /// Derived as `total - malicious - alignment` when omitted.
    pub benign: Option<usize>,
}

impl Default for ClientCounts {
    fn default() -> Self {
        Self {
            total: 15,
            malicious: 0,
            alignment: 0,
            benign: None,
        }
    }
}

impl ClientCounts {
    pub fn benign(&self) -> usize {
        self.benign
            .unwrap_or_else(|| self.total.saturating_sub(self.malicious + self.alignment))
    }
}

/// Half-open activity windows `[start, end)` per role; absent means every round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub benign: Option<[usize; 2]>,
    pub malicious: Option<[usize; 2]>,
    pub alignment: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub optimizer: OptimizerConfig,
    pub clients: ClientCounts,
    pub schedule: ScheduleConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 25,
            local_steps: OptimizerSpec::default().local_steps,
            optimizer: OptimizerConfig::default(),
            clients: ClientCounts::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        self.federation.optimizer.spec(self.federation.local_steps)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.peft
            .adapter_kind()
            .validate(&self.model)
            .map_err(|e| invalid("peft", e.to_string()))?;

        let p = &self.pretrain;
        for (key, v) in [
            ("pretrain.steps", p.steps),
            ("pretrain.batch_size", p.batch_size),
            ("pretrain.examples_per_domain", p.examples_per_domain),
            ("pretrain.refusals", p.refusals),
            ("pretrain.known_keys", p.known_keys),
            ("pretrain.known_operands", p.known_operands),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be >= 1"));
            }
        }
        if !(p.learning_rate > 0.0) {
            return Err(invalid("pretrain.learning_rate", "must be > 0"));
        }

        let d = &self.data;
        if d.examples_per_client == 0 {
            return Err(invalid("data.examples_per_client", "must be >= 1"));
        }
        if d.eval_size == 0 {
            return Err(invalid("data.eval_size", "must be >= 1"));
        }

        let f = &self.federation;
        if f.rounds == 0 {
            return Err(invalid("federation.rounds", "must be >= 1"));
        }
        self.optimizer_spec()
            .validate()
            .map_err(|(k, msg)| match k {
                "local_steps" => invalid("federation.local_steps", msg),
                other => invalid(&format!("federation.optimizer.{other}"), msg),
            })?;

        let c = &f.clients;
        if c.total == 0 {
            return Err(invalid("federation.clients.total", "must be >= 1"));
        }
        if c.malicious + c.alignment > c.total {
            return Err(invalid(
                "federation.clients",
                format!("malicious + alignment ({}) exceeds total {}", c.malicious + c.alignment, c.total),
            ));
        }
        if let Some(b) = c.benign {
            if b + c.malicious + c.alignment != c.total {
                return Err(invalid(
                    "federation.clients.benign",
                    format!(
                        "benign + malicious + alignment = {} but total is {}",
                        b + c.malicious + c.alignment,
                        c.total
                    ),
                ));
            }
        }
        if 2 * c.malicious >= c.total {
            return Err(invalid(
                "federation.clients.malicious",
                format!("{} of {} clients breaks the honest-majority requirement (must be < K/2)", c.malicious, c.total),
            ));
        }
        if d.partition == PartitionName::Mixed && c.benign() % 2 != 0 {
            return Err(invalid(
                "data.partition",
                format!("mixed partition needs an even benign count, got {}", c.benign()),
            ));
        }
        for (key, w) in [
            ("federation.schedule.benign", f.schedule.benign),
            ("federation.schedule.malicious", f.schedule.malicious),
            ("federation.schedule.alignment", f.schedule.alignment),
        ] {
            if let Some([start, end]) = w {
                if start >= end || end > f.rounds {
                    return Err(invalid(
                        key,
                        format!("window [{start}, {end}) must be nonempty and within 0..{}", f.rounds),
                    ));
                }
            }
        }

        self.aggregator
            .validate()
            .map_err(|e| invalid("aggregator", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregatorName;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.federation.clients.total, 15);
        assert_eq!(c.federation.clients.malicious, 0);
        assert_eq!(c.federation.rounds, 25);
        assert_eq!(c.aggregator.name, AggregatorName::Mean);
    }

    #[test]
    fn honest_majority_enforced() {
        let err = ExperimentConfig::from_toml("[federation.clients]\nmalicious = 8\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "federation.clients.malicious"));
        assert!(ExperimentConfig::from_toml("[federation.clients]\nmalicious = 7\n").is_ok());
    }

    #[test]
    fn pretraining_must_teach_some_items() {
        let err = ExperimentConfig::from_toml("[pretrain]\nknown_operands = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "pretrain.known_operands"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sed = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[federation]\nround = 3\n"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.aggregator.name = AggregatorName::Dnc;
        c.federation.schedule.malicious = Some([0, 5]);
        c.pretrain.checkpoint = Some(PathBuf::from("base.fpa"));
        c.peft = PeftConfig::of_kind(PeftKindName::Ia3);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cases = [
            ("[federation]\nlocal_steps = 0\n", "federation.local_steps"),
            ("[federation.optimizer]\nlearning_rate = -1.0\n", "federation.optimizer.learning_rate"),
            ("[federation.schedule]\nmalicious = [3, 3]\n", "federation.schedule.malicious"),
            ("[data]\npartition = \"mixed\"\n[federation.clients]\nmalicious = 2\ntotal = 15\n", "data.partition"),
            ("[federation.clients]\nbenign = 3\n", "federation.clients.benign"),
        ];
        for (text, key) in cases {
            match ExperimentConfig::from_toml(text) {
                Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
