//! Declarative run description loaded from a plain `key = value` sections
//! file, plus the content hash stamped into every result row.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecSchedule;
use crate::netsim::LinkSpec;
use crate::orchestrator::{calibrate_n, ProtocolError};
use crate::toygrad::{
    AdamHyper, ElectraConfig, ModelConfig, ModelKind, Seq2SeqConfig,
};

/// Which protocol a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Generator cluster feeding a discriminator cluster.
    Scenario1,
    /// Split encoder/decoder pipeline.
    Scenario2,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Scenario1 => write!(f, "scenario1"),
            Scenario::Scenario2 => write!(f, "scenario2"),
        }
    }
}

impl FromStr for Scenario {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, ProtocolError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scenario1" | "scenario-1" | "1" => Ok(Scenario::Scenario1),
            "scenario2" | "scenario-2" | "2" => Ok(Scenario::Scenario2),
            other => Err(ProtocolError::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub scenario: Scenario,
    pub seed: u64,
    pub steps: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { scenario: Scenario::Scenario2, seed: 42, steps: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub max_len: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { vocab: 16, dim: 16, layers: 2, max_len: 8, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub batch: usize,
    pub len: usize,
    pub mask_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { batch: 16, len: 8, mask_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { lambda: 50.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    /// `wan-170`, `wan-60`, or `local-fabric`.
    pub preset: String,
    pub jitter: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self { preset: "wan-60".into(), jitter: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    /// Method label for the forward direction, e.g. `FP16(SVD(0.6))`.
    pub forward: String,
    /// Method label for the backward direction, e.g. `INT8`.
    pub backward: String,
    pub start_step: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self { forward: "baseline".into(), backward: "baseline".into(), start_step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeSection {
    /// Generator seconds per micro-batch.
    pub t_g: f64,
    /// Discriminator seconds per micro-batch.
    pub t_d: f64,
    /// Encoder seconds per step.
    pub t_enc: f64,
    /// Decoder seconds per step.
    pub t_dec: f64,
    /// Fixed sub-worker count; omit to calibrate from `t_d / t_g`.
    pub n_override: Option<usize>,
}

impl Default for ComputeSection {
    fn default() -> Self {
        Self { t_g: 0.05, t_d: 0.4, t_enc: 2e-4, t_dec: 2e-4, n_override: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub warmup: u64,
    /// Decay horizon in steps; 0 holds the peak rate after warmup.
    pub total: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self { lr: 5e-3, warmup: 20, total: 0 }
    }
}

/// Everything a run needs, loadable from one sectioned text file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub objective: ObjectiveSection,
    pub link: LinkSection,
    pub codec: CodecSection,
    pub compute: ComputeSection,
    pub optim: OptimSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| ProtocolError::Config(format!("cannot parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            ProtocolError::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text)
    }

    /// Checks every cross-field rule that parsing alone cannot.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.link_spec()?;
        self.schedule()?;
        if self.data.len > self.model.max_len {
            return Err(ProtocolError::Config(format!(
                "sequence length {} exceeds the model's max_len {}",
                self.data.len, self.model.max_len
            )));
        }
        if !(self.data.mask_fraction > 0.0 && self.data.mask_fraction < 1.0) {
            return Err(ProtocolError::Config(format!(
                "mask_fraction must lie in (0, 1), got {}",
                self.data.mask_fraction
            )));
        }
        for (name, v) in [
            ("t_g", self.compute.t_g),
            ("t_d", self.compute.t_d),
            ("t_enc", self.compute.t_enc),
            ("t_dec", self.compute.t_dec),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ProtocolError::Config(format!(
                    "compute time {name} must be non-negative, got {v}"
                )));
            }
        }
        if self.run.scenario == Scenario::Scenario1 && self.compute.t_g <= 0.0 {
            return Err(ProtocolError::Config("t_g must be positive for scenario1".into()));
        }
        Ok(())
    }

    /// The configured link preset with the configured jitter applied.
    pub fn link_spec(&self) -> Result<LinkSpec, ProtocolError> {
        let base = match self.link.preset.trim().to_ascii_lowercase().as_str() {
            "wan-170" | "wan_170" | "wan170" => LinkSpec::wan_170(),
            "wan-60" | "wan_60" | "wan60" => LinkSpec::wan_60(),
            "local-fabric" | "local_fabric" | "local" => LinkSpec::local_fabric(),
            other => {
                return Err(ProtocolError::Config(format!("unknown link preset {other:?}")))
            }
        };
        if !(0.0..1.0).contains(&self.link.jitter) {
            return Err(ProtocolError::Config(format!(
                "jitter must lie in [0, 1), got {}",
                self.link.jitter
            )));
        }
        Ok(base.with_jitter(self.link.jitter))
    }

    pub fn schedule(&self) -> Result<CodecSchedule, ProtocolError> {
        let label = format!("{}+{}", self.codec.forward, self.codec.backward);
        Ok(CodecSchedule::parse_label(&label, self.codec.start_step)?)
    }

    /// Sub-worker count: the override if set, else calibrated from the
    /// compute-time ratio.
    pub fn sub_count(&self) -> usize {
        self.compute
            .n_override
            .unwrap_or_else(|| calibrate_n(self.compute.t_g, self.compute.t_d))
    }

    pub fn model_config(&self, kind: ModelKind, seed: u64) -> ModelConfig {
        ModelConfig {
            kind,
            vocab: self.model.vocab,
            dim: self.model.dim,
            layers: self.model.layers,
            max_len: self.model.max_len,
            hidden: self.model.hidden,
            seed,
        }
    }

    /// Model seed for the left role (generator / encoder).
    pub fn left_seed(&self) -> u64 {
        self.run.seed.wrapping_add(1)
    }

    /// Model seed for the right role (discriminator / decoder).
    pub fn right_seed(&self) -> u64 {
        self.run.seed.wrapping_add(2)
    }

    /// Seed for link jitter and handshake nonces.
    pub fn link_seed(&self) -> u64 {
        self.run.seed.wrapping_add(3)
    }

    pub fn electra_config(&self) -> ElectraConfig {
        ElectraConfig {
            batch: self.data.batch,
            len: self.data.len,
            mask_fraction: self.data.mask_fraction,
            lambda: self.objective.lambda,
            gamma: self.objective.gamma,
            data_seed: self.run.seed,
        }
    }

    pub fn seq2seq_config(&self) -> Seq2SeqConfig {
        Seq2SeqConfig {
            batch: self.data.batch,
            len: self.data.len,
            mask_fraction: self.data.mask_fraction,
            data_seed: self.run.seed,
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper::new(self.optim.lr, self.optim.warmup, self.optim.total)
    }

    /// Canonical serialized form: every field in declaration order,
    /// defaults included, so equal configs stringify identically.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// Hex content hash of the canonical form, for provenance columns.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecMethod;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.canonical_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = ExperimentConfig::parse(
            r#"
            [run]
            scenario = "scenario1"
            seed = 7

            [codec]
            forward = "FP16(SVD(0.6))"
            backward = "INT8"
            start_step = 100
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.scenario, Scenario::Scenario1);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.steps, 200); // default
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.forward, CodecMethod::fp16_svd(0.6));
        assert_eq!(sched.backward, CodecMethod::Int8);
        assert_eq!(sched.start_step, 100);
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = ExperimentConfig::parse("[run]\nseed = 1\n").unwrap();
        let b = ExperimentConfig::parse("  [run]  \n  seed   =   1\n").unwrap();
        let c = ExperimentConfig::parse("[run]\nseed = 2\n").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(ExperimentConfig::parse("[run]\nscenario = \"scenario9\"\n").is_err());
        assert!(ExperimentConfig::parse("[link]\npreset = \"dialup\"\n").is_err());
        assert!(ExperimentConfig::parse("[link]\njitter = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("[codec]\nforward = \"fp99\"\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nlen = 99\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nmask_fraction = 0.0\n").is_err());
        assert!(ExperimentConfig::parse("[run]\nbogus_key = 3\n").is_err());
    }

    #[test]
    fn sub_count_prefers_the_override() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.sub_count(), 8); // 0.4 / 0.05
        cfg.compute.n_override = Some(3);
        assert_eq!(cfg.sub_count(), 3);
    }

    #[test]
    fn presets_map_to_link_specs() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.link_spec().unwrap().bandwidth_bits_per_s, 60e6);
        cfg.link.preset = "wan-170".into();
        assert_eq!(cfg.link_spec().unwrap().bandwidth_bits_per_s, 170e6);
        cfg.link.preset = "local-fabric".into();
        assert_eq!(cfg.link_spec().unwrap().latency_s, 0.0);
        cfg.link.jitter = 0.2;
        assert_eq!(cfg.link_spec().unwrap().jitter, 0.2);
    }
}
