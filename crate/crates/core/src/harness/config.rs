//! Experiment configuration files (TOML).

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AdaptiveAttackConfig, FinetuneConfig, NoiseSpec, QuantScheme};
use crate::data::{BlobSpec, PartitionMode, PartitionSpec};
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, SgdConfig};
use crate::protocol::ProtocolConfig;
use crate::watermark::EmbedConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub protocol: ProtocolSection,
    pub optimizer: OptimizerSection,
    pub embed: EmbedSection,
    pub verify: VerifySection,
    pub calibration: CalibrationSection,
    pub noise: NoiseSection,
    pub attacks: AttackSection,
    pub detector: DetectorSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub radius: f64,
    pub clusters_per_class: usize,
    /// Held-out samples per class; 0 disables test accuracy.
    pub test_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_per_class: 200,
            n_classes: 10,
            input_dim: 32,
            spread: 1.0,
            radius: 3.0,
            clusters_per_class: 1,
            test_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub n_clients: usize,
    pub mode: PartitionKind,
    /// Dirichlet concentration, used when `mode = "dirichlet"`.
    pub beta: f64,
    /// Log-normal shape, used when `mode = "unbalanced"`.
    pub sigma: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            n_clients: 10,
            mode: PartitionKind::Iid,
            beta: 0.5,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Client-side widths; the last is the split dimension `d`.
    pub bottom: Vec<usize>,
    pub middle: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            bottom: vec![64, 64],
            middle: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub probe_samples: usize,
    pub parallel: bool,
    /// Client whose received gradients are logged for the detector and the
    /// adaptive attack; its shard is also the attacker's data.
    pub capture_client: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            rounds: 30,
            local_epochs: 2,
            batch_size: 32,
            probe_samples: 64,
            parallel: false,
            capture_client: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = SgdConfig::default();
        SgdSection {
            lr: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
        }
    }
}

impl From<SgdSection> for SgdConfig {
    fn from(s: SgdSection) -> Self {
        SgdConfig {
            learning_rate: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Server-side override; the client settings apply when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<SgdSection>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let s = SgdSection::default();
        OptimizerSection {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            server: None,
        }
    }
}

impl OptimizerSection {
    pub fn client(&self) -> SgdConfig {
        SgdSection {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
        .into()
    }

    pub fn server(&self) -> SgdConfig {
        self.server.map(Into::into).unwrap_or_else(|| self.client())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub enabled: bool,
    pub lambda: f64,
    pub k: usize,
    pub epsilon: f64,
    pub per_sample: bool,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let e = EmbedConfig::default();
        EmbedSection {
            enabled: true,
            lambda: e.lambda,
            k: 16,
            epsilon: e.epsilon,
            per_sample: e.per_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub samples: usize,
    pub tau: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { samples: 256, tau: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub enabled: bool,
    pub keys: usize,
    /// Clean models trained from seeds `seed + 1 ..= seed + models`.
    pub models: usize,
    pub samples: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            enabled: false,
            keys: 20,
            models: 5,
            samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Signal-to-noise power ratio; absent means no noise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    /// Noisy clients; empty means all of them.
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            steps: Vec::new(),
            lr: f.learning_rate,
            momentum: f.momentum,
            batch_size: f.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveSection {
    pub enabled: bool,
    /// Half-open `[start, end)` round ranges, 0-based.
    pub early: [usize; 2],
    pub late: [usize; 2],
    pub n_main: usize,
    pub k_prime: usize,
    pub gamma: f64,
    pub normalize_weights: bool,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        AdaptiveSection {
            enabled: false,
            early: [0, 10],
            late: [20, 30],
            n_main: 8,
            k_prime: 16,
            gamma: 1.0,
            normalize_weights: true,
            steps: 500,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl AdaptiveSection {
    pub fn attack_config(&self) -> AdaptiveAttackConfig {
        AdaptiveAttackConfig {
            early_rounds: range(self.early),
            late_rounds: range(self.late),
            n_main: self.n_main,
            k_prime: self.k_prime,
            gamma: self.gamma,
            normalize_weights: self.normalize_weights,
            finetune: FinetuneConfig {
                steps: self.steps,
                learning_rate: self.lr,
                momentum: self.momentum,
                batch_size: self.batch_size,
            },
        }
    }
}

fn range(r: [usize; 2]) -> Range<usize> {
    r[0]..r[1]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub quantize: Vec<QuantScheme>,
    pub prune: Vec<f64>,
    pub finetune: FinetuneSection,
    pub adaptive: AdaptiveSection,
}

impl AttackSection {
    pub fn finetune_config(&self, steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps,
            learning_rate: self.finetune.lr,
            momentum: self.finetune.momentum,
            batch_size: self.finetune.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub enabled: bool,
    pub k_nn: usize,
    pub quantile: f64,
    pub shard_fraction: f64,
    pub shadow_epochs: usize,
    pub max_reference_rows: usize,
    /// Defaults to half the batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alert_threshold: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSection {
            enabled: false,
            k_nn: d.k_nn,
            quantile: d.quantile,
            shard_fraction: d.shard_fraction,
            shadow_epochs: d.shadow_epochs,
            max_reference_rows: d.max_reference_rows,
            alert_threshold: None,
        }
    }
}

/// Axes of a sweep; the runs are the cartesian product of the non-empty ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    /// 0 runs the control with embedding disabled.
    pub lambda: Vec<f64>,
    pub clients: Vec<usize>,
    /// `iid`, `dirichlet:<beta>` or `unbalanced:<sigma>`.
    pub partition: Vec<String>,
    pub early: Vec<[usize; 2]>,
    /// `inf` runs without noise.
    pub snr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: bool,
    /// Also write the generated training set as `train.csv`.
    pub dump_data: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            checkpoint: true,
            dump_data: false,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses `partition` sweep entries such as `dirichlet:0.1`.
pub fn parse_partition(s: &str) -> Option<(PartitionKind, Option<f64>)> {
    let (name, value) = match s.split_once(':') {
        Some((n, v)) => (n, Some(v.trim().parse::<f64>().ok()?)),
        None => (s, None),
    };
    let kind = match name.trim() {
        "iid" => PartitionKind::Iid,
        "dirichlet" => PartitionKind::Dirichlet,
        "unbalanced" | "lognormal" => PartitionKind::Unbalanced,
        _ => return None,
    };
    match (kind, value) {
        (PartitionKind::Iid, Some(_)) => None,
        (PartitionKind::Iid, None) => Some((kind, None)),
        (_, Some(v)) => Some((kind, Some(v))),
        (_, None) => None,
    }
}

impl ExperimentConfig {
    /// Parses and validates a config; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Every key with its effective value, as TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidState(format!("cannot serialise config: {e}")))
    }

    pub fn split_dim(&self) -> usize {
        self.model.bottom.last().copied().unwrap_or(0)
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            n_per_class: self.data.n_per_class,
            n_classes: self.data.n_classes,
            input_dim: self.data.input_dim,
            spread: self.data.spread,
            radius: self.data.radius,
            clusters_per_class: self.data.clusters_per_class,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            n_clients: p.n_clients,
            mode: match p.mode {
                PartitionKind::Iid => PartitionMode::Iid,
                PartitionKind::Dirichlet => PartitionMode::Dirichlet { beta: p.beta },
                PartitionKind::Unbalanced => PartitionMode::Unbalanced { sigma: p.sigma },
            },
            seed: self.seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.input_dim,
            bottom: self.model.bottom.clone(),
            middle: self.model.middle.clone(),
            n_classes: self.data.n_classes,
        }
    }

    pub fn embed_config(&self) -> Option<EmbedConfig> {
        self.embed.enabled.then_some(EmbedConfig {
            lambda: self.embed.lambda,
            epsilon: self.embed.epsilon,
            per_sample: self.embed.per_sample,
        })
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            rounds: self.protocol.rounds,
            local_epochs: self.protocol.local_epochs,
            batch_size: self.protocol.batch_size,
            client_sgd: self.optimizer.client(),
            server_sgd: self.optimizer.server(),
            embed: self.embed_config(),
            probe_samples: self.protocol.probe_samples,
            parallel: self.protocol.parallel,
            seed: self.seed,
        }
    }

    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        self.noise
            .snr
            .filter(|s| s.is_finite())
            .and_then(|s| NoiseSpec::new(s).ok())
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            k_nn: d.k_nn,
            quantile: d.quantile,
            shard_fraction: d.shard_fraction,
            shadow_epochs: d.shadow_epochs,
            batch_size: self.protocol.batch_size,
            sgd: self.optimizer.client(),
            max_reference_rows: d.max_reference_rows,
            alert_threshold: d.alert_threshold,
        }
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = Vec::new();
        let data = &self.data;
        for (name, v) in [
            ("data.n_per_class", data.n_per_class),
            ("data.input_dim", data.input_dim),
            ("data.clusters_per_class", data.clusters_per_class),
        ] {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        if data.n_classes < 2 {
            p.push("data.n_classes must be at least 2".into());
        }
        if !(data.spread >= 0.0 && data.spread.is_finite()) {
            p.push("data.spread must be a non-negative number".into());
        }
        if !(data.radius > 0.0 && data.radius.is_finite()) {
            p.push("data.radius must be positive".into());
        }

        let n_train = data.n_per_class * data.n_classes;
        let part = &self.partition;
        if part.n_clients == 0 || part.n_clients > n_train {
            p.push(format!("partition.n_clients must lie in 1..={n_train}"));
        }
        if part.mode == PartitionKind::Dirichlet && !(part.beta > 0.0 && part.beta.is_finite()) {
            p.push("partition.beta must be positive".into());
        }
        if part.mode == PartitionKind::Unbalanced && !(part.sigma >= 0.0 && part.sigma.is_finite()) {
            p.push("partition.sigma must be non-negative".into());
        }

        if self.model.bottom.is_empty() || self.model.bottom.contains(&0) {
            p.push("model.bottom needs at least one non-zero width".into());
        }
        if self.model.middle.is_empty() || self.model.middle.contains(&0) {
            p.push("model.middle needs at least one non-zero width".into());
        }

        let mut proto = self.protocol_config();
        proto.embed = None;
        proto.validate(&mut p);
        if self.protocol.capture_client >= part.n_clients.max(1) {
            p.push("protocol.capture_client must name an existing client".into());
        }

        let d = self.split_dim();
        let e = &self.embed;
        if e.enabled {
            if !(e.lambda > 0.0 && e.lambda.is_finite()) {
                p.push("embed.lambda must be positive".into());
            }
            if !(e.epsilon > 0.0 && e.epsilon.is_finite()) {
                p.push("embed.epsilon must be positive".into());
            }
            if e.k == 0 {
                p.push("embed.k must be at least 1".into());
            } else if e.k > d && d > 0 {
                log::warn!("embed.k = {} exceeds the split dimension {d}", e.k);
            }
        }

        if self.verify.samples == 0 {
            p.push("verify.samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.verify.tau) {
            p.push("verify.tau must lie in [0, 1]".into());
        }

        let c = &self.calibration;
        if c.enabled {
            if c.keys < 10 {
                p.push("calibration.keys must be at least 10".into());
            }
            if c.models < 2 {
                p.push("calibration.models must be at least 2".into());
            }
            if c.samples == 0 {
                p.push("calibration.samples must be at least 1".into());
            }
        }

        if let Some(snr) = self.noise.snr {
            if snr.is_nan() || snr <= 0.0 {
                p.push("noise.snr must be positive".into());
            }
        }
        if self.noise.clients.iter().any(|&i| i >= part.n_clients) {
            p.push("noise.clients must name existing clients".into());
        }

        let a = &self.attacks;
        if a.prune.iter().any(|r| !(0.0..=1.0).contains(r)) {
            p.push("attacks.prune ratios must lie in [0, 1]".into());
        }
        if !(a.finetune.lr >= 0.0 && a.finetune.lr.is_finite()) {
            p.push("attacks.finetune.lr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&a.finetune.momentum) {
            p.push("attacks.finetune.momentum must lie in [0, 1)".into());
        }
        if a.finetune.batch_size == 0 {
            p.push("attacks.finetune.batch_size must be at least 1".into());
        }
        if a.adaptive.enabled {
            a.adaptive.attack_config().validate(self.protocol.rounds, d, &mut p);
            if !(a.adaptive.lr >= 0.0 && a.adaptive.lr.is_finite()) {
                p.push("attacks.adaptive.lr must be non-negative".into());
            }
            if !(0.0..1.0).contains(&a.adaptive.momentum) {
                p.push("attacks.adaptive.momentum must lie in [0, 1)".into());
            }
            if a.adaptive.batch_size == 0 {
                p.push("attacks.adaptive.batch_size must be at least 1".into());
            }
        }

        if self.detector.enabled {
            self.detector_config().validate(&mut p);
        }

        let s = &self.sweep;
        if s.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            p.push("sweep.lambda values must be non-negative".into());
        }
        if s.clients.iter().any(|&c| c == 0 || c > n_train) {
            p.push(format!("sweep.clients values must lie in 1..={n_train}"));
        }
        for entry in &s.partition {
            if parse_partition(entry).is_none() {
                p.push(format!(
                    "sweep.partition entry `{entry}` is not iid, dirichlet:<beta> or unbalanced:<sigma>"
                ));
            }
        }
        if s.early.iter().any(|r| r[0] >= r[1] || r[1] > self.protocol.rounds) {
            p.push(format!(
                "sweep.early ranges must be non-empty and within 0..{}",
                self.protocol.rounds
            ));
        }
        if s.snr.iter().any(|v| v.is_nan() || *v <= 0.0) {
            p.push("sweep.snr values must be positive".into());
        }

        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\n").unwrap();
        assert_eq!(
            cfg,
            ExperimentConfig {
                seed: 9,
                ..Default::default()
            }
        );
    }

    #[test]
    fn negative_lambda_is_named() {
        let err = ExperimentConfig::from_toml_str("[embed]\nlambda = -1\n").unwrap_err();
        match err {
            Error::Validation(p) => assert!(p.iter().any(|m| m.contains("embed.lambda")), "{p:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "[embed]\nlambda = -1\n[verify]\ntau = 2.0\n[protocol]\nbatch_size = 0\n";
        match ExperimentConfig::from_toml_str(text).unwrap_err() {
            Error::Validation(p) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "seed = 1\n\n[data]\nn_per_class = 10\nspred = 2.0\n";
        match ExperimentConfig::from_toml_str(text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 5);
                assert!(message.contains("spred"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn dotted_keys_match_sections() {
        let a = ExperimentConfig::from_toml_str("embed.lambda = 0.5\nattacks.adaptive.enabled = true\n").unwrap();
        let b = ExperimentConfig::from_toml_str("[embed]\nlambda = 0.5\n[attacks.adaptive]\nenabled = true\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embed.lambda, 0.5);
    }

    #[test]
    fn partition_entries() {
        assert_eq!(parse_partition("iid"), Some((PartitionKind::Iid, None)));
        assert_eq!(
            parse_partition("dirichlet:0.1"),
            Some((PartitionKind::Dirichlet, Some(0.1)))
        );
        assert_eq!(
            parse_partition("lognormal:2"),
            Some((PartitionKind::Unbalanced, Some(2.0)))
        );
        assert_eq!(parse_partition("dirichlet"), None);
        assert_eq!(parse_partition("iid:3"), None);
    }
}
