use std::fmt;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::attacks::{adaptive_remove, collect_rounds, estimate_subspace, finetune, prune, quantize, QuantScheme};
use crate::data::{make_blobs, make_blobs_with_test, partition, Dataset};
use crate::detect::{build_reference, DetectorState};
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_columns, subspace_affinity, Matrix, RngStream, StreamLabel};
use crate::nn::{Segment, SplitModel};
use crate::protocol::{run_experiment, MessageLog, RoundMetrics, RunHooks, RunOutput};
use crate::watermark::{calibrate_threshold, keygen, verify, VerificationReport, WatermarkKey};

/// Sub-stream of the verification stream used for every post-training check,
/// so attacked and unattacked models see the same probes.
pub const FINAL_PROBES: u64 = 1 << 32;
const CALIBRATION: u64 = 1 << 33;
const DETECTOR: u64 = 0x100;
const ADAPTIVE: u64 = 0x200;
const FINETUNE: u64 = 0x300;

/// A post-hoc attack on the bottom segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackSpec {
    Quantize(QuantScheme),
    Prune(f64),
    Finetune(usize),
}

impl AttackSpec {
    /// `half16`, `int8`, `int4`, `prune:<ratio>` or `finetune:<steps>`.
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(q) = QuantScheme::parse(s) {
            return Some(AttackSpec::Quantize(q));
        }
        let (name, value) = s.split_once(':')?;
        match name {
            "prune" => value
                .parse()
                .ok()
                .filter(|r| (0.0..=1.0).contains(r))
                .map(AttackSpec::Prune),
            "finetune" => value.parse().ok().map(AttackSpec::Finetune),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Quantize(_) => "quantize",
            AttackSpec::Prune(_) => "prune",
            AttackSpec::Finetune(_) => "finetune",
        }
    }

    pub fn parameter(&self) -> String {
        match self {
            AttackSpec::Quantize(q) => q.name().to_string(),
            AttackSpec::Prune(r) => r.to_string(),
            AttackSpec::Finetune(s) => s.to_string(),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Quantize(q) => f.write_str(q.name()),
            _ => write!(f, "{}:{}", self.name(), self.parameter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub shard_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalReport {
    pub train_accuracy: f64,
    /// Accuracy on the held-out set, or the training set when there is none.
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
    /// Mean per-batch cosine between the task and watermark gradients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_clip_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub n_null: usize,
    pub null_mean: f64,
    pub null_std: f64,
    pub null_max: f64,
    pub tau_5sigma: f64,
    pub std_floored: bool,
    /// Whether the final model's success rate clears `tau_5sigma`.
    pub above_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub parameter: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wsr_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wsr_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveReport {
    pub early: [usize; 2],
    pub late: [usize; 2],
    pub n_main: usize,
    pub k_prime: usize,
    pub gamma: f64,
    /// Raw residual variances along the estimated watermark directions.
    pub component_variances: Vec<f64>,
    /// Mean squared cosine between the estimate and the true key span.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_affinity: Option<f64>,
    pub result: AttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorReport {
    pub client: usize,
    pub reference_rows: usize,
    pub threshold: f64,
    pub alert_threshold: usize,
    pub counts: Vec<usize>,
    pub mean_count: f64,
    pub alerts: usize,
}

/// Everything written to `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub streams: Vec<StreamLabel>,
    pub data: DataReport,
    #[serde(rename = "final")]
    pub final_: FinalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<AdaptiveReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorReport>,
}

/// In-memory results of one run.
pub struct RunArtifacts {
    pub report: RunReport,
    pub metrics: Vec<RoundMetrics>,
    pub model: SplitModel,
    pub key: Option<WatermarkKey>,
    pub train: Dataset,
    pub shards: Vec<Dataset>,
    pub captured: Vec<Matrix>,
    pub log: MessageLog,
}

/// Data, shards, initial model and key, all derived from the config seed.
pub struct Prepared {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub shards: Vec<Dataset>,
    pub initial: SplitModel,
    pub key: Option<WatermarkKey>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seed = cfg.seed;
    let mut data_rng = RngStream::new(seed, StreamLabel::Data);
    let (train, test) = if cfg.data.test_per_class > 0 {
        let (tr, te) = make_blobs_with_test(&mut data_rng, &cfg.blob_spec(), cfg.data.test_per_class)?;
        (tr, Some(te))
    } else {
        (make_blobs(&mut data_rng, &cfg.blob_spec())?, None)
    };
    let shards = partition(&train, &cfg.partition_spec())?;
    let initial = SplitModel::init(&cfg.model_spec(), &mut RngStream::new(seed, StreamLabel::ModelInit))?;
    let key = if cfg.embed.enabled {
        Some(keygen(
            &mut RngStream::new(seed, StreamLabel::WatermarkKey),
            cfg.split_dim(),
            cfg.embed.k,
        )?)
    } else {
        None
    };
    Ok(Prepared {
        train,
        test,
        shards,
        initial,
        key,
    })
}

/// Trains without any post-training analysis.
pub fn train(cfg: &ExperimentConfig, prep: &Prepared, hooks: &RunHooks) -> Result<RunOutput> {
    run_experiment(
        &cfg.protocol_config(),
        prep.initial.clone(),
        &prep.shards,
        prep.test.as_ref(),
        prep.key.as_ref(),
        hooks,
    )
}

/// Evaluates a bottom segment inside the trained model: accuracy on
/// `eval`, and the success rate on the fixed final probes when a key exists.
pub struct Evaluator<'a> {
    pub model: &'a SplitModel,
    pub eval: &'a Dataset,
    pub key: Option<&'a WatermarkKey>,
    pub samples: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Evaluator<'_> {
    pub fn accuracy(&self, bottom: &Segment) -> Result<f64> {
        let m = SplitModel::new(bottom.clone(), self.model.middle.clone(), self.model.head.clone())?;
        m.accuracy(&self.eval.inputs, &self.eval.labels)
    }

    pub fn verify(&self, bottom: &Segment) -> Result<Option<VerificationReport>> {
        self.key
            .map(|k| {
                let mut probes = RngStream::new(self.seed, StreamLabel::Verification).derive(FINAL_PROBES);
                verify(bottom, k, self.samples, self.tau, &mut probes)
            })
            .transpose()
    }

    pub fn compare(&self, name: &str, parameter: String, attacked: &Segment) -> Result<AttackReport> {
        let before = &self.model.bottom;
        Ok(AttackReport {
            attack: name.to_string(),
            parameter,
            accuracy_before: self.accuracy(before)?,
            accuracy_after: self.accuracy(attacked)?,
            wsr_before: self.verify(before)?.map(|r| r.wsr),
            wsr_after: self.verify(attacked)?.map(|r| r.wsr),
        })
    }
}

/// Applies one post-hoc attack with the attacker's shard.
pub fn apply_attack(bottom: &Segment, spec: AttackSpec, cfg: &ExperimentConfig, shard: &Dataset) -> Result<Segment> {
    match spec {
        AttackSpec::Quantize(q) => quantize(bottom, q),
        AttackSpec::Prune(r) => prune(bottom, r),
        AttackSpec::Finetune(steps) => {
            let mut rng = RngStream::new(cfg.seed, StreamLabel::Attack).derive(FINETUNE + steps as u64);
            finetune(bottom, shard, &cfg.attacks.finetune_config(steps), &mut rng)
        }
    }
}

/// Bottom segments of `cfg.calibration.models` never-watermarked runs.
pub fn clean_bottoms(cfg: &ExperimentConfig) -> Result<Vec<Segment>> {
    (1..=cfg.calibration.models as u64)
        .map(|j| {
            let mut clean = cfg.clone();
            clean.seed = cfg.seed.wrapping_add(j);
            clean.embed.enabled = false;
            clean.noise.snr = None;
            let prep = prepare(&clean)?;
            Ok(train(&clean, &prep, &RunHooks::default())
                .map_err(|e| e.context(format!("clean model {j}")))?
                .model
                .bottom)
        })
        .collect()
}

pub fn calibrate(cfg: &ExperimentConfig, bottoms: &[Segment]) -> Result<crate::watermark::NullCalibration> {
    let refs: Vec<&Segment> = bottoms.iter().collect();
    calibrate_threshold(
        &refs,
        cfg.calibration.keys,
        cfg.embed.k,
        cfg.calibration.samples,
        &RngStream::new(cfg.seed, StreamLabel::WatermarkKey).derive(CALIBRATION),
        &RngStream::new(cfg.seed, StreamLabel::Verification).derive(CALIBRATION),
    )
}

fn attack_list(cfg: &ExperimentConfig) -> Vec<AttackSpec> {
    let a = &cfg.attacks;
    a.quantize
        .iter()
        .map(|&q| AttackSpec::Quantize(q))
        .chain(a.prune.iter().map(|&r| AttackSpec::Prune(r)))
        .chain(a.finetune.steps.iter().map(|&s| AttackSpec::Finetune(s)))
        .collect()
}

/// One full experiment: training plus every enabled analysis.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let capture = cfg.protocol.capture_client;
    let wants_capture = cfg.detector.enabled || cfg.attacks.adaptive.enabled;

    let mut detector: Option<DetectorState> = if cfg.detector.enabled {
        let mut rng = RngStream::new(cfg.seed, StreamLabel::Attack).derive(DETECTOR);
        Some(
            build_reference(
                &prep.shards[capture],
                &cfg.model_spec(),
                &cfg.detector_config(),
                &mut rng,
            )
            .map_err(|e| e.context("detector reference"))?,
        )
    } else {
        None
    };

    let hooks = RunHooks {
        observer: None,
        capture_client: wants_capture.then_some(capture),
        noise: cfg.noise_spec().map(|s| (s, cfg.noise.clients.clone())),
    };
    let out = train(cfg, &prep, &hooks)?;
    let mut metrics = out.metrics;
    if let Some(det) = detector.as_mut() {
        for (m, received) in metrics.iter_mut().zip(&out.captured) {
            m.outliers = Some(det.score_round(received)?);
        }
    }

    let eval_set = prep.test.as_ref().unwrap_or(&prep.train);
    let ev = Evaluator {
        model: &out.model,
        eval: eval_set,
        key: prep.key.as_ref(),
        samples: cfg.verify.samples,
        tau: cfg.verify.tau,
        seed: cfg.seed,
    };
    let verification = ev.verify(&out.model.bottom)?;
    let embedding = prep.key.is_some();
    let final_ = FinalReport {
        train_accuracy: match metrics.last() {
            Some(m) => m.train_accuracy,
            None => out.model.accuracy(&prep.train.inputs, &prep.train.labels)?,
        },
        accuracy: ev.accuracy(&out.model.bottom)?,
        mean_cosine: mean(out.batches.iter().filter_map(|b| b.cosine)),
        max_clip_ratio: if embedding {
            out.batches
                .iter()
                .filter(|b| b.g_main_norm > 0.0)
                .map(|b| b.g_wm_clipped_norm / b.g_main_norm)
                .reduce(f64::max)
        } else {
            None
        },
        verification,
    };

    let calibration = if cfg.calibration.enabled && embedding {
        let bottoms = clean_bottoms(cfg)?;
        let cal = calibrate(cfg, &bottoms)?;
        let wsr = final_.verification.as_ref().map(|v| v.wsr).unwrap_or(0.0);
        Some(CalibrationReport {
            n_null: cal.null_wsrs.len(),
            null_mean: cal.mean,
            null_std: cal.std,
            null_max: cal.null_wsrs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            tau_5sigma: cal.tau_5sigma,
            std_floored: cal.std_floored,
            above_threshold: wsr > cal.tau_5sigma,
        })
    } else {
        None
    };

    let shard = &prep.shards[capture];
    let attacks = attack_list(cfg)
        .into_iter()
        .map(|spec| {
            let attacked =
                apply_attack(&out.model.bottom, spec, cfg, shard).map_err(|e| e.context(format!("attack {spec}")))?;
            ev.compare(spec.name(), spec.parameter(), &attacked)
        })
        .collect::<Result<Vec<_>>>()?;

    let adaptive = if cfg.attacks.adaptive.enabled {
        let a = &cfg.attacks.adaptive;
        let acfg = a.attack_config();
        let early = collect_rounds(&out.captured, acfg.early_rounds.clone())?;
        let late = collect_rounds(&out.captured, acfg.late_rounds.clone())?;
        let est = estimate_subspace(&early, &late, acfg.n_main, acfg.k_prime)?;
        let key_affinity = prep
            .key
            .as_ref()
            .map(|k| subspace_affinity(&est.v_wm, &orthonormal_columns(&k.embedding)))
            .transpose()?;
        let used = if acfg.normalize_weights {
            est.normalized()
        } else {
            est.clone()
        };
        let mut rng = RngStream::new(cfg.seed, StreamLabel::Attack).derive(ADAPTIVE);
        let attacked = adaptive_remove(&out.model.bottom, shard, &used, acfg.gamma, &acfg.finetune, &mut rng)
            .map_err(|e| e.context("adaptive attack"))?;
        Some(AdaptiveReport {
            early: a.early,
            late: a.late,
            n_main: a.n_main,
            k_prime: a.k_prime,
            gamma: a.gamma,
            component_variances: est.weights,
            key_affinity,
            result: ev.compare("adaptive", format!("gamma={}", a.gamma), &attacked)?,
        })
    } else {
        None
    };

    let detector = detector.map(|d| DetectorReport {
        client: capture,
        reference_rows: d.reference.rows(),
        threshold: d.threshold,
        alert_threshold: d.alert_threshold,
        mean_count: mean(d.counts.iter().map(|&c| c as f64)).unwrap_or(0.0),
        alerts: d.counts.iter().filter(|&&c| d.alert(c)).count(),
        counts: d.counts,
    });

    let mut streams = vec![StreamLabel::Data, StreamLabel::ModelInit, StreamLabel::Verification];
    if embedding {
        streams.push(StreamLabel::WatermarkKey);
    }
    if hooks.noise.is_some() {
        streams.push(StreamLabel::Noise);
    }
    if cfg.detector.enabled || cfg.attacks.adaptive.enabled || !cfg.attacks.finetune.steps.is_empty() {
        streams.push(StreamLabel::Attack);
    }

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        streams,
        data: DataReport {
            train_samples: prep.train.len(),
            test_samples: prep.test.as_ref().map_or(0, Dataset::len),
            shard_sizes: prep.shards.iter().map(Dataset::len).collect(),
        },
        final_,
        calibration,
        attacks,
        adaptive,
        detector,
    };
    Ok(RunArtifacts {
        report,
        metrics,
        model: out.model,
        key: prep.key,
        train: prep.train,
        shards: prep.shards,
        captured: out.captured,
        log: out.log,
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Process exit code for an error: 2 for bad input, 3 for numerical
/// failure, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Validation(_) | Error::Parse { .. } | Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}
