use std::fmt::Write as _;
use std::path::Path;

use super::config::{parse_partition, ExperimentConfig, PartitionKind};
use super::run::{execute, RunArtifacts, RunReport};
use crate::error::{Error, Result};
use crate::nn::write_checkpoint;
use crate::protocol::RoundMetrics;
use crate::watermark::write_key;

pub const METRICS_COLUMNS: [&str; 11] = [
    "round",
    "main_loss",
    "wm_loss",
    "g_main_norm",
    "g_wm_norm",
    "g_wm_clipped_norm",
    "cosine",
    "train_accuracy",
    "test_accuracy",
    "wsr",
    "outliers",
];

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "name",
    "seed",
    "lambda",
    "n_clients",
    "partition",
    "early",
    "snr",
    "train_accuracy",
    "accuracy",
    "wsr",
    "mean_cosine",
    "mean_outliers",
    "adaptive_accuracy",
    "adaptive_wsr",
];

/// Nine significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for m in metrics {
        let cells = [
            m.round.to_string(),
            fmt_float(m.main_loss),
            opt(m.wm_loss),
            fmt_float(m.g_main_norm),
            opt(m.g_wm_norm),
            opt(m.g_wm_clipped_norm),
            opt(m.cosine),
            fmt_float(m.train_accuracy),
            opt(m.test_accuracy),
            opt(m.wsr),
            m.outliers.map(|c| c.to_string()).unwrap_or_default(),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes `metrics.csv`, `manifest.json`, and when present `key.txt`,
/// `model.ckpt` and `train.csv` into `dir`.
pub fn write_artifacts(art: &RunArtifacts, dir: &Path) -> Result<()> {
    let cfg = &art.report.config;
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&art.metrics))?;
    let mut manifest = serde_json::to_string_pretty(&art.report)?;
    manifest.push('\n');
    std::fs::write(dir.join("manifest.json"), manifest)?;
    if let Some(key) = &art.key {
        write_key(key, &dir.join("key.txt"))?;
    }
    if cfg.output.checkpoint {
        write_checkpoint(&art.model, &dir.join("model.ckpt"))?;
    }
    if cfg.output.dump_data {
        art.train.save_csv(&dir.join("train.csv"))?;
    }
    Ok(())
}

/// Executes `cfg` and writes its artifacts to `cfg.output.dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let art = execute(cfg)?;
    write_artifacts(&art, &cfg.output.dir)?;
    Ok(art.report)
}

fn fmt_short(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// The sweep's runs as (name, config); each config has an empty sweep
/// section and writes under `<output.dir>/<name>`.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
        if values.is_empty() {
            vec![None]
        } else {
            values.iter().cloned().map(Some).collect()
        }
    }
    let s = &cfg.sweep;
    let mut points = Vec::new();
    for seed in axis(&s.seeds) {
        for lambda in axis(&s.lambda) {
            for clients in axis(&s.clients) {
                for part in axis(&s.partition) {
                    for early in axis(&s.early) {
                        for snr in axis(&s.snr) {
                            let mut c = cfg.clone();
                            c.sweep = Default::default();
                            let mut name = Vec::new();
                            if let Some(v) = seed {
                                c.seed = v;
                                name.push(format!("seed{v}"));
                            }
                            if let Some(v) = lambda {
                                if v == 0.0 {
                                    c.embed.enabled = false;
                                    name.push("control".to_string());
                                } else {
                                    c.embed.enabled = true;
                                    c.embed.lambda = v;
                                    name.push(format!("lambda{v}"));
                                }
                            }
                            if let Some(v) = clients {
                                c.partition.n_clients = v;
                                name.push(format!("clients{v}"));
                            }
                            if let Some(entry) = &part {
                                let (kind, value) = parse_partition(entry).ok_or_else(|| {
                                    Error::Validation(vec![format!(
                                        "sweep.partition entry `{entry}` is not recognised"
                                    )])
                                })?;
                                c.partition.mode = kind;
                                match kind {
                                    PartitionKind::Dirichlet => c.partition.beta = value.unwrap_or(c.partition.beta),
                                    PartitionKind::Unbalanced => c.partition.sigma = value.unwrap_or(c.partition.sigma),
                                    PartitionKind::Iid => {}
                                }
                                name.push(entry.replace(':', "-"));
                            }
                            if let Some(v) = early {
                                c.attacks.adaptive.early = v;
                                name.push(format!("early{}-{}", v[0], v[1]));
                            }
                            if let Some(v) = snr {
                                c.noise.snr = v.is_finite().then_some(v);
                                name.push(format!("snr{}", fmt_short(v)));
                            }
                            let name = if name.is_empty() {
                                "base".to_string()
                            } else {
                                name.join("_")
                            };
                            c.output.dir = cfg.output.dir.join(&name);
                            c.validate().map_err(|e| e.context(format!("sweep point {name}")))?;
                            points.push((name, c));
                        }
                    }
                }
            }
        }
    }
    Ok(points)
}

pub fn summary_row(name: &str, r: &RunReport) -> String {
    let c = &r.config;
    let partition = match c.partition.mode {
        PartitionKind::Iid => "iid".to_string(),
        PartitionKind::Dirichlet => format!("dirichlet:{}", c.partition.beta),
        PartitionKind::Unbalanced => format!("unbalanced:{}", c.partition.sigma),
    };
    let early = if c.attacks.adaptive.enabled {
        format!("{}-{}", c.attacks.adaptive.early[0], c.attacks.adaptive.early[1])
    } else {
        String::new()
    };
    let adaptive = r.adaptive.as_ref().map(|a| &a.result);
    let cells = [
        name.to_string(),
        c.seed.to_string(),
        fmt_float(if c.embed.enabled { c.embed.lambda } else { 0.0 }),
        c.partition.n_clients.to_string(),
        partition,
        early,
        c.noise.snr.map(fmt_float).unwrap_or_else(|| "inf".into()),
        fmt_float(r.final_.train_accuracy),
        fmt_float(r.final_.accuracy),
        opt(r.final_.verification.as_ref().map(|v| v.wsr)),
        opt(r.final_.mean_cosine),
        opt(r.detector.as_ref().map(|d| d.mean_count)),
        opt(adaptive.map(|a| a.accuracy_after)),
        opt(adaptive.and_then(|a| a.wsr_after)),
    ];
    cells.join(",")
}

/// Runs every sweep point in order, writing each under its own directory
/// and a `summary.csv` with one row per point.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, RunReport)>> {
    let points = sweep_points(cfg)?;
    let mut reports = Vec::with_capacity(points.len());
    let mut summary = SUMMARY_COLUMNS.join(",");
    summary.push('\n');
    for (name, c) in points {
        log::info!("sweep point {name}");
        let report = run(&c).map_err(|e| e.context(format!("sweep point {name}")))?;
        let _ = writeln!(summary, "{}", summary_row(&name, &report));
        reports.push((name, report));
    }
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join("summary.csv"), summary)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_nine_significant_digits() {
        assert_eq!(fmt_float(0.1), "1.00000000e-1");
        assert_eq!(fmt_float(-1234.5678912), "-1.23456789e3");
        assert_eq!(fmt_float(0.0), "0.00000000e0");
    }

    #[test]
    fn sweep_is_a_cartesian_product() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.seeds = vec![1, 2];
        cfg.sweep.lambda = vec![0.0, 0.5];
        cfg.sweep.partition = vec!["iid".into(), "dirichlet:0.3".into()];
        let points = sweep_points(&cfg).unwrap();
        assert_eq!(points.len(), 8);
        let (name, c) = &points[3];
        assert_eq!(name, "seed1_lambda0.5_dirichlet-0.3");
        assert_eq!(c.seed, 1);
        assert!(c.embed.enabled);
        assert_eq!(c.partition.beta, 0.3);
        assert!(c.sweep.seeds.is_empty());
        assert!(!points[0].1.embed.enabled);
        assert_eq!(points[0].0, "seed1_control_iid");
    }

    #[test]
    fn empty_sweep_is_the_base_run() {
        let points = sweep_points(&ExperimentConfig::default()).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].0, "base");
    }
}
