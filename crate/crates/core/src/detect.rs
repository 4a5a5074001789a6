//! Client-side outlier counting of received split-point gradients against
//! a reference set collected from local shadow training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};
use crate::nn::{softmax_xent, ModelSpec, OptimizerState, SgdConfig, SplitModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub k_nn: usize,
    pub quantile: f64,
    /// Share of the client's shard used for shadow training.
    pub shard_fraction: f64,
    pub shadow_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Reference rows kept (uniformly subsampled) after shadow training.
    pub max_reference_rows: usize,
    /// Alert when a round's count exceeds this; defaults to half the batch size.
    pub alert_threshold: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k_nn: 5,
            quantile: 0.99,
            shard_fraction: 1.0,
            shadow_epochs: 60,
            batch_size: 64,
            sgd: SgdConfig::default(),
            max_reference_rows: 4000,
            alert_threshold: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.k_nn == 0 {
            problems.push("detector.k_nn must be at least 1".into());
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            problems.push("detector.quantile must lie in (0, 1)".into());
        }
        if !(self.shard_fraction > 0.0 && self.shard_fraction <= 1.0) {
            problems.push("detector.shard_fraction must lie in (0, 1]".into());
        }
        if self.shadow_epochs == 0 {
            problems.push("detector.shadow_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("detector.batch_size must be at least 1".into());
        }
        self.sgd.validate("detector.sgd", problems);
        if self.max_reference_rows <= self.k_nn {
            problems.push("detector.max_reference_rows must exceed detector.k_nn".into());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub reference: Matrix,
    pub k_nn: usize,
    pub threshold: f64,
    pub alert_threshold: usize,
    pub counts: Vec<usize>,
}

const MIN_THRESHOLD: f64 = 1e-12;

/// Mean Euclidean distance from each row of `queries` to its `k` nearest
/// rows of `reference`. With `exclude_self`, query `i` is reference row `i`
/// and is skipped.
fn knn_mean_distances(queries: &Matrix, reference: &Matrix, k: usize, exclude_self: bool) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let ref_sq: Vec<f64> = reference.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut out = Vec::with_capacity(queries.rows());
    let mut dists = Vec::with_capacity(reference.rows());
    for start in (0..queries.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(queries.rows())).collect();
        let block = queries.select_rows(&idx);
        let cross = block.matmul_t(reference)?;
        for (bi, &qi) in idx.iter().enumerate() {
            let q_sq: f64 = block.row(bi).iter().map(|v| v * v).sum();
            dists.clear();
            dists.extend(
                cross
                    .row(bi)
                    .iter()
                    .zip(&ref_sq)
                    .enumerate()
                    .filter(|(j, _)| !(exclude_self && *j == qi))
                    .map(|(_, (c, r))| (q_sq + r - 2.0 * c).max(0.0)),
            );
            let k = k.min(dists.len());
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            out.push(dists[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64);
        }
    }
    Ok(out)
}

/// Nearest-rank quantile of `values`.
fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

impl DetectorState {
    /// Calibrates on an explicit reference set: the threshold is the
    /// `quantile` of leave-one-out k-NN distances.
    pub fn from_reference(reference: Matrix, k_nn: usize, quantile_q: f64, alert_threshold: usize) -> Result<Self> {
        if reference.rows() < k_nn + 1 {
            return Err(Error::invalid(format!(
                "{} reference rows are too few for k_nn = {k_nn}",
                reference.rows()
            )));
        }
        let scores = knn_mean_distances(&reference, &reference, k_nn, true)?;
        let threshold = quantile(scores, quantile_q).max(MIN_THRESHOLD);
        Ok(DetectorState {
            reference,
            k_nn,
            threshold,
            alert_threshold,
            counts: Vec::new(),
        })
    }

    /// Number of rows whose mean k-NN distance exceeds the threshold.
    pub fn count_outliers(&self, received: &Matrix) -> Result<usize> {
        if received.cols() != self.reference.cols() {
            return Err(Error::invalid(format!(
                "received gradients have {} columns, reference has {}",
                received.cols(),
                self.reference.cols()
            )));
        }
        Ok(knn_mean_distances(received, &self.reference, self.k_nn, false)?
            .into_iter()
            .filter(|&d| d > self.threshold)
            .count())
    }

    /// Scores one round and records its count.
    pub fn score_round(&mut self, received: &Matrix) -> Result<usize> {
        let count = self.count_outliers(received)?;
        self.counts.push(count);
        Ok(count)
    }

    pub fn alert(&self, count: usize) -> bool {
        count > self.alert_threshold
    }
}

/// Trains a private full model on a slice of the shard and keeps the
/// split-point gradient of every sample it saw.
pub fn build_reference(
    shard: &Dataset,
    spec: &ModelSpec,
    cfg: &DetectorConfig,
    rng: &mut RngStream,
) -> Result<DetectorState> {
    let mut problems = Vec::new();
    cfg.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let n = ((shard.len() as f64 * cfg.shard_fraction).ceil() as usize).clamp(1, shard.len());
    let order = rng.permutation(shard.len());
    let local = shard.subset(&order[..n]);
    let mut model = SplitModel::init(spec, rng)?;
    let mut opts = [
        OptimizerState::new(cfg.sgd),
        OptimizerState::new(cfg.sgd),
        OptimizerState::new(cfg.sgd),
    ];
    let mut rows = Vec::new();
    for _ in 0..cfg.shadow_epochs {
        for (x, y) in local.shuffled_batches(cfg.batch_size, rng) {
            let (a, bottom_tape) = model.bottom.forward(&x)?;
            let (s, middle_tape) = model.middle.forward(&a)?;
            let (logits, head_tape) = model.head.forward(&s)?;
            let (_, g_logits) = softmax_xent(&logits, &y)?;
            let (g_s, head_grads) = model.head.backward(&head_tape, &g_logits)?;
            let (g_a, middle_grads) = model.middle.backward(&middle_tape, &g_s)?;
            let (_, bottom_grads) = model.bottom.backward(&bottom_tape, &g_a)?;
            let [ob, om, oh] = &mut opts;
            model.head.step(&head_grads, oh)?;
            model.middle.step(&middle_grads, om)?;
            model.bottom.step(&bottom_grads, ob)?;
            rows.push(g_a);
        }
    }
    let mut reference = Matrix::vstack(&rows)?;
    if reference.rows() > cfg.max_reference_rows {
        let mut keep = rng.permutation(reference.rows());
        keep.truncate(cfg.max_reference_rows);
        keep.sort_unstable();
        reference = reference.select_rows(&keep);
    }
    DetectorState::from_reference(
        reference,
        cfg.k_nn,
        cfg.quantile,
        cfg.alert_threshold.unwrap_or(cfg.batch_size / 2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, StreamLabel};

    fn reference() -> Matrix {
        gaussian_matrix(&mut RngStream::new(3, StreamLabel::Attack), 200, 6).unwrap()
    }

    #[test]
    fn self_scores_respect_quantile() {
        let r = reference();
        let state = DetectorState::from_reference(r.clone(), 5, 0.99, 32).unwrap();
        assert!(state.threshold > 0.0);
        let flagged = state.count_outliers(&r).unwrap();
        assert!(flagged as f64 <= 0.01 * 200.0, "{flagged}");
    }

    #[test]
    fn copies_pass_and_blowups_fail() {
        let r = reference();
        let mut state = DetectorState::from_reference(r.clone(), 5, 0.99, 32).unwrap();
        let copies = r.select_rows(&[0, 5, 9]);
        assert_eq!(state.score_round(&copies).unwrap(), 0);
        assert_eq!(state.score_round(&copies.scale(1000.0)).unwrap(), 3);
        assert_eq!(state.counts, vec![0, 3]);
        assert!(state.count_outliers(&Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn too_few_rows_rejected() {
        assert!(DetectorState::from_reference(Matrix::zeros(5, 2), 5, 0.99, 1).is_err());
    }

    #[test]
    fn quantile_is_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(v.clone(), 0.99), 99.0);
        assert_eq!(quantile(v, 0.5), 50.0);
    }
}
