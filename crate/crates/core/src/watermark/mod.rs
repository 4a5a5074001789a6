//! Activation-space watermark: a secret Gaussian projection `M` (`d × k`) and
//! target bits `b`. The server pushes `sigmoid(A·M)` towards `b` by adding a
//! clipped watermark gradient to the task gradient it returns to clients, and
//! later checks a suspect bottom model with random probe inputs alone.

mod keyfile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngStream};
use crate::nn::Segment;

pub use keyfile::{read_key, write_key};

/// Secret pair `(M, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    /// `d × k` embedding matrix.
    pub embedding: Matrix,
    /// Target bit per projection, each 0 or 1.
    pub bits: Vec<u8>,
    /// Seed the key was generated from, if known.
    pub seed: Option<u64>,
}

impl WatermarkKey {
    pub fn new(embedding: Matrix, bits: Vec<u8>, seed: Option<u64>) -> Result<Self> {
        if embedding.cols() == 0 || embedding.rows() == 0 {
            return Err(Error::invalid("watermark needs d, k >= 1"));
        }
        if bits.len() != embedding.cols() {
            return Err(Error::invalid(format!(
                "{} target bits for a {}-column embedding",
                bits.len(),
                embedding.cols()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("target bits must be 0 or 1"));
        }
        if !embedding.is_finite() {
            return Err(Error::numerical("embedding matrix has non-finite entries"));
        }
        Ok(WatermarkKey { embedding, bits, seed })
    }

    pub fn d(&self) -> usize {
        self.embedding.rows()
    }

    pub fn k(&self) -> usize {
        self.embedding.cols()
    }

    /// `A·M`, one row of `k` logits per sample.
    pub fn project(&self, a_flat: &Matrix) -> Result<Matrix> {
        if a_flat.cols() != self.d() {
            return Err(Error::invalid(format!(
                "activation has {} features, watermark expects d = {}",
                a_flat.cols(),
                self.d()
            )));
        }
        a_flat.matmul(&self.embedding)
    }
}

/// Draws `M` with IID N(0, 1) entries, then `k` uniform bits, from `rng`.
pub fn keygen(rng: &mut RngStream, d: usize, k: usize) -> Result<WatermarkKey> {
    if d == 0 || k == 0 {
        return Err(Error::invalid("keygen needs d, k >= 1"));
    }
    if d < k {
        log::warn!("watermark length k = {k} exceeds activation dimension d = {d}");
    }
    let embedding = gaussian_matrix(rng, d, k)?;
    let bits = (0..k).map(|_| rng.bit() as u8).collect();
    WatermarkKey::new(embedding, bits, Some(rng.seed()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BCE of `sigmoid(p)` against bit `b` in log-sum-exp form.
fn bce_with_logit(p: f64, b: u8) -> f64 {
    p.max(0.0) - p * b as f64 + (-p.abs()).exp().ln_1p()
}

/// Watermark loss: BCE between `sigmoid(A·M)` and `b`, averaged over batch and bits.
pub fn wm_loss(a_flat: &Matrix, key: &WatermarkKey) -> Result<f64> {
    Ok(wm_loss_and_gradient(a_flat, key)?.0)
}

/// Gradient of [`wm_loss`] w.r.t. the activation: `C·Mᵀ` with
/// `C = (sigmoid(A·M) − b)/(batch·k)`, so every row lies in the span of `M`'s columns.
pub fn wm_gradient(a_flat: &Matrix, key: &WatermarkKey) -> Result<Matrix> {
    Ok(wm_loss_and_gradient(a_flat, key)?.1)
}

pub fn wm_loss_and_gradient(a_flat: &Matrix, key: &WatermarkKey) -> Result<(f64, Matrix)> {
    let batch = a_flat.rows();
    if batch == 0 {
        return Err(Error::invalid("watermark loss on an empty batch"));
    }
    let projection = key.project(a_flat)?;
    let scale = 1.0 / (batch * key.k()) as f64;
    let mut loss = 0.0;
    let mut coeffs = Matrix::zeros(batch, key.k());
    for i in 0..batch {
        for (j, (&p, &b)) in projection.row(i).iter().zip(&key.bits).enumerate() {
            loss += bce_with_logit(p, b);
            coeffs[(i, j)] = (sigmoid(p) - b as f64) * scale;
        }
    }
    let grad = coeffs.matmul_t(&key.embedding)?;
    Ok((loss * scale, grad))
}

/// Watermark strength and clipping options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Upper bound of `‖G'_wm‖ / ‖G_main‖`.
    pub lambda: f64,
    /// Division guard.
    pub epsilon: f64,
    /// Clip each sample's row separately instead of the whole batch tensor.
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            lambda: 0.1,
            epsilon: 1e-12,
            per_sample: false,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push("embed.lambda must be a non-negative number".to_string());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            problems.push("embed.epsilon must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn clip_factor(wm_norm: f64, main_norm: f64, cfg: &EmbedConfig) -> f64 {
    (cfg.lambda * main_norm / (wm_norm + cfg.epsilon)).min(1.0)
}

/// `min(1, λ‖G_main‖/(‖G_wm‖ + ε)) · G_wm`, norms over the whole batch tensor
/// (or per row when `cfg.per_sample`).
pub fn adaptive_clip(g_wm: &Matrix, g_main: &Matrix, cfg: &EmbedConfig) -> Result<Matrix> {
    if g_wm.shape() != g_main.shape() {
        return Err(Error::invalid(format!(
            "watermark gradient {:?} and task gradient {:?} differ in shape",
            g_wm.shape(),
            g_main.shape()
        )));
    }
    if !cfg.per_sample {
        return Ok(g_wm.scale(clip_factor(g_wm.norm(), g_main.norm(), cfg)));
    }
    let mut out = g_wm.clone();
    for i in 0..out.rows() {
        let f = clip_factor(
            crate::linalg::norm(g_wm.row(i)),
            crate::linalg::norm(g_main.row(i)),
            cfg,
        );
        out.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

/// `G_final = G_main + G'_wm`.
pub fn compose(g_main: &Matrix, g_wm_clipped: &Matrix) -> Result<Matrix> {
    g_main.add(g_wm_clipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub wsr: f64,
    pub threshold: f64,
    pub passed: bool,
    pub n_samples: usize,
    pub per_bit_accuracy: Vec<f64>,
}

/// Bits read from probe activations; `sigmoid(p) = 0.5` (p = 0) reads as 1.
pub fn extract_bits(a_flat: &Matrix, key: &WatermarkKey) -> Result<Vec<Vec<u8>>> {
    let projection = key.project(a_flat)?;
    Ok(projection
        .row_iter()
        .map(|row| row.iter().map(|&p| (p >= 0.0) as u8).collect())
        .collect())
}

/// Fraction of matching bits over all probes and positions, plus per-position accuracy.
pub fn watermark_success_rate(a_flat: &Matrix, key: &WatermarkKey) -> Result<(f64, Vec<f64>)> {
    let bits = extract_bits(a_flat, key)?;
    let n = bits.len();
    if n == 0 {
        return Err(Error::invalid("no probe samples"));
    }
    let mut hits = vec![0usize; key.k()];
    for row in &bits {
        for (h, (got, want)) in hits.iter_mut().zip(row.iter().zip(&key.bits)) {
            *h += (got == want) as usize;
        }
    }
    let total: usize = hits.iter().sum();
    let per_bit = hits.iter().map(|&h| h as f64 / n as f64).collect();
    Ok((total as f64 / (n * key.k()) as f64, per_bit))
}

/// Data-free ownership check: feeds `n_samples` N(0, 1) probes drawn from
/// `rng` through the bottom segment, reads bits through `M`, and passes when
/// the success rate exceeds `tau`.
pub fn verify(
    bottom: &Segment,
    key: &WatermarkKey,
    n_samples: usize,
    tau: f64,
    rng: &mut RngStream,
) -> Result<VerificationReport> {
    if bottom.out_dim() != key.d() {
        return Err(Error::invalid(format!(
            "model splits at dimension {}, key expects {}",
            bottom.out_dim(),
            key.d()
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("verification needs at least one probe"));
    }
    let probes = gaussian_matrix(rng, n_samples, bottom.in_dim())?;
    let activations = bottom.apply(&probes)?;
    let (wsr, per_bit_accuracy) = watermark_success_rate(&activations, key)?;
    Ok(VerificationReport {
        wsr,
        threshold: tau,
        passed: wsr > tau,
        n_samples,
        per_bit_accuracy,
    })
}

/// Null distribution of success rates for random keys on never-watermarked models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub null_wsrs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `mean + 5·std`, clamped to [0, 1].
    pub tau_5sigma: f64,
    /// Set when the observed spread was zero and `std` was floored.
    pub std_floored: bool,
}

const STD_FLOOR: f64 = 1e-6;

impl NullCalibration {
    pub fn from_wsrs(null_wsrs: Vec<f64>) -> Result<Self> {
        let n = null_wsrs.len();
        if n < 2 {
            return Err(Error::invalid("calibration needs at least two null samples"));
        }
        let mean = null_wsrs.iter().sum::<f64>() / n as f64;
        let var = null_wsrs.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mut std = var.sqrt();
        let std_floored = std < STD_FLOOR;
        if std_floored {
            log::warn!("null success rates have no spread; flooring std at {STD_FLOOR}");
            std = STD_FLOOR;
        }
        Ok(NullCalibration {
            null_wsrs,
            mean,
            std,
            tau_5sigma: (mean + 5.0 * std).clamp(0.0, 1.0),
            std_floored,
        })
    }
}

/// Evaluates `n_keys` fresh `k`-bit keys against every clean bottom model.
///
/// Key `i` comes from `key_rng.derive(i)`; probes for key `i` on model `j`
/// from `probe_rng.derive(i · models + j)`.
pub fn calibrate_threshold(
    clean_bottoms: &[&Segment],
    n_keys: usize,
    k: usize,
    n_samples: usize,
    key_rng: &RngStream,
    probe_rng: &RngStream,
) -> Result<NullCalibration> {
    if clean_bottoms.len() < 2 {
        return Err(Error::invalid("calibration needs at least 2 clean models"));
    }
    if n_keys < 10 {
        return Err(Error::invalid("calibration needs at least 10 keys"));
    }
    let d = clean_bottoms[0].out_dim();
    let mut wsrs = Vec::with_capacity(n_keys * clean_bottoms.len());
    for i in 0..n_keys {
        let key = keygen(&mut key_rng.derive(i as u64), d, k)?;
        for (j, bottom) in clean_bottoms.iter().enumerate() {
            let mut probes = probe_rng.derive((i * clean_bottoms.len() + j) as u64);
            wsrs.push(verify(bottom, &key, n_samples, 1.0, &mut probes)?.wsr);
        }
    }
    NullCalibration::from_wsrs(wsrs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormal_columns, project_out, StreamLabel};
    use crate::nn::{Activation, Layer, LayerSpec};

    fn key_from(embedding: Matrix, bits: Vec<u8>) -> WatermarkKey {
        WatermarkKey::new(embedding, bits, None).unwrap()
    }

    #[test]
    fn keygen_is_deterministic() {
        let a = keygen(&mut RngStream::new(3, StreamLabel::WatermarkKey), 8, 4).unwrap();
        let b = keygen(&mut RngStream::new(3, StreamLabel::WatermarkKey), 8, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(3));
    }

    #[test]
    fn keygen_bits_are_balanced() {
        // binomial(1000, 1/2): 3σ ≈ 0.047
        let key = keygen(&mut RngStream::new(10, StreamLabel::WatermarkKey), 4, 1000).unwrap();
        let mean = key.bits.iter().map(|&b| b as f64).sum::<f64>() / 1000.0;
        assert!(mean > 0.45 && mean < 0.55, "{mean}");
    }

    #[test]
    fn keygen_validation() {
        let mut rng = RngStream::new(0, StreamLabel::WatermarkKey);
        assert!(keygen(&mut rng, 0, 3).is_err());
        assert!(keygen(&mut rng, 3, 0).is_err());
        assert!(WatermarkKey::new(Matrix::zeros(3, 2), vec![0, 2], None).is_err());
        assert!(WatermarkKey::new(Matrix::zeros(3, 2), vec![0], None).is_err());
    }

    #[test]
    fn zero_projection_costs_ln2() {
        let key = key_from(Matrix::filled(3, 2, 1.0), vec![1, 0]);
        let loss = wm_loss(&Matrix::zeros(4, 3), &key).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn scalar_projection_closed_form() {
        let key = key_from(Matrix::filled(1, 1, 1.0), vec![1]);
        let loss = wm_loss(&Matrix::filled(1, 1, 2.0), &key).unwrap();
        assert!((loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((loss - 0.12693).abs() < 1e-5);
        let saturated = wm_loss(&Matrix::filled(1, 1, 800.0), &key).unwrap();
        assert!((0.0..1e-300).contains(&saturated));
        assert!(wm_loss(&Matrix::filled(1, 1, -800.0), &key).unwrap().is_finite());
    }

    #[test]
    fn loss_rejects_wrong_width() {
        let key = key_from(Matrix::filled(3, 2, 1.0), vec![1, 0]);
        assert!(matches!(
            wm_loss(&Matrix::zeros(2, 4), &key),
            Err(Error::InvalidArgument(_))
        ));
        assert!(wm_gradient(&Matrix::zeros(2, 4), &key).is_err());
    }

    #[test]
    fn saturated_projection_has_vanishing_gradient() {
        // projection ±20 agreeing with every target bit
        let key = key_from(Matrix::identity(4), vec![1, 0, 1, 0]);
        let a = Matrix::from_rows(&[[20.0, -20.0, 20.0, -20.0]]).unwrap();
        assert!(wm_gradient(&a, &key).unwrap().norm() < 1e-6);
    }

    #[test]
    fn gradient_rows_stay_in_span() {
        let mut rng = RngStream::new(4, StreamLabel::WatermarkKey);
        let key = keygen(&mut rng, 32, 8).unwrap();
        let a = gaussian_matrix(&mut rng, 6, 32).unwrap();
        let g = wm_gradient(&a, &key).unwrap();
        let residual = project_out(&g, &orthonormal_columns(&key.embedding)).unwrap();
        for (r, row) in residual.row_iter().zip(g.row_iter()) {
            assert!(crate::linalg::norm(r) < 1e-10 * crate::linalg::norm(row));
        }
    }

    #[test]
    fn clipping_cases() {
        let cfg = EmbedConfig {
            lambda: 0.1,
            ..Default::default()
        };
        let g_main = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let big = Matrix::from_rows(&[[0.0, 10.0]]).unwrap();
        let clipped = adaptive_clip(&big, &g_main, &cfg).unwrap();
        assert!((clipped.norm() - 0.2).abs() < 1e-12);
        let small = Matrix::from_rows(&[[0.0, 0.1]]).unwrap();
        assert_eq!(adaptive_clip(&small, &g_main, &cfg).unwrap(), small);
        let zero = Matrix::zeros(1, 2);
        assert_eq!(adaptive_clip(&zero, &g_main, &cfg).unwrap(), zero);
        assert_eq!(adaptive_clip(&zero, &zero, &cfg).unwrap(), zero);
    }

    #[test]
    fn per_sample_clipping_bounds_each_row() {
        let cfg = EmbedConfig {
            lambda: 0.5,
            per_sample: true,
            ..Default::default()
        };
        let g_main = Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]]).unwrap();
        let g_wm = Matrix::from_rows(&[[0.0, 3.0], [1.0, 0.0]]).unwrap();
        let out = adaptive_clip(&g_wm, &g_main, &cfg).unwrap();
        assert!((crate::linalg::norm(out.row(0)) - 0.5).abs() < 1e-12);
        assert_eq!(out.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn composition() {
        let g_main = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let g_wm = Matrix::from_rows(&[[0.0, 0.5]]).unwrap();
        assert_eq!(compose(&g_main, &g_wm).unwrap().as_slice(), &[1.0, 0.5]);
        assert_eq!(compose(&g_main, &Matrix::zeros(1, 2)).unwrap(), g_main);
    }

    /// Bottom whose activation is a constant vector, so every probe reads the same bits.
    fn constant_bottom(out: &[f64]) -> Segment {
        let spec = LayerSpec::new(3, out.len(), Activation::Identity);
        let layer = Layer::from_parts(
            spec,
            Matrix::zeros(3, out.len()),
            Matrix::from_vec(1, out.len(), out.to_vec()).unwrap(),
        )
        .unwrap();
        Segment::new(vec![layer]).unwrap()
    }

    #[test]
    fn verify_full_match_and_anti_match() {
        let key = key_from(Matrix::identity(4), vec![1, 0, 1, 1]);
        let mut rng = RngStream::new(1, StreamLabel::Verification);
        let good = verify(&constant_bottom(&[1.0, -1.0, 2.0, 0.5]), &key, 32, 0.7, &mut rng).unwrap();
        assert_eq!(good.wsr, 1.0);
        assert!(good.passed);
        assert_eq!(good.per_bit_accuracy, vec![1.0; 4]);
        let bad = verify(&constant_bottom(&[-1.0, 1.0, -2.0, -0.5]), &key, 32, 0.7, &mut rng).unwrap();
        assert_eq!(bad.wsr, 0.0);
        assert!(!bad.passed);
    }

    #[test]
    fn verify_tie_reads_as_one() {
        let key = key_from(Matrix::identity(2), vec![1, 0]);
        let mut rng = RngStream::new(1, StreamLabel::Verification);
        let report = verify(&constant_bottom(&[0.0, 0.0]), &key, 4, 0.7, &mut rng).unwrap();
        assert_eq!(report.per_bit_accuracy, vec![1.0, 0.0]);
    }

    #[test]
    fn verify_rejects_wrong_split() {
        let key = key_from(Matrix::identity(3), vec![1, 0, 1]);
        let mut rng = RngStream::new(1, StreamLabel::Verification);
        assert!(verify(&constant_bottom(&[0.0; 4]), &key, 4, 0.7, &mut rng).is_err());
    }

    #[test]
    fn identical_null_rates_floor_the_std() {
        let cal = NullCalibration::from_wsrs(vec![0.5; 10]).unwrap();
        assert!(cal.std_floored);
        assert!((cal.tau_5sigma - (0.5 + 5e-6)).abs() < 1e-15);
    }

    #[test]
    fn tau_is_clamped() {
        let cal = NullCalibration::from_wsrs(vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(cal.tau_5sigma, 1.0);
    }

    #[test]
    fn calibration_preconditions() {
        let b = constant_bottom(&[1.0; 4]);
        let rng = RngStream::new(0, StreamLabel::WatermarkKey);
        assert!(calibrate_threshold(&[&b], 10, 2, 8, &rng, &rng).is_err());
        assert!(calibrate_threshold(&[&b, &b], 9, 2, 8, &rng, &rng).is_err());
        let cal = calibrate_threshold(&[&b, &b], 10, 2, 8, &rng, &rng).unwrap();
        assert_eq!(cal.null_wsrs.len(), 20);
    }
}
