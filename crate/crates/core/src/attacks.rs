//! What a malicious client can do with the bottom segment it holds.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, orthonormal_columns, pca, project_out, Matrix, RngStream};
use crate::nn::{softmax_xent, Activation, Layer, LayerSpec, OptimizerState, Segment, SgdConfig};

/// Gaussian noise on received gradients at a fixed power ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// `‖g‖² / ‖n‖²`; `f64::INFINITY` disables the noise.
    pub snr: f64,
}

impl NoiseSpec {
    pub fn new(snr: f64) -> Result<Self> {
        if snr.is_nan() || snr <= 0.0 {
            return Err(Error::invalid("snr must be positive"));
        }
        Ok(NoiseSpec { snr })
    }
}

/// `g + z·‖g‖/(√snr·‖z‖)` with `z ~ N(0, I)`.
pub fn inject_noise(g: &Matrix, spec: &NoiseSpec, rng: &mut RngStream) -> Result<Matrix> {
    if spec.snr.is_nan() || spec.snr <= 0.0 {
        return Err(Error::invalid("snr must be positive"));
    }
    if spec.snr.is_infinite() {
        return Ok(g.clone());
    }
    let z = gaussian_matrix(rng, g.rows(), g.cols())?;
    let scale = g.norm() / (spec.snr.sqrt() * z.norm());
    let mut out = g.clone();
    out.axpy(scale, &z)?;
    Ok(out)
}

/// Surrogate-head training schedule used by the fine-tuning attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

/// Penalty applied at the split point during fine-tuning.
struct Penalty<'a> {
    estimate: &'a SubspaceEstimate,
    gamma: f64,
}

fn surrogate_train(
    bottom: &Segment,
    shard: &Dataset,
    cfg: &FinetuneConfig,
    penalty: Option<Penalty<'_>>,
    rng: &mut RngStream,
) -> Result<Segment> {
    if shard.is_empty() {
        return Err(Error::invalid("attack shard is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: 0.0,
    };
    let mut problems = Vec::new();
    sgd.validate("finetune", &mut problems);
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut bottom = bottom.clone();
    let spec = LayerSpec::new(bottom.out_dim(), shard.n_classes, Activation::Identity);
    let mut head = Segment::new(vec![Layer::init(spec, rng)?])?;
    let mut bottom_opt = OptimizerState::new(sgd);
    let mut head_opt = OptimizerState::new(sgd);

    let mut done = 0;
    while done < cfg.steps {
        for (x, y) in shard.shuffled_batches(cfg.batch_size, rng) {
            if done == cfg.steps {
                break;
            }
            let (a, bottom_tape) = bottom.forward(&x)?;
            let (logits, head_tape) = head.forward(&a)?;
            let (_, logits_grad) = softmax_xent(&logits, &y)?;
            let (mut g_a, head_grads) = head.backward(&head_tape, &logits_grad)?;
            if let Some(p) = &penalty {
                if p.gamma != 0.0 {
                    let (_, g_pen) = attack_penalty(&a, p.estimate)?;
                    g_a.axpy(p.gamma, &g_pen)?;
                }
            }
            let (_, bottom_grads) = bottom.backward(&bottom_tape, &g_a)?;
            head.step(&head_grads, &mut head_opt)?;
            bottom.step(&bottom_grads, &mut bottom_opt)?;
            done += 1;
        }
    }
    Ok(bottom)
}

/// Trains the bottom segment with a fresh linear surrogate head on the
/// attacker's shard, main-task loss only.
pub fn finetune(bottom: &Segment, shard: &Dataset, cfg: &FinetuneConfig, rng: &mut RngStream) -> Result<Segment> {
    surrogate_train(bottom, shard, cfg, None, rng)
}

/// Global magnitude pruning of the weight matrices; biases are kept.
pub fn prune(bottom: &Segment, ratio: f64) -> Result<Segment> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("pruning ratio must lie in [0, 1]"));
    }
    let mut out = bottom.clone();
    let mut magnitudes: Vec<(f64, usize, usize)> = Vec::new();
    for (l, layer) in out.layers().iter().enumerate() {
        magnitudes.extend(
            layer
                .weights
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.abs(), l, i)),
        );
    }
    let count = (ratio * magnitudes.len() as f64).floor() as usize;
    magnitudes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, l, i) in &magnitudes[..count] {
        out.layers_mut()[l].weights.as_mut_slice()[i] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Half16,
    Int8,
    Int4,
}

impl QuantScheme {
    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Half16 => "half16",
            QuantScheme::Int8 => "int8",
            QuantScheme::Int4 => "int4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "half16" | "fp16" => Some(QuantScheme::Half16),
            "int8" => Some(QuantScheme::Int8),
            "int4" => Some(QuantScheme::Int4),
            _ => None,
        }
    }
}

/// Snaps `values` in place to the scheme's grid (one scale for the slice).
pub fn quantize_values(values: &mut [f64], scheme: QuantScheme) {
    let bits = match scheme {
        QuantScheme::Half16 => {
            for v in values.iter_mut() {
                *v = half::f16::from_f64(*v).to_f64();
            }
            return;
        }
        QuantScheme::Int8 => 8,
        QuantScheme::Int4 => 4,
    };
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let half_levels = ((1u32 << bits) - 2) as f64 / 2.0;
    let step = max / half_levels;
    for v in values.iter_mut() {
        *v = ((*v / step).round() * step).clamp(-max, max);
    }
}

/// Symmetric per-tensor simulated quantization of every weight and bias.
pub fn quantize(bottom: &Segment, scheme: QuantScheme) -> Result<Segment> {
    if !bottom.is_finite() {
        return Err(Error::invalid("cannot quantize non-finite weights"));
    }
    let mut out = bottom.clone();
    for t in out.tensors_mut() {
        quantize_values(t.as_mut_slice(), scheme);
    }
    Ok(out)
}

/// The attacker's view of the main-task and watermark gradient subspaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceEstimate {
    pub v_main: Matrix,
    pub v_wm: Matrix,
    /// Residual variance along each column of `v_wm`.
    pub weights: Vec<f64>,
}

impl SubspaceEstimate {
    /// Copy with weights divided by the largest one.
    pub fn normalized(&self) -> SubspaceEstimate {
        let top = self.weights.iter().copied().fold(0.0, f64::max);
        let mut out = self.clone();
        if top > 0.0 {
            out.weights.iter_mut().for_each(|w| *w /= top);
        }
        out
    }
}

/// Main-task directions from late gradients, then the strongest early
/// directions left over after removing them.
pub fn estimate_subspace(early: &Matrix, late: &Matrix, n_main: usize, k_prime: usize) -> Result<SubspaceEstimate> {
    if early.cols() != late.cols() {
        return Err(Error::invalid("early and late gradients differ in dimension"));
    }
    let main = pca(late, n_main)?;
    let v_main = orthonormal_columns(&main.basis);
    let residual = project_out(early, &v_main)?;
    let wm = pca(&residual, k_prime)?;
    Ok(SubspaceEstimate {
        v_main,
        v_wm: wm.basis,
        weights: wm.weights.iter().map(|w| w.max(0.0)).collect(),
    })
}

/// `L_attack = mean_i Σ_j w_j (a_i·v_j)²` and its gradient with respect to `a`.
pub fn attack_penalty(a: &Matrix, est: &SubspaceEstimate) -> Result<(f64, Matrix)> {
    if a.cols() != est.v_wm.rows() {
        return Err(Error::invalid(format!(
            "activations have {} columns, subspace lives in {} dimensions",
            a.cols(),
            est.v_wm.rows()
        )));
    }
    let batch = a.rows() as f64;
    let mut coeffs = a.matmul(&est.v_wm)?;
    let mut loss = 0.0;
    for i in 0..coeffs.rows() {
        for (c, w) in coeffs.row_mut(i).iter_mut().zip(&est.weights) {
            loss += w * *c * *c;
            *c *= 2.0 * w / batch;
        }
    }
    Ok((loss / batch, coeffs.matmul_t(&est.v_wm)?))
}

/// Rounds are half-open ranges of 0-based round indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveAttackConfig {
    pub early_rounds: Range<usize>,
    pub late_rounds: Range<usize>,
    pub n_main: usize,
    pub k_prime: usize,
    pub gamma: f64,
    /// Scale the penalty weights so the strongest direction has weight 1.
    pub normalize_weights: bool,
    pub finetune: FinetuneConfig,
}

impl AdaptiveAttackConfig {
    pub fn validate(&self, rounds: usize, d: usize, problems: &mut Vec<String>) {
        for (name, r) in [("early_rounds", &self.early_rounds), ("late_rounds", &self.late_rounds)] {
            if r.is_empty() || r.end > rounds {
                problems.push(format!(
                    "attack.adaptive.{name} must be a non-empty range within 0..{rounds}"
                ));
            }
        }
        if self.k_prime == 0 || self.k_prime > d {
            problems.push(format!("attack.adaptive.k_prime must lie in 1..={d}"));
        }
        if self.n_main == 0 || self.n_main > d {
            problems.push(format!("attack.adaptive.n_main must lie in 1..={d}"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            problems.push("attack.adaptive.gamma must be non-negative".into());
        }
    }
}

/// Fine-tunes through a surrogate head while suppressing the activation
/// energy along the estimated watermark directions.
pub fn adaptive_remove(
    bottom: &Segment,
    shard: &Dataset,
    est: &SubspaceEstimate,
    gamma: f64,
    cfg: &FinetuneConfig,
    rng: &mut RngStream,
) -> Result<Segment> {
    if est.v_wm.rows() != bottom.out_dim() {
        return Err(Error::invalid(format!(
            "subspace dimension {} does not match split dimension {}",
            est.v_wm.rows(),
            bottom.out_dim()
        )));
    }
    surrogate_train(bottom, shard, cfg, Some(Penalty { estimate: est, gamma }), rng)
}

/// Stacks the captured gradient rows of the given rounds.
pub fn collect_rounds(captured: &[Matrix], rounds: Range<usize>) -> Result<Matrix> {
    if rounds.end > captured.len() || rounds.is_empty() {
        return Err(Error::invalid(format!(
            "rounds {rounds:?} not available in a log of {} rounds",
            captured.len()
        )));
    }
    let refs: Vec<&Matrix> = captured[rounds].iter().collect();
    Matrix::vstack(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::StreamLabel;

    fn rng() -> RngStream {
        RngStream::new(4, StreamLabel::Attack)
    }

    #[test]
    fn noise_hits_requested_snr() {
        let g = gaussian_matrix(&mut rng(), 8, 5).unwrap();
        for snr in [1.0, 0.01, 37.5] {
            let out = inject_noise(&g, &NoiseSpec::new(snr).unwrap(), &mut rng()).unwrap();
            let n = out.sub(&g).unwrap();
            let ratio = g.norm().powi(2) / n.norm().powi(2);
            assert!((ratio / snr - 1.0).abs() < 1e-12, "{ratio} vs {snr}");
        }
        let same = inject_noise(&g, &NoiseSpec { snr: f64::INFINITY }, &mut rng()).unwrap();
        assert_eq!(same, g);
        assert!(NoiseSpec::new(0.0).is_err());
    }

    #[test]
    fn prune_hand_case() {
        let w = Matrix::from_vec(2, 4, vec![3.0, -3.0, 1.0, -1.0, 0.1, -0.1, 0.01, -0.01]).unwrap();
        let layer = Layer::from_parts(LayerSpec::new(2, 4, Activation::Relu), w, Matrix::filled(1, 4, 0.5)).unwrap();
        let seg = Segment::new(vec![layer]).unwrap();
        let pruned = prune(&seg, 0.5).unwrap();
        assert_eq!(
            pruned.layers()[0].weights.as_slice(),
            &[3.0, -3.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(pruned.layers()[0].bias, seg.layers()[0].bias);
        assert_eq!(prune(&pruned, 0.5).unwrap(), pruned);
        assert_eq!(prune(&seg, 0.0).unwrap(), seg);
        assert!(prune(&seg, 1.0).unwrap().layers()[0]
            .weights
            .as_slice()
            .iter()
            .all(|w| *w == 0.0));
    }

    #[test]
    fn int4_grid() {
        let mut v = vec![-1.0, -0.5, 0.0, 0.5, 1.0];
        quantize_values(&mut v, QuantScheme::Int4);
        let s = 4.0 / 7.0;
        assert_eq!(v, vec![-1.0, -s, 0.0, s, 1.0]);
    }

    #[test]
    fn int8_error_bound_and_zeros() {
        let mut r = rng();
        let orig = r.normal_vec(500);
        let mut q = orig.clone();
        quantize_values(&mut q, QuantScheme::Int8);
        let max = orig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in orig.iter().zip(&q) {
            assert!((a - b).abs() <= max / 254.0 + 1e-15);
        }
        let mut z = vec![0.0; 4];
        quantize_values(&mut z, QuantScheme::Int8);
        assert_eq!(z, vec![0.0; 4]);
    }

    #[test]
    fn half16_keeps_ten_mantissa_bits() {
        let mut v = vec![1.0 + 2f64.powi(-11), 1.0 + 3.0 * 2f64.powi(-11), 1.0 / 3.0];
        quantize_values(&mut v, QuantScheme::Half16);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0 + 2f64.powi(-9));
        assert!((v[2] - 1.0 / 3.0).abs() <= 2f64.powi(-13));
    }

    #[test]
    fn penalty_is_zero_without_weights() {
        let a = gaussian_matrix(&mut rng(), 3, 4).unwrap();
        let est = SubspaceEstimate {
            v_main: Matrix::zeros(4, 1),
            v_wm: orthonormal_columns(&gaussian_matrix(&mut rng(), 4, 2).unwrap()),
            weights: vec![0.0, 0.0],
        };
        let (loss, grad) = attack_penalty(&a, &est).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn normalized_weights_peak_at_one() {
        let est = SubspaceEstimate {
            v_main: Matrix::zeros(4, 1),
            v_wm: Matrix::zeros(4, 3),
            weights: vec![4e-6, 2e-6, 0.0],
        };
        assert_eq!(est.normalized().weights, vec![1.0, 0.5, 0.0]);
        let zero = SubspaceEstimate {
            weights: vec![0.0; 3],
            ..est
        };
        assert_eq!(zero.normalized(), zero);
    }
}
