//! Small fully connected networks with hand-written backward passes.
//!
//! A [`SplitModel`] is three [`Segment`]s: the client-side bottom that produces
//! the split-point activation, the server-side middle, and the client-side head
//! that turns the middle's output into logits.

mod checkpoint;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngStream};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use optim::{sgd_step, OptimizerState, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Affine map followed by an activation: `act(x·W + b)` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Layer {
    /// Gaussian weights scaled by `1/√in`, zero bias.
    pub fn init(spec: LayerSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be at least 1"));
        }
        let weights = gaussian_matrix(rng, spec.in_dim, spec.out_dim)?.scale(1.0 / (spec.in_dim as f64).sqrt());
        Ok(Layer {
            spec,
            weights,
            bias: Matrix::zeros(1, spec.out_dim),
        })
    }

    pub fn from_parts(spec: LayerSpec, weights: Matrix, bias: Matrix) -> Result<Self> {
        if weights.shape() != (spec.in_dim, spec.out_dim) || bias.shape() != (1, spec.out_dim) {
            return Err(Error::invalid(format!(
                "layer parameters {:?}/{:?} do not fit {}x{}",
                weights.shape(),
                bias.shape(),
                spec.in_dim,
                spec.out_dim
            )));
        }
        Ok(Layer { spec, weights, bias })
    }

    fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weights)?;
        let b = self.bias.as_slice();
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
        }
        Ok(z)
    }
}

/// Values cached by a forward pass: the input and pre-activation of every layer.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input fed to the segment.
    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGrads {
    pub layers: Vec<LayerGrads>,
}

impl SegmentGrads {
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0))
    }
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    layers: Vec<Layer>,
}

impl Segment {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a segment needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].spec.out_dim != pair[1].spec.in_dim {
                return Err(Error::invalid(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].spec.out_dim, pair[1].spec.in_dim
                )));
            }
        }
        Ok(Segment { layers })
    }

    pub fn init(specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        let layers = specs.iter().map(|&s| Layer::init(s, rng)).collect::<Result<Vec<_>>>()?;
        Segment::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Forward pass without recording a tape.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let act = layer.spec.activation;
            x = layer.pre_activation(&x)?.map(|z| act.apply(z));
        }
        Ok(x)
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::invalid(format!(
                "segment expects {} input features, got {}",
                self.in_dim(),
                input.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardTape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&x)?;
            let act = layer.spec.activation;
            let out = z.map(|v| act.apply(v));
            inputs.push(x);
            pre_activations.push(z);
            x = out;
        }
        Ok((
            x,
            ForwardTape {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Reverse-mode pass: returns `∂loss/∂input` and the parameter gradients
    /// given `∂loss/∂output`.
    pub fn backward(&self, tape: &ForwardTape, upstream: &Matrix) -> Result<(Matrix, SegmentGrads)> {
        if tape.len() != self.layers.len() {
            return Err(Error::InvalidState(format!(
                "tape has {} layers, segment has {}",
                tape.len(),
                self.layers.len()
            )));
        }
        let batch = tape.inputs[0].rows();
        if upstream.shape() != (batch, self.out_dim()) {
            return Err(Error::InvalidState(format!(
                "upstream gradient {:?} does not match segment output {:?}",
                upstream.shape(),
                (batch, self.out_dim())
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre_activations[i];
            if z.shape() != delta.shape() {
                return Err(Error::InvalidState("tape does not belong to this segment".into()));
            }
            let act = layer.spec.activation;
            if act != Activation::Identity {
                for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *d *= act.derivative(zv);
                }
            }
            let weights = tape.inputs[i].t_matmul(&delta)?;
            let bias = Matrix::from_vec(1, delta.cols(), delta.column_sums())?;
            let next = delta.matmul_t(&layer.weights)?;
            grads.push(LayerGrads { weights, bias });
            delta = next;
        }
        grads.reverse();
        Ok((delta, SegmentGrads { layers: grads }))
    }

    /// Applies one optimizer step with `grads`.
    pub fn step(&mut self, grads: &SegmentGrads, state: &mut OptimizerState) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::invalid("gradient does not match segment"));
        }
        sgd_step(self.tensors_mut(), grads.tensors(), state)
    }

    /// Segment whose parameters are the weighted mean of `segments`.
    pub fn weighted_average(segments: &[&Segment], weights: &[f64]) -> Result<Segment> {
        let first = segments
            .first()
            .ok_or_else(|| Error::invalid("cannot average zero segments"))?;
        if segments.len() != weights.len() {
            return Err(Error::invalid("one weight per segment required"));
        }
        let total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid(
                "averaging weights must be non-negative with a positive sum",
            ));
        }
        let specs = first.specs();
        if segments.iter().any(|s| s.specs() != specs) {
            return Err(Error::invalid("cannot average segments with different topologies"));
        }
        let mut out = (*first).clone();
        for t in out.tensors_mut() {
            t.scale_in_place(0.0);
        }
        for (seg, &w) in segments.iter().zip(weights) {
            for (acc, t) in out.tensors_mut().into_iter().zip(seg.tensors()) {
                acc.axpy(w / total, t)?;
            }
        }
        Ok(out)
    }
}

/// Shape of a split network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the client-side bottom layers; the last one is the split dimension.
    pub bottom: Vec<usize>,
    /// Widths of the server-side middle layers.
    pub middle: Vec<usize>,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn split_dim(&self) -> usize {
        self.bottom.last().copied().unwrap_or(0)
    }

    fn relu_chain(input: usize, widths: &[usize]) -> Vec<LayerSpec> {
        let mut prev = input;
        widths
            .iter()
            .map(|&w| {
                let spec = LayerSpec::new(prev, w, Activation::Relu);
                prev = w;
                spec
            })
            .collect()
    }

    pub fn bottom_specs(&self) -> Vec<LayerSpec> {
        Self::relu_chain(self.input_dim, &self.bottom)
    }

    pub fn middle_specs(&self) -> Vec<LayerSpec> {
        Self::relu_chain(self.split_dim(), &self.middle)
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        let prev = self.middle.last().copied().unwrap_or(0);
        vec![LayerSpec::new(prev, self.n_classes, Activation::Identity)]
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("model.input_dim must be at least 1".to_string());
        }
        if self.bottom.is_empty() || self.bottom.contains(&0) {
            problems.push("model.bottom needs at least one non-zero width".to_string());
        }
        if self.middle.is_empty() || self.middle.contains(&0) {
            problems.push("model.middle needs at least one non-zero width".to_string());
        }
        if self.n_classes < 2 {
            problems.push("model needs at least 2 classes".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// The three-segment U-shaped model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub bottom: Segment,
    pub middle: Segment,
    pub head: Segment,
}

impl SplitModel {
    pub fn new(bottom: Segment, middle: Segment, head: Segment) -> Result<Self> {
        if bottom.out_dim() != middle.in_dim() || middle.out_dim() != head.in_dim() {
            return Err(Error::invalid(format!(
                "segment boundaries do not chain: {} -> {} / {} -> {}",
                bottom.out_dim(),
                middle.in_dim(),
                middle.out_dim(),
                head.in_dim()
            )));
        }
        Ok(SplitModel { bottom, middle, head })
    }

    /// Fresh model drawn from the model-init stream: bottom, then middle, then head.
    pub fn init(spec: &ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let bottom = Segment::init(&spec.bottom_specs(), rng)?;
        let middle = Segment::init(&spec.middle_specs(), rng)?;
        let head = Segment::init(&spec.head_specs(), rng)?;
        SplitModel::new(bottom, middle, head)
    }

    /// Flattened activation dimension at the bottom/middle boundary.
    pub fn split_dim(&self) -> usize {
        self.bottom.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.bottom.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let a = self.bottom.apply(x)?;
        let s = self.middle.apply(&a)?;
        self.head.apply(&s)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.bottom.is_finite() && self.middle.is_finite() && self.head.is_finite()
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    },
                )
                .0
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax − onehot)/batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if batch == 0 {
        return Err(Error::invalid("softmax_xent on an empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - log_z).exp() / batch as f64;
        }
        g[y] -= 1.0 / batch as f64;
    }
    let loss = loss / batch as f64;
    if !loss.is_finite() {
        return Err(Error::numerical("cross-entropy loss is not finite"));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::StreamLabel;

    fn single(weights: Matrix, act: Activation) -> Segment {
        let spec = LayerSpec::new(weights.rows(), weights.cols(), act);
        let bias = Matrix::zeros(1, weights.cols());
        Segment::new(vec![Layer::from_parts(spec, weights, bias).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let seg = single(Matrix::identity(3), Activation::Identity);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).unwrap();
        let (y, tape) = seg.forward(&x).unwrap();
        assert_eq!(y, x);
        let up = Matrix::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.0]]).unwrap();
        let (dx, _) = seg.backward(&tape, &up).unwrap();
        assert_eq!(dx, up);
    }

    #[test]
    fn relu_on_negative_preactivations_is_zero() {
        let seg = single(Matrix::identity(2), Activation::Relu);
        let x = Matrix::from_rows(&[[-1.0, -0.5]]).unwrap();
        assert_eq!(seg.apply(&x).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn hand_multiplied_preactivation() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let seg = single(w, Activation::Identity);
        let (y, _) = seg.forward(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let seg = single(Matrix::identity(2), Activation::Relu);
        assert!(matches!(
            seg.forward(&Matrix::zeros(1, 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new(5, StreamLabel::ModelInit);
        let specs = [
            LayerSpec::new(4, 6, Activation::Relu),
            LayerSpec::new(6, 3, Activation::Identity),
        ];
        let seg = Segment::init(&specs, &mut rng).unwrap();
        let x = gaussian_matrix(&mut rng, 5, 4).unwrap();
        let (_, tape) = seg.forward(&x).unwrap();
        let (dx, grads) = seg.backward(&tape, &Matrix::zeros(5, 3)).unwrap();
        assert_eq!(dx, Matrix::zeros(5, 4));
        assert!(grads.is_zero());
    }

    #[test]
    fn mismatched_tape_is_invalid_state() {
        let mut rng = RngStream::new(5, StreamLabel::ModelInit);
        let a = Segment::init(&[LayerSpec::new(2, 2, Activation::Relu)], &mut rng).unwrap();
        let b = Segment::init(
            &[
                LayerSpec::new(2, 2, Activation::Relu),
                LayerSpec::new(2, 2, Activation::Relu),
            ],
            &mut rng,
        )
        .unwrap();
        let (_, tape) = b.forward(&Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(
            a.backward(&tape, &Matrix::zeros(1, 2)),
            Err(Error::InvalidState(_))
        ));
        let (_, tape) = a.forward(&Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(
            a.backward(&tape, &Matrix::zeros(2, 2)),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, _) = softmax_xent(&Matrix::zeros(2, 5), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);

        let (loss, grad) = softmax_xent(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((loss - 0.31326).abs() < 1e-5);
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((grad[(0, 0)] - (p0 - 1.0)).abs() < 1e-15);

        let (loss, _) = softmax_xent(&Matrix::from_rows(&[[500.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!(loss < 1e-200);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(softmax_xent(&Matrix::zeros(0, 3), &[]).is_err());
        assert!(softmax_xent(&Matrix::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let spec = ModelSpec {
            input_dim: 5,
            bottom: vec![8, 8],
            middle: vec![8],
            n_classes: 3,
        };
        let m1 = SplitModel::init(&spec, &mut RngStream::new(1, StreamLabel::ModelInit)).unwrap();
        let m2 = SplitModel::init(&spec, &mut RngStream::new(1, StreamLabel::ModelInit)).unwrap();
        assert_eq!(m1, m2);
        let x = gaussian_matrix(&mut RngStream::new(2, StreamLabel::Data), 7, 5).unwrap();
        assert_eq!(m1.logits(&x).unwrap(), m2.logits(&x).unwrap());
    }

    #[test]
    fn averaging() {
        let a = single(Matrix::filled(1, 1, 0.0), Activation::Identity);
        let b = single(Matrix::filled(1, 1, 4.0), Activation::Identity);
        let avg = Segment::weighted_average(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(avg.layers()[0].weights[(0, 0)], 3.0);
        let other = single(Matrix::filled(2, 1, 0.0), Activation::Identity);
        assert!(Segment::weighted_average(&[&a, &other], &[1.0, 1.0]).is_err());
    }
}
