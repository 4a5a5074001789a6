#![allow(dead_code)]

use gradmark::attacks::{attack_penalty, SubspaceEstimate};
use gradmark::harness::ExperimentConfig;
use gradmark::linalg::{gaussian_matrix, orthonormal_columns, Matrix, RngStream, StreamLabel};
use gradmark::nn::{softmax_xent, ModelSpec, SplitModel};
use gradmark::watermark::{keygen, wm_loss, wm_loss_and_gradient};

pub const H: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`, where the floor is
/// 1e-3 of the largest magnitude so near-zero entries are judged absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamLabel::Attack).derive(0xfd)
}

fn params(model: &SplitModel) -> Vec<f64> {
    [&model.bottom, &model.middle, &model.head]
        .iter()
        .flat_map(|s| s.tensors().into_iter().flat_map(|t| t.as_slice().to_vec()))
        .collect()
}

fn with_params(model: &SplitModel, values: &[f64]) -> SplitModel {
    let mut m = model.clone();
    let mut it = values.iter();
    for seg in [&mut m.bottom, &mut m.middle, &mut m.head] {
        for t in seg.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = *it.next().unwrap();
            }
        }
    }
    m
}

fn loss(model: &SplitModel, x: &Matrix, y: &[usize]) -> f64 {
    softmax_xent(&model.logits(x).unwrap(), y).unwrap().0
}

/// Loss gradient of the composed model with respect to every parameter and
/// to the input, by chaining each segment's backward pass.
fn analytic(model: &SplitModel, x: &Matrix, y: &[usize]) -> (Vec<f64>, Matrix) {
    let (a, tb) = model.bottom.forward(x).unwrap();
    let (s, tm) = model.middle.forward(&a).unwrap();
    let (logits, th) = model.head.forward(&s).unwrap();
    let (_, g) = softmax_xent(&logits, y).unwrap();
    let (g_s, gh) = model.head.backward(&th, &g).unwrap();
    let (g_a, gm) = model.middle.backward(&tm, &g_s).unwrap();
    let (g_x, gb) = model.bottom.backward(&tb, &g_a).unwrap();
    let flat = [gb, gm, gh]
        .iter()
        .flat_map(|g| g.tensors().into_iter().flat_map(|t| t.as_slice().to_vec()))
        .collect();
    (flat, g_x)
}

/// Worst relative error over the parameter and input gradients of a random
/// small split network.
pub fn network_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = ModelSpec {
        input_dim: 5,
        bottom: vec![7, 6],
        middle: vec![5],
        n_classes: 3,
    };
    let mut model = SplitModel::init(&spec, &mut r).unwrap();
    // Zero biases put dead samples exactly on a ReLU kink.
    for seg in [&mut model.bottom, &mut model.middle, &mut model.head] {
        for layer in seg.layers_mut() {
            let n = layer.bias.len();
            layer.bias = Matrix::from_vec(1, n, r.normal_vec(n)).unwrap().scale(0.1);
        }
    }
    let x = gaussian_matrix(&mut r, 4, 5).unwrap();
    let y: Vec<usize> = (0..4).map(|_| r.index(3)).collect();
    let (g_params, g_x) = analytic(&model, &x, &y);
    let fd_params = central_difference(|p| loss(&with_params(&model, p), &x, &y), &params(&model), H);
    let fd_x = central_difference(
        |v| loss(&model, &Matrix::from_vec(4, 5, v.to_vec()).unwrap(), &y),
        x.as_slice(),
        H,
    );
    max_relative_error(&g_params, &fd_params).max(max_relative_error(g_x.as_slice(), &fd_x))
}

/// Watermark loss gradient against central differences.
pub fn wm_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let key = keygen(&mut r, 32, 8).unwrap();
    let a = gaussian_matrix(&mut r, 4, 32).unwrap();
    let (_, g) = wm_loss_and_gradient(&a, &key).unwrap();
    let fd = central_difference(
        |v| wm_loss(&Matrix::from_vec(4, 32, v.to_vec()).unwrap(), &key).unwrap(),
        a.as_slice(),
        H,
    );
    max_relative_error(g.as_slice(), &fd)
}

/// Subspace penalty gradient against central differences.
pub fn attack_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = 12;
    let est = SubspaceEstimate {
        v_main: orthonormal_columns(&gaussian_matrix(&mut r, d, 2).unwrap()),
        v_wm: orthonormal_columns(&gaussian_matrix(&mut r, d, 3).unwrap()),
        weights: (0..3).map(|_| 0.1 + r.uniform()).collect(),
    };
    let a = gaussian_matrix(&mut r, 5, d).unwrap();
    let (_, g) = attack_penalty(&a, &est).unwrap();
    let fd = central_difference(
        |v| {
            attack_penalty(&Matrix::from_vec(5, d, v.to_vec()).unwrap(), &est)
                .unwrap()
                .0
        },
        a.as_slice(),
        H,
    );
    max_relative_error(g.as_slice(), &fd)
}

/// A run small enough for debug-speed integration tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_per_class = 20;
    cfg.data.n_classes = 3;
    cfg.data.input_dim = 6;
    cfg.data.test_per_class = 10;
    cfg.partition.n_clients = 3;
    cfg.model.bottom = vec![10, 8];
    cfg.model.middle = vec![8];
    cfg.protocol.rounds = 3;
    cfg.protocol.batch_size = 8;
    cfg.protocol.probe_samples = 16;
    cfg.embed.k = 4;
    cfg.verify.samples = 32;
    cfg
}
