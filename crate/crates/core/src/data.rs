//! Synthetic classification data and federated partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() || inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "dataset needs one label per input row ({} rows, {} labels)",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!("label {bad} >= {n_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Shannon entropy (nats) of the label distribution.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.class_counts()
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    /// Mini-batches over a fresh permutation drawn from `rng`; the last batch may be short.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut RngStream) -> Vec<(Matrix, Vec<usize>)> {
        let order = rng.permutation(self.len());
        order
            .chunks(batch_size.max(1))
            .map(|idx| {
                (
                    self.inputs.select_rows(idx),
                    idx.iter().map(|&i| self.labels[i]).collect(),
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (row, y) in self.inputs.row_iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{v:?},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    pub fn from_csv(text: &str, n_classes: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse_err = |msg: String| Error::Parse {
                line: i + 1,
                message: msg,
            };
            let (label, values) = fields.split_last().ok_or_else(|| parse_err("empty row".into()))?;
            labels.push(
                label
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("bad label `{label}`")))?,
            );
            rows.push(
                values
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| parse_err(format!("bad value `{v}`"))))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        Dataset::new(Matrix::from_rows(&rows)?, labels, n_classes)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path, n_classes: usize) -> Result<Self> {
        Dataset::from_csv(&std::fs::read_to_string(path)?, n_classes)
    }
}

/// Gaussian blobs around cluster centres on a sphere; each class owns
/// `clusters_per_class` centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Standard deviation of each point around its centre.
    pub spread: f64,
    /// Distance of every centre from the origin.
    pub radius: f64,
    #[serde(default = "one")]
    pub clusters_per_class: usize,
}

fn one() -> usize {
    1
}

/// Centres as Gaussian directions scaled to `radius`; row `c·clusters + m`
/// is cluster `m` of class `c`.
pub fn blob_centres(rng: &mut RngStream, spec: &BlobSpec) -> Result<Matrix> {
    validate_blobs(spec)?;
    let n = spec.n_classes * spec.clusters_per_class;
    let mut centres = Matrix::zeros(n, spec.input_dim);
    for c in 0..n {
        let dir = crate::linalg::random_unit_vector(rng, spec.input_dim);
        for (x, d) in centres.row_mut(c).iter_mut().zip(dir) {
            *x = d * spec.radius;
        }
    }
    Ok(centres)
}

fn validate_blobs(spec: &BlobSpec) -> Result<()> {
    if spec.n_per_class == 0 || spec.n_classes == 0 || spec.input_dim == 0 || spec.clusters_per_class == 0 {
        return Err(Error::invalid("blob counts and dimension must be at least 1"));
    }
    if !(spec.spread >= 0.0 && spec.radius >= 0.0) {
        return Err(Error::invalid("blob spread and radius must be non-negative"));
    }
    Ok(())
}

/// `n_per_class` points per class, class-major order, cycling through the
/// class's clusters.
pub fn sample_blobs(
    rng: &mut RngStream,
    centres: &Matrix,
    n_classes: usize,
    n_per_class: usize,
    spread: f64,
) -> Result<Dataset> {
    let (n_centres, dim) = centres.shape();
    if n_classes == 0 || n_centres % n_classes != 0 {
        return Err(Error::invalid(format!(
            "{n_centres} centres cannot be split evenly over {n_classes} classes"
        )));
    }
    let clusters = n_centres / n_classes;
    let mut inputs = Matrix::zeros(n_classes * n_per_class, dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        for i in 0..n_per_class {
            let centre = centres.row(c * clusters + i % clusters);
            let row = inputs.row_mut(c * n_per_class + i);
            for (x, &m) in row.iter_mut().zip(centre) {
                *x = m + spread * rng.standard_normal();
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, n_classes)
}

pub fn make_blobs(rng: &mut RngStream, spec: &BlobSpec) -> Result<Dataset> {
    let centres = blob_centres(rng, spec)?;
    sample_blobs(rng, &centres, spec.n_classes, spec.n_per_class, spec.spread)
}

/// Training set plus a held-out test set drawn around the same centres.
pub fn make_blobs_with_test(rng: &mut RngStream, spec: &BlobSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let centres = blob_centres(rng, spec)?;
    let train = sample_blobs(rng, &centres, spec.n_classes, spec.n_per_class, spec.spread)?;
    let test = sample_blobs(rng, &centres, spec.n_classes, test_per_class.max(1), spec.spread)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PartitionMode {
    /// Seeded shuffle, grouped by class, dealt round-robin.
    Iid,
    /// Per-class client proportions drawn from `Dir(beta)`.
    Dirichlet { beta: f64 },
    /// Shard sizes proportional to `LogNormal(0, sigma)` draws, class-stratified.
    Unbalanced { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

const MAX_REDRAWS: usize = 100;

/// Disjoint index sets covering `0..ds.len()`, one per client.
pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    if spec.n_clients == 0 || spec.n_clients > n {
        return Err(Error::invalid(format!(
            "cannot split {n} samples across {} clients",
            spec.n_clients
        )));
    }
    let mut rng = RngStream::new(spec.seed, crate::linalg::StreamLabel::Data).derive(0x7061_7274);
    match spec.mode {
        PartitionMode::Iid => {
            let mut order = rng.permutation(n);
            order.sort_by_key(|&i| ds.labels[i]);
            let mut shards = vec![Vec::new(); spec.n_clients];
            for (pos, idx) in order.into_iter().enumerate() {
                shards[pos % spec.n_clients].push(idx);
            }
            Ok(shards)
        }
        PartitionMode::Dirichlet { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::invalid("dirichlet beta must be positive"));
            }
            redraw(|| dirichlet_draw(ds, spec.n_clients, beta, &mut rng))
        }
        PartitionMode::Unbalanced { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid("log-normal sigma must be non-negative"));
            }
            redraw(|| lognormal_draw(ds, spec.n_clients, sigma, &mut rng))
        }
    }
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds, spec)?.iter().map(|idx| ds.subset(idx)).collect())
}

fn redraw(mut draw: impl FnMut() -> Result<Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
    for _ in 0..MAX_REDRAWS {
        let shards = draw()?;
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::invalid(format!(
        "partition left a client empty after {MAX_REDRAWS} draws"
    )))
}

fn indices_by_class(ds: &Dataset, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for idx in &mut by_class {
        rng.shuffle(idx);
    }
    by_class
}

fn smallest(shards: &[Vec<usize>]) -> usize {
    shards
        .iter()
        .enumerate()
        .min_by_key(|(i, s)| (s.len(), *i))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn dirichlet(rng: &mut RngStream, n: usize, beta: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

fn dirichlet_draw(ds: &Dataset, n_clients: usize, beta: f64, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    let mut shards = vec![Vec::new(); n_clients];
    for class_idx in indices_by_class(ds, rng) {
        let props = dirichlet(rng, n_clients, beta)?;
        let n_c = class_idx.len();
        let mut cursor = 0;
        for (client, p) in props.iter().enumerate() {
            let take = ((p * n_c as f64).floor() as usize).min(n_c - cursor);
            shards[client].extend_from_slice(&class_idx[cursor..cursor + take]);
            cursor += take;
        }
        for &idx in &class_idx[cursor..] {
            let target = smallest(&shards);
            shards[target].push(idx);
        }
    }
    Ok(shards)
}

fn lognormal_draw(ds: &Dataset, n_clients: usize, sigma: f64, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    let weights: Vec<f64> = (0..n_clients).map(|_| (sigma * rng.standard_normal()).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| (w / total * n as f64).floor() as usize)
        .collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    while leftover > 0 {
        let target = sizes
            .iter()
            .enumerate()
            .min_by_key(|(i, s)| (**s, *i))
            .map(|(i, _)| i)
            .unwrap_or(0);
        sizes[target] += 1;
        leftover -= 1;
    }

    // Interleave classes so that every contiguous run is close to the global class mix.
    let by_class = indices_by_class(ds, rng);
    let mut interleaved = Vec::with_capacity(n);
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    for pos in 0..longest {
        for class_idx in &by_class {
            if let Some(&i) = class_idx.get(pos) {
                interleaved.push(i);
            }
        }
    }

    let mut shards = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for size in sizes {
        shards.push(interleaved[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::StreamLabel;

    fn blobs(seed: u64, n_per_class: usize, n_classes: usize) -> Dataset {
        let spec = BlobSpec {
            n_per_class,
            n_classes,
            input_dim: 4,
            spread: 0.5,
            radius: 3.0,
            clusters_per_class: 1,
        };
        make_blobs(&mut RngStream::new(seed, StreamLabel::Data), &spec).unwrap()
    }

    fn assert_disjoint_cover(shards: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn zero_spread_collapses_to_centres() {
        let spec = BlobSpec {
            n_per_class: 5,
            n_classes: 3,
            input_dim: 6,
            spread: 0.0,
            radius: 2.0,
            clusters_per_class: 2,
        };
        let ds = make_blobs(&mut RngStream::new(1, StreamLabel::Data), &spec).unwrap();
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.inputs.row(i))
                .collect();
            assert!(rows.chunks(2).all(|w| w.len() < 2 || w[0] != w[1]));
            assert!(rows.windows(3).all(|w| w[0] == w[2]));
            let r = crate::linalg::norm(rows[0]);
            assert!((r - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(blobs(3, 10, 4), blobs(3, 10, 4));
        assert_ne!(blobs(3, 10, 4), blobs(4, 10, 4));
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = blobs(1, 20, 3);
        for mode in [
            PartitionMode::Iid,
            PartitionMode::Dirichlet { beta: 0.5 },
            PartitionMode::Unbalanced { sigma: 1.0 },
        ] {
            let shards = partition_indices(
                &ds,
                &PartitionSpec {
                    n_clients: 1,
                    mode,
                    seed: 2,
                },
            )
            .unwrap();
            assert_eq!(shards.len(), 1);
            assert_disjoint_cover(&shards, ds.len());
        }
    }

    #[test]
    fn iid_shards_are_even_and_mixed() {
        let ds = blobs(2, 100, 10);
        let spec = PartitionSpec {
            n_clients: 10,
            mode: PartitionMode::Iid,
            seed: 5,
        };
        for shard in partition(&ds, &spec).unwrap() {
            assert_eq!(shard.len(), 100);
            for c in shard.class_counts() {
                assert!((8..=12).contains(&c), "class count {c}");
            }
        }
    }

    #[test]
    fn strong_dirichlet_skew_concentrates_classes() {
        let ds = blobs(2, 100, 10);
        let spec = PartitionSpec {
            n_clients: 10,
            mode: PartitionMode::Dirichlet { beta: 0.1 },
            seed: 17,
        };
        let shards = partition(&ds, &spec).unwrap();
        let concentrated = shards.iter().any(|s| {
            let mut counts = s.class_counts();
            counts.sort_unstable_by(|a, b| b.cmp(a));
            (counts[0] + counts[1]) as f64 >= 0.8 * s.len() as f64
        });
        assert!(concentrated);
    }

    #[test]
    fn every_mode_is_a_disjoint_cover() {
        let ds = blobs(8, 37, 5);
        for seed in 0..10 {
            for mode in [
                PartitionMode::Iid,
                PartitionMode::Dirichlet { beta: 0.1 },
                PartitionMode::Dirichlet { beta: 1.0 },
                PartitionMode::Unbalanced { sigma: 0.5 },
                PartitionMode::Unbalanced { sigma: 2.0 },
            ] {
                let shards = partition_indices(
                    &ds,
                    &PartitionSpec {
                        n_clients: 7,
                        mode,
                        seed,
                    },
                )
                .unwrap();
                assert_eq!(shards.len(), 7);
                assert!(shards.iter().all(|s| !s.is_empty()));
                assert_disjoint_cover(&shards, ds.len());
            }
        }
    }

    #[test]
    fn too_many_clients_rejected() {
        let ds = blobs(1, 2, 2);
        let spec = PartitionSpec {
            n_clients: 5,
            mode: PartitionMode::Iid,
            seed: 0,
        };
        assert!(partition(&ds, &spec).is_err());
    }

    #[test]
    fn degenerate_draw_errors_out() {
        // 10 samples over 10 clients with extreme skew cannot avoid empty clients
        let ds = blobs(1, 1, 10);
        let spec = PartitionSpec {
            n_clients: 10,
            mode: PartitionMode::Unbalanced { sigma: 50.0 },
            seed: 0,
        };
        assert!(partition(&ds, &spec).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let ds = blobs(4, 3, 2);
        assert_eq!(Dataset::from_csv(&ds.to_csv(), 2).unwrap(), ds);
        assert!(matches!(
            Dataset::from_csv("1.0,2.0,x\n", 2),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
