use gradmark::data::{make_blobs, partition, BlobSpec, Dataset, PartitionMode, PartitionSpec};
use gradmark::linalg::{RngStream, StreamLabel};

fn blobs(seed: u64, n_per_class: usize, n_classes: usize, input_dim: usize, spread: f64) -> Dataset {
    let spec = BlobSpec {
        n_per_class,
        n_classes,
        input_dim,
        spread,
        radius: 3.0,
        clusters_per_class: 1,
    };
    make_blobs(&mut RngStream::new(seed, StreamLabel::Data), &spec).unwrap()
}

/// Rosenblatt perceptron on {-1, +1} targets; returns the number of epochs
/// needed to reach zero training errors.
fn perceptron_epochs(ds: &Dataset, max_epochs: usize) -> Option<usize> {
    let d = ds.input_dim();
    let mut w = vec![0.0; d + 1];
    for epoch in 1..=max_epochs {
        let mut errors = 0;
        for (row, &label) in ds.inputs.row_iter().zip(&ds.labels) {
            let target = if label == 1 { 1.0 } else { -1.0 };
            let score: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + w[d];
            if score * target <= 0.0 {
                errors += 1;
                for (wi, xi) in w.iter_mut().zip(row) {
                    *wi += target * xi;
                }
                w[d] += target;
            }
        }
        if errors == 0 {
            return Some(epoch);
        }
    }
    None
}

#[test]
fn tight_two_class_blobs_are_linearly_separable() {
    for seed in 0..5 {
        let ds = blobs(seed, 100, 2, 16, 0.1);
        assert!(perceptron_epochs(&ds, 1000).is_some(), "seed {seed}");
    }
}

fn mean_entropy(mode: PartitionMode, seed: u64) -> f64 {
    let ds = blobs(seed, 100, 10, 4, 1.0);
    let shards = partition(
        &ds,
        &PartitionSpec {
            n_clients: 10,
            mode,
            seed,
        },
    )
    .unwrap();
    shards.iter().map(Dataset::label_entropy).sum::<f64>() / shards.len() as f64
}

#[test]
fn label_skew_grows_as_beta_shrinks() {
    let seeds = 0..20u64;
    let avg = |mode: PartitionMode| seeds.clone().map(|s| mean_entropy(mode, s)).sum::<f64>() / 20.0;
    let sharp = avg(PartitionMode::Dirichlet { beta: 0.1 });
    let mild = avg(PartitionMode::Dirichlet { beta: 1.0 });
    let iid = avg(PartitionMode::Iid);
    assert!(sharp < mild && mild < iid, "{sharp} {mild} {iid}");
    assert!((iid - 10f64.ln()).abs() < 1e-9);
}

#[test]
fn unbalanced_shards_keep_class_mix() {
    let ds = blobs(7, 100, 10, 4, 1.0);
    let shards = partition(
        &ds,
        &PartitionSpec {
            n_clients: 5,
            mode: PartitionMode::Unbalanced { sigma: 1.0 },
            seed: 7,
        },
    )
    .unwrap();
    let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 1000);
    assert!(sizes.iter().max() > sizes.iter().min());
    for s in shards.iter().filter(|s| s.len() >= 100) {
        assert!(s.class_counts().iter().all(|&c| c > 0), "{:?}", s.class_counts());
    }
}

#[test]
fn csv_dump_survives_disk() {
    let ds = blobs(3, 5, 3, 4, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    ds.save_csv(&path).unwrap();
    let back = Dataset::load_csv(&path, 3).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.inputs, ds.inputs);
}
