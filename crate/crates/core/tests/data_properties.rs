use std::path::PathBuf;

use fedprune::data::{
    generate_synthetic, label_entropy, load_idx, partition, write_idx, Dataset, PartitionPlan, PartitionScheme,
    SyntheticConfig,
};
use proptest::prelude::*;

fn plan(scheme: PartitionScheme, clients: usize, seed: u64) -> PartitionPlan {
    PartitionPlan {
        scheme,
        num_clients: clients,
        train_fraction: 0.8,
        seed,
    }
}

fn scheme(skewed: bool) -> PartitionScheme {
    if skewed {
        PartitionScheme::skewed()
    } else {
        PartitionScheme::Iid
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_are_disjoint_and_exhaustive(seed in any::<u64>(), clients in 1usize..20, skewed in any::<bool>()) {
        let ds = generate_synthetic(&SyntheticConfig::new(1000, 3, 10, seed)).unwrap();
        // Five classes per client need at least two clients to cover ten
        // classes; six makes a covering draw near certain.
        let clients = if skewed { clients.max(6) } else { clients };
        let parts = partition(&ds, &plan(scheme(skewed), clients, seed)).unwrap();
        let mut seen: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.train_indices.iter().chain(&p.test_indices).copied())
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        for p in &parts {
            prop_assert_eq!(p.train.len(), p.train_indices.len());
            for (row, &i) in p.train_indices.iter().enumerate() {
                prop_assert_eq!(p.train.sample(row), ds.sample(i));
                prop_assert_eq!(p.train.labels()[row], ds.labels()[i]);
            }
        }
    }

    #[test]
    fn partitions_are_seed_deterministic(seed in any::<u64>(), skewed in any::<bool>()) {
        let ds = generate_synthetic(&SyntheticConfig::new(600, 2, 10, 3)).unwrap();
        let a = partition(&ds, &plan(scheme(skewed), 10, seed)).unwrap();
        let b = partition(&ds, &plan(scheme(skewed), 10, seed)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.train_indices, &y.train_indices);
            prop_assert_eq!(&x.test_indices, &y.test_indices);
        }
    }
}

#[test]
fn one_skewed_client_cannot_cover_ten_classes() {
    let ds = generate_synthetic(&SyntheticConfig::new(200, 2, 10, 0)).unwrap();
    assert!(partition(&ds, &plan(PartitionScheme::skewed(), 1, 0)).is_err());
}

fn mean_entropy(ds: &Dataset, scheme: PartitionScheme, seed: u64) -> f64 {
    let parts = partition(ds, &plan(scheme, 20, seed)).unwrap();
    let all: Vec<f64> = parts
        .iter()
        .map(|p| {
            let mut idx = p.train_indices.clone();
            idx.extend(&p.test_indices);
            label_entropy(&ds.subset(&idx))
        })
        .collect();
    all.iter().sum::<f64>() / all.len() as f64
}

#[test]
fn skew_lowers_per_client_label_entropy() {
    let ds = generate_synthetic(&SyntheticConfig::new(4000, 4, 10, 2)).unwrap();
    for seed in 0..5 {
        let iid = mean_entropy(&ds, PartitionScheme::Iid, seed);
        let skewed = mean_entropy(&ds, PartitionScheme::skewed(), seed);
        assert!(skewed < iid, "seed {seed}: skewed {skewed} vs iid {iid}");
        // Five equally likely classes cannot exceed ln 5.
        assert!(skewed <= 5f64.ln() + 1e-12);
    }
}

#[test]
fn idx_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    let ds = generate_synthetic(&SyntheticConfig::new(30, 16, 3, 0)).unwrap();
    // Quantise to the 0..=255 grid IDX stores, laid out as 1x4x4 images.
    let pixels: Vec<f64> = ds
        .inputs()
        .data()
        .iter()
        .map(|v| (v.abs().min(1.0) * 255.0).round() / 255.0)
        .collect();
    let images = fedprune::Tensor::new(vec![30, 1, 4, 4], pixels).unwrap();
    let ds = Dataset::new(images, ds.labels().to_vec(), 3).unwrap();
    write_idx(&ds, &img, &lbl).unwrap();
    assert_eq!(load_idx(&img, &lbl).unwrap(), ds);
}

#[test]
fn synthetic_csv_export_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = generate_synthetic(&SyntheticConfig::new(25, 3, 5, 1)).unwrap();
    ds.write_csv(&path).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["label", "f0", "f1", "f2"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 25);
    assert_eq!(rows[7][0].parse::<usize>().unwrap(), ds.labels()[7]);
    assert_eq!(rows[7][2].parse::<f64>().unwrap(), ds.sample(7)[1]);
}

/// Reads real MNIST files when `MNIST_DIR` points at a directory holding
/// `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
#[test]
fn mnist_files_load_when_available() {
    let Some(dir) = std::env::var_os("MNIST_DIR").map(PathBuf::from) else {
        eprintln!("MNIST_DIR not set; skipping");
        return;
    };
    let ds = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 60_000);
    assert_eq!(ds.sample_shape(), [1, 28, 28]);
    assert_eq!(ds.classes(), 10);
    assert!(ds.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
}
