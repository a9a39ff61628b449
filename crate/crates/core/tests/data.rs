mod common;

use std::io::Write;

use fsl_core::data::{
    batches, gen_gaussian_blobs, label_entropy, load_csv, load_idx, partition_iid,
    partition_label_skew, MinMaxScaler,
};
use fsl_core::data::idx::encode_idx;
use fsl_core::Error;

#[test]
fn default_blobs_are_linearly_separable() {
    let train = gen_gaussian_blobs(6000, 3, 8, 10.0, 1).unwrap();
    let test = gen_gaussian_blobs(2000, 3, 8, 10.0, 2).unwrap();
    let model = common::logistic_regression(&train, 200, 0.5);
    assert_eq!(common::linear_accuracy(&model, &train), 1.0);
    assert_eq!(common::linear_accuracy(&model, &test), 1.0);
}

#[test]
fn blobs_are_balanced_and_seeded() {
    let a = gen_gaussian_blobs(300, 3, 4, 5.0, 9).unwrap();
    assert_eq!(a.class_counts(), vec![100, 100, 100]);
    assert_eq!(a, gen_gaussian_blobs(300, 3, 4, 5.0, 9).unwrap());
    assert_ne!(a, gen_gaussian_blobs(300, 3, 4, 5.0, 10).unwrap());
}

#[test]
fn csv_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "a,b,label\n0.5,1.0,1\n-2,3.25,0\n1,1,2").unwrap();
    let ds = load_csv(&path).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.num_classes(), 3);
    assert_eq!(ds.labels(), &[1, 0, 2]);
    assert_eq!(ds.inputs().data(), &[0.5, 1.0, -2.0, 3.25, 1.0, 1.0]);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,label\nx,1\n").unwrap();
    assert!(load_csv(&bad).is_err());
}

#[test]
fn idx_files_load_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    std::fs::write(&img, encode_idx(&[2, 2, 2], &[0, 255, 10, 20, 255, 0, 30, 40])).unwrap();
    std::fs::write(&lab, encode_idx(&[2], &[7, 1])).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.example_shape(), &[1, 2, 2]);
    assert_eq!(ds.labels(), &[7, 1]);
    let scaled = MinMaxScaler::fit(&ds).apply(&ds);
    assert_eq!(scaled.inputs().data()[..4], [0.0, 1.0, 0.0, 0.0]);

    std::fs::write(&lab, encode_idx(&[3], &[7, 1, 2])).unwrap();
    assert!(load_idx(&img, &lab).is_err());
}

#[test]
fn iid_partition_covers_everything_once() {
    let ds = gen_gaussian_blobs(103, 4, 2, 3.0, 0).unwrap();
    let p = partition_iid(&ds, 10, 4).unwrap();
    let mut all: Vec<usize> = p.shards().concat();
    all.sort();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    let sizes = p.sizes();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert!(matches!(partition_iid(&ds, 0, 0), Err(Error::Usage(_))));
}

#[test]
fn label_skew_limits_classes() {
    let ds = gen_gaussian_blobs(1000, 10, 2, 3.0, 0).unwrap();
    let uniform = (10f64).ln();
    for seed in 0..20 {
        let p = partition_label_skew(&ds, 10, 2, seed).unwrap();
        for shard in p.shards() {
            let mut classes: Vec<usize> = shard.iter().map(|&i| ds.labels()[i]).collect();
            classes.sort();
            classes.dedup();
            assert!(classes.len() <= 2);
            assert!(label_entropy(&ds, shard) < uniform);
        }
    }
    assert!(matches!(
        partition_label_skew(&ds, 2, 3, 0),
        Err(Error::Config { .. })
    ));
}

#[test]
fn batch_plans_reshuffle_each_epoch() {
    let ds = gen_gaussian_blobs(40, 2, 2, 3.0, 0).unwrap();
    let p = partition_iid(&ds, 2, 0).unwrap();
    let e0 = batches(&p, 1, 6, 0, 3).unwrap();
    let e1 = batches(&p, 1, 6, 1, 3).unwrap();
    assert_eq!(e0.batches.len(), 4);
    assert_eq!(e0.batches.last().unwrap().len(), 2);
    assert_ne!(e0.batches, e1.batches);
    assert_eq!(e0.batches, batches(&p, 1, 6, 0, 3).unwrap().batches);
    let mut seen: Vec<usize> = e1.batches.concat();
    seen.sort();
    let mut shard = p.shard(1).to_vec();
    shard.sort();
    assert_eq!(seen, shard);
}
