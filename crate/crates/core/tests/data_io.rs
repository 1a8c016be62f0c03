use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sqtrain::data::{
    batch_iterator, epoch_order, load_cifar10_batch, load_idx, read_idx_images, DatasetKind, Normalization, Split,
};
use sqtrain::Error;

fn idx_images(n: usize, rows: usize, cols: usize, pixel: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for i in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                out.push(pixel(i, r, c));
            }
        }
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn write_pair(dir: &Path, prefix: &str, n: usize, rows: usize, cols: usize) {
    let pix = |i: usize, r: usize, c: usize| ((i * 31 + r * 7 + c) % 256) as u8;
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(n, rows, cols, pix)).unwrap();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
}

#[test]
fn idx_round_trip_keeps_pixel_positions() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "train", 5, 3, 4);
    let ds = load_idx(
        &tmp.path().join("train-images-idx3-ubyte"),
        &tmp.path().join("train-labels-idx1-ubyte"),
        Split::Train,
    )
    .unwrap();
    assert_eq!(ds.images.shape(), &[5, 1, 3, 4]);
    assert_eq!(ds.labels, vec![0, 1, 2, 3, 4]);
    for i in 0..5 {
        for r in 0..3 {
            for c in 0..4 {
                let want = ((i * 31 + r * 7 + c) % 256) as f64 / 255.0;
                assert_eq!(ds.images.data()[(i * 3 + r) * 4 + c], want);
            }
        }
    }
}

#[test]
fn mnist_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "train", 20, 28, 28);
    write_pair(tmp.path(), "t10k", 10, 28, 28);
    let (train, test) = DatasetKind::Mnist.load(tmp.path()).unwrap();
    assert_eq!((train.len(), test.len()), (20, 10));
    assert_eq!(train.split, Split::Train);
    assert_eq!(test.split, Split::Test);
    assert!(matches!(DatasetKind::Mnist.load(&tmp.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn damaged_idx_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("x");
    let mut bytes = idx_images(3, 2, 2, |_, _, _| 9);
    bytes.pop();
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_idx_images(&p), Err(Error::Corruption(_))));
    fs::write(&p, idx_labels(&[1, 2])).unwrap();
    assert!(matches!(read_idx_images(&p), Err(Error::Format(_))));
    fs::write(&p, [0, 0]).unwrap();
    assert!(matches!(read_idx_images(&p), Err(Error::Corruption(_))));

    let img = tmp.path().join("img");
    let lab = tmp.path().join("lab");
    fs::write(&img, idx_images(3, 2, 2, |_, _, _| 0)).unwrap();
    fs::write(&lab, idx_labels(&[1, 2])).unwrap();
    assert!(matches!(load_idx(&img, &lab, Split::Train), Err(Error::Corruption(_))));
}

#[test]
fn cifar_records() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("data_batch_1.bin");
    let mut bytes = Vec::new();
    for (label, fill) in [(7u8, 255u8), (2, 51)] {
        bytes.push(label);
        // Red plane, then green, then blue.
        bytes.extend((0..3072).map(|i| if i < 1024 { fill } else { (i / 1024) as u8 }));
    }
    fs::write(&p, &bytes).unwrap();
    let (pixels, labels) = load_cifar10_batch(&p).unwrap();
    assert_eq!(labels, vec![7, 2]);
    assert_eq!(pixels.len(), 2 * 3072);
    assert_eq!(pixels[0], 1.0);
    assert_eq!(pixels[3072], 0.2);
    assert_eq!(pixels[1024], 1.0 / 255.0);
    assert_eq!(pixels[2048], 2.0 / 255.0);
    bytes.pop();
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_cifar10_batch(&p), Err(Error::Corruption(_))));
    // A batch with the wrong record count is rejected when loading a split.
    bytes.push(0);
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(DatasetKind::Cifar10.load(tmp.path()), Err(Error::Corruption(_))));
}

#[test]
fn normalization_uses_training_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    write_pair(tmp.path(), "train", 12, 4, 4);
    write_pair(tmp.path(), "test", 6, 4, 4);
    let load = |p: &str| {
        load_idx(
            &tmp.path().join(format!("{p}-images-idx3-ubyte")),
            &tmp.path().join(format!("{p}-labels-idx1-ubyte")),
            Split::Train,
        )
        .unwrap()
    };
    let (mut train, mut test) = (load("train"), load("test"));
    let norm = Normalization::fit(&train);
    let raw = train.images.data().to_vec();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64;
    assert!((norm.mean[0] - mean).abs() < 1e-12);
    assert!((norm.std[0] - var.sqrt()).abs() < 1e-12);
    let test_raw = test.images.data().to_vec();
    norm.apply(&mut train);
    norm.apply(&mut test);
    let after = train.images.data();
    assert!((after.iter().sum::<f64>() / after.len() as f64).abs() < 1e-12);
    assert!(((test.images.data()[5]) - (test_raw[5] - mean) / var.sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn epoch_order_is_a_seeded_permutation(n in 1usize..300, seed in any::<u64>(), epoch in 0u64..50) {
        let order = epoch_order(n, seed, epoch);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&order, &epoch_order(n, seed, epoch));
        if n > 20 {
            prop_assert_ne!(&order, &epoch_order(n, seed, epoch + 1));
            prop_assert_ne!(&order, &epoch_order(n, seed.wrapping_add(1), epoch));
        }
    }

    #[test]
    fn epoch_batches_drop_the_remainder(n in 1usize..60, b in 1usize..20) {
        prop_assume!(b <= n);
        let tmp = tempfile::tempdir().unwrap();
        write_pair(tmp.path(), "train", n, 2, 2);
        let ds = load_idx(
            &tmp.path().join("train-images-idx3-ubyte"),
            &tmp.path().join("train-labels-idx1-ubyte"),
            Split::Train,
        ).unwrap();
        let batches: Vec<_> = batch_iterator(&ds, b, 3, 0).unwrap().collect();
        prop_assert_eq!(batches.len(), n / b);
        let order = epoch_order(n, 3, 0);
        for (k, batch) in batches.iter().enumerate() {
            prop_assert_eq!(batch.images.shape(), &[b, 1, 2, 2][..]);
            let want: Vec<usize> = order[k * b..(k + 1) * b].iter().map(|&i| ds.labels[i]).collect();
            prop_assert_eq!(&batch.labels, &want);
        }
    }
}
