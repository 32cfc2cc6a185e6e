mod common;

use std::fs;

use rpr_core::data::{load_idx, mnist_paths, write_idx_images, write_idx_labels, Split};
use rpr_core::Error;

fn pair(dir: &std::path::Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let images = dir.join("img");
    let labels = dir.join("lbl");
    let pixels: Vec<u8> = (0..n * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
    write_idx_images(&images, n, 4, 3, &pixels).unwrap();
    write_idx_labels(&labels, &(0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>()).unwrap();
    (images, labels)
}

fn format_offset(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn round_trip_scales_pixels_to_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = pair(dir.path(), 5);
    let data = load_idx(&images, &labels, Split::Train).unwrap();
    assert_eq!(data.len(), 5);
    assert_eq!(data.sample_shape(), &[1, 4, 3]);
    assert_eq!(data.labels, vec![0, 1, 2, 3, 4]);
    assert_eq!(data.images.data()[1], 37.0 / 255.0);
    assert!(data.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn zero_records_give_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = pair(dir.path(), 0);
    let data = load_idx(&images, &labels, Split::Test).unwrap();
    assert!(data.is_empty());
}

#[test]
fn labels_with_the_image_magic_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = pair(dir.path(), 3);
    let mut bytes = fs::read(&labels).unwrap();
    bytes[3] = 0x03;
    fs::write(&labels, bytes).unwrap();
    let err = load_idx(&images, &labels, Split::Train).unwrap_err();
    assert!(err.to_string().contains("offset 0"), "{err}");
    assert_eq!(format_offset(err), 0);
}

#[test]
fn truncated_payload_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = pair(dir.path(), 3);
    let bytes = fs::read(&images).unwrap();
    fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
    let err = load_idx(&images, &labels, Split::Train).unwrap_err();
    assert_eq!(format_offset(err), (bytes.len() - 5) as u64);
}

#[test]
fn truncated_header_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = pair(dir.path(), 3);
    let bytes = fs::read(&images).unwrap();
    fs::write(&images, &bytes[..10]).unwrap();
    assert_eq!(format_offset(load_idx(&images, &labels, Split::Train).unwrap_err()), 8);
}

#[test]
fn count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = pair(dir.path(), 3);
    let labels = dir.path().join("short");
    write_idx_labels(&labels, &[1, 2]).unwrap();
    let err = load_idx(&images, &labels, Split::Train).unwrap_err();
    assert_eq!(format_offset(err), 4);
}

#[test]
fn canonical_mnist_headers() {
    let dir = common::mnist_dir();
    let (images, labels) = mnist_paths(&dir, Split::Train);
    if !images.exists() {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        return;
    }
    let data = load_idx(&images, &labels, Split::Train).unwrap();
    assert_eq!(data.images.shape(), &[60000, 1, 28, 28]);
    assert_eq!(data.num_classes, 10);
}
