//! File formats through the public API: IDX, CSV, checkpoints, stores.

use std::fs;

use rotq::dataset::{
    read_csv_set, read_idx_images, read_idx_labels, write_csv_set, LabeledImageSet,
};
use rotq::featstore::{extract_features, FeatureStore, NormMode};
use rotq::nn::{load_model, save_model, CnnModel};
use rotq::Tensor;

fn idx_images(n: u32, side: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, side, side] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn ramp_set(n: usize) -> LabeledImageSet {
    let data = (0..n * 784)
        .map(|i| ((i * 31) % 256) as f64 / 255.0)
        .collect();
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    LabeledImageSet::new(
        Tensor::new(vec![n, 1, 28, 28], data).unwrap(),
        labels,
        "ramp",
    )
    .unwrap()
}

#[test]
fn idx_files_scale_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    fs::write(&ip, idx_images(2, 28, &pixels)).unwrap();
    fs::write(&lp, idx_labels(&[3, 9])).unwrap();
    let t = read_idx_images(&ip).unwrap();
    assert_eq!(t.shape(), &[2, 1, 28, 28]);
    assert_eq!(t.data()[255], 1.0);
    assert_eq!(t.data()[0], 0.0);
    assert_eq!(read_idx_labels(&lp).unwrap(), vec![3, 9]);
    let set = LabeledImageSet::from_idx(&ip, &lp).unwrap();
    assert_eq!(set.len(), 2);

    fs::write(&lp, idx_labels(&[3])).unwrap();
    assert!(LabeledImageSet::from_idx(&ip, &lp).is_err());
    fs::write(&ip, &idx_images(2, 28, &pixels)[..100]).unwrap();
    assert!(read_idx_images(&ip).unwrap_err().is_data_format());
}

#[test]
fn csv_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let set = ramp_set(12);
    let p = dir.path().join("d.csv");
    write_csv_set(&set, &p).unwrap();
    let back = read_csv_set(&p).unwrap();
    assert_eq!(back.labels(), set.labels());
    assert_eq!(back.images().data(), set.images().data());
}

#[test]
fn checkpoint_and_store_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = CnnModel::digit(4);
    let mp = dir.path().join("m.rqm");
    save_model(&model, &mp).unwrap();
    let loaded = load_model(&mp).unwrap();
    let set = ramp_set(5);
    assert_eq!(
        model.forward(set.images()).unwrap().scores.data(),
        loaded.forward(set.images()).unwrap().scores.data()
    );

    for norm in [NormMode::Raw, NormMode::UnitL2] {
        let store = extract_features(&loaded, &set, norm).unwrap();
        let sp = dir.path().join(format!("s-{}.rqf", norm.name()));
        store.save(&sp).unwrap();
        let again = FeatureStore::load(&sp).unwrap();
        assert_eq!(again.features(), store.features());
        assert_eq!(again.labels(), store.labels());
        assert_eq!(again.norm_mode(), norm);
        let bytes = fs::read(&sp).unwrap();
        assert_eq!(&bytes[..4], b"RQF1");
        fs::write(&sp, &bytes[..bytes.len() - 1]).unwrap();
        assert!(FeatureStore::load(&sp).unwrap_err().is_data_format());
    }

    let mut bytes = fs::read(&mp).unwrap();
    bytes[0] = b'X';
    fs::write(&mp, &bytes).unwrap();
    assert!(load_model(&mp).unwrap_err().is_data_format());
}
