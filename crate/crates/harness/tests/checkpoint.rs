use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskmerge_core::model::{init_params, Activation, ModelSpec, ParamVector};
use taskmerge_harness::checkpoint::*;

fn model() -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        hidden_dims: vec![4, 3],
        num_classes: 6,
        activation: Activation::Tanh,
    }
}

/// Parameters that are exactly representable in f32.
fn theta(seed: u64) -> ParamVector {
    let spec = model();
    let t = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let values = t.values().iter().map(|&v| f64::from(v as f32)).collect();
    t.with_values(values).unwrap()
}

#[test]
fn file_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/dir/model.ckpt");
    let t = theta(1);
    save_checkpoint(&model(), &t, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model, model());
    assert_eq!(back.theta, t);
    assert_eq!(
        std::fs::read(&path).unwrap(),
        encode(&back.model, &back.theta)
    );
}

#[test]
fn every_payload_byte_is_covered_by_the_checksum() {
    let bytes = encode(&model(), &theta(2));
    let payload_end = bytes.len() - 4;
    let payload_start = payload_end - 4 * model().num_params();
    for i in payload_start..payload_end {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        match decode(&bad) {
            Err(CheckpointError::Checksum { stored, computed }) => assert_ne!(stored, computed),
            other => panic!("byte {i}: {other:?}"),
        }
    }
}

#[test]
fn rejects_other_versions() {
    let mut bytes = encode(&model(), &theta(3));
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match decode(&bytes) {
        Err(CheckpointError::Version { found, expected }) => {
            assert_eq!((found, expected), (VERSION + 1, VERSION))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn rejects_bad_magic_truncation_and_trailing_bytes() {
    let bytes = encode(&model(), &theta(4));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode(&bad),
        Err(CheckpointError::BadMagic { .. })
    ));
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(CheckpointError::Malformed(_))));
}

#[test]
fn rejects_layout_that_disagrees_with_model() {
    let other = ModelSpec {
        hidden_dims: vec![4, 4],
        ..model()
    };
    let t = init_params(&other, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(
        save_checkpoint(&model(), &t, std::path::Path::new("unused")),
        Err(CheckpointError::Malformed(_))
    ));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.ckpt");
    match load_checkpoint(&path) {
        Err(CheckpointError::Io { path: p, .. }) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn encode_decode_roundtrip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let spec = ModelSpec { input_dim: 3, hidden_dims: hidden, num_classes: 2, activation: Activation::Relu };
        let t = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let t = t.with_values(t.values().iter().map(|&v| f64::from(v as f32)).collect()).unwrap();
        let back = decode(&encode(&spec, &t)).unwrap();
        prop_assert_eq!(back.model, spec);
        prop_assert_eq!(back.theta, t);
    }
}
