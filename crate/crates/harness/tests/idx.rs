use std::path::Path;

use proptest::prelude::*;
use taskmerge_harness::idx::*;

fn p() -> &'static Path {
    Path::new("fixture")
}

#[test]
fn parses_images_and_scales_pixels() {
    let bytes = encode_images(2, 2, 3, &[0, 255, 51, 102, 0, 0, 1, 2, 3, 4, 5, 6]);
    let (n, rows, cols, pixels) = parse_images(p(), &bytes).unwrap();
    assert_eq!((n, rows, cols), (2, 2, 3));
    assert_eq!(pixels[..4], [0.0, 1.0, 0.2, 0.4]);
}

#[test]
fn mnist_shaped_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    let pixels: Vec<u8> = (0..3 * 784).map(|i| (i % 256) as u8).collect();
    std::fs::write(&img, encode_images(3, 28, 28, &pixels)).unwrap();
    std::fs::write(&lab, encode_labels(&[0, 9, 255])).unwrap();
    let split = load_idx(&img, &lab).unwrap();
    assert_eq!((split.len(), split.dim()), (3, 784));
    assert_eq!(split.labels, vec![0, 9, 255]);
    assert!(split.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(split.image(2)[0], f64::from((2 * 784 % 256) as u8) / 255.0);
}

#[test]
fn rejects_short_headers() {
    let images = encode_images(1, 2, 2, &[0; 4]);
    for cut in [0, 3, 4, 15] {
        let err = parse_images(p(), &images[..cut]).unwrap_err();
        assert!(
            matches!(err, IdxError::TruncatedHeader { found, .. } if found == cut),
            "cut {cut}: {err}"
        );
    }
    assert!(matches!(
        parse_labels(p(), &encode_labels(&[1])[..6]),
        Err(IdxError::TruncatedHeader { found: 6, .. })
    ));
}

#[test]
fn rejects_wrong_magic() {
    let mut images = encode_images(1, 1, 1, &[7]);
    images[3] = 0x01;
    assert!(matches!(
        parse_images(p(), &images),
        Err(IdxError::BadMagic {
            found: 0x801,
            expected: 0x803,
            ..
        })
    ));
    // A label file handed in as images.
    assert!(matches!(
        parse_images(p(), &encode_labels(&[0, 1])),
        Err(IdxError::BadMagic { .. })
    ));
    assert!(matches!(
        parse_labels(p(), &encode_images(1, 1, 1, &[0])),
        Err(IdxError::BadMagic { .. })
    ));
}

#[test]
fn rejects_truncated_payload() {
    let images = encode_images(3, 2, 2, &[9; 12]);
    assert!(matches!(
        parse_images(p(), &images[..images.len() - 1]),
        Err(IdxError::TruncatedPayload {
            expected: 12,
            found: 11,
            ..
        })
    ));
    let labels = encode_labels(&[1, 2, 3]);
    assert!(matches!(
        parse_labels(p(), &labels[..9]),
        Err(IdxError::TruncatedPayload {
            expected: 3,
            found: 1,
            ..
        })
    ));
}

#[test]
fn load_checks_counts_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.idx");
    let lab = dir.path().join("lab.idx");
    std::fs::write(&img, encode_images(2, 1, 2, &[0, 255, 255, 0])).unwrap();
    std::fs::write(&lab, encode_labels(&[3])).unwrap();
    assert_eq!(
        load_idx(&img, &lab),
        Err(IdxError::CountMismatch {
            images: 2,
            labels: 1
        })
    );

    std::fs::write(&lab, encode_labels(&[3, 4])).unwrap();
    let split = load_idx(&img, &lab).unwrap();
    assert_eq!(split.len(), 2);
    assert_eq!(split.image(1), &[1.0, 0.0]);

    let missing = dir.path().join("missing.idx");
    assert!(matches!(load_idx(&missing, &lab), Err(IdxError::Io { .. })));
}

proptest! {
    #[test]
    fn encode_parse_roundtrip(rows in 1usize..5, cols in 1usize..5, labels in prop::collection::vec(any::<u8>(), 0..6), seed in any::<u8>()) {
        let n = labels.len();
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let (n2, r2, c2, scaled) = parse_images(p(), &encode_images(n, rows, cols, &pixels)).unwrap();
        prop_assert_eq!((n2, r2, c2), (n, rows, cols));
        for (s, &px) in scaled.iter().zip(&pixels) {
            prop_assert_eq!((s * 255.0).round() as u8, px);
        }
        prop_assert_eq!(parse_labels(p(), &encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..40) {
        let bytes = encode_images(2, 3, 3, &[5; 18]);
        let cut = cut.min(bytes.len());
        let r = parse_images(p(), &bytes[..cut]);
        prop_assert_eq!(r.is_ok(), cut == bytes.len());
    }
}
