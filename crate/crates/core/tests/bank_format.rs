use std::collections::BTreeMap;

use mpa_core::bank::{self, decode_bank, encode_bank, read_bank, write_bank, Manifest};
use mpa_core::{EmbeddingVector, LabeledEmbedding, Modality, MpaError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two dim-3 records assembled byte by byte.
fn fixture() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"MPAB");
    b.extend_from_slice(&[1, 0, 0, 0]); // version
    b.extend_from_slice(&[3, 0, 0, 0]); // dim
    b.extend_from_slice(&[1, 0, 0, 0]); // dtype f32 + padding
    b.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]); // record count
    // class 7, item 258, view 0, raw
    b.extend_from_slice(&[7, 0, 0, 0, 2, 1, 0, 0, 0, 0, 0, 0]);
    b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]); // -2.0
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // 0.5
    // class 7, item 0, view 3, semantic
    b.extend_from_slice(&[7, 0, 0, 0, 0, 0, 0, 0, 3, 0, 3, 0]);
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x00]);
    b.extend_from_slice(&[0x00, 0x00, 0x20, 0x41]); // 10.0
    b.extend_from_slice(&[0x00, 0x00, 0x80, 0xbf]); // -1.0
    b
}

#[test]
fn hand_built_fixture_parses() {
    let bytes = fixture();
    assert_eq!(bytes.len(), 24 + 2 * (12 + 12));
    let bank = decode_bank(&bytes).unwrap();
    assert_eq!(bank.dim, 3);
    let r = &bank.records;
    assert_eq!((r[0].class_id, r[0].item_id, r[0].view_id, r[0].modality), (7, 258, 0, Modality::VisualRaw));
    assert_eq!(r[0].vector.as_slice(), &[1.0, -2.0, 0.5]);
    assert_eq!((r[1].class_id, r[1].item_id, r[1].view_id, r[1].modality), (7, 0, 3, Modality::Semantic));
    assert_eq!(r[1].vector.as_slice(), &[0.0, 10.0, -1.0]);
    assert_eq!(encode_bank(r).unwrap(), bytes);
}

#[test]
fn fixture_corruptions_are_format_errors() {
    let good = fixture();
    let cases: Vec<(usize, u8)> = vec![
        (0, b'X'),   // magic
        (4, 2),      // version
        (8, 0),      // dim
        (12, 2),     // dtype
        (13, 1),     // padding
        (16, 3),     // record count
        (34, 5),     // modality code
        (35, 1),     // reserved byte
    ];
    for (offset, value) in cases {
        let mut b = good.clone();
        b[offset] = value;
        assert!(matches!(decode_bank(&b), Err(MpaError::Format(_))), "offset {offset}");
    }
    let mut nan = good.clone();
    nan[36..40].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(decode_bank(&nan).is_err());
    for len in 0..good.len() {
        assert!(decode_bank(&good[..len]).is_err(), "truncated to {len}");
    }
}

fn random_records(n: usize, dim: usize, seed: u64) -> Vec<LabeledEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let values: Vec<f64> = (0..dim)
                .map(|_| f64::from(rng.gen_range(-1e6f32..1e6) * if rng.gen_bool(0.1) { 1e-30 } else { 1.0 }))
                .collect();
            LabeledEmbedding {
                class_id: rng.gen_range(0..20),
                item_id: i as u32,
                view_id: rng.gen(),
                modality: Modality::ALL[rng.gen_range(0..5)],
                vector: EmbeddingVector::new(values).unwrap(),
            }
        })
        .collect()
}

fn manifest_for(records: &[LabeledEmbedding]) -> Manifest {
    Manifest {
        dataset_name: "random".into(),
        encoder_id: "none".into(),
        class_names: records.iter().map(|r| (r.class_id, format!("class {}", r.class_id))).collect(),
        metadata: BTreeMap::from([("note".to_string(), "round trip".to_string())]),
    }
}

#[test]
fn thousand_record_round_trip_is_bit_exact() {
    let records = random_records(1000, 17, 42);
    let manifest = manifest_for(&records);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.mpab");
    write_bank(&records, &manifest, &path).unwrap();
    assert_eq!(
        std::fs::metadata(&path).unwrap().len(),
        (bank::HEADER_LEN + 1000 * bank::record_len(17)) as u64
    );
    let (back, m) = read_bank(&path).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.key(), b.key());
        let bits = |v: &EmbeddingVector| v.as_slice().iter().map(|x| (*x as f32).to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.vector), bits(&b.vector));
        assert_eq!(a.vector, b.vector);
    }
    let header = bank::read_header(&path).unwrap();
    assert_eq!((header.dim, header.record_count), (17, 1000));
}

#[test]
fn identical_inputs_give_identical_files() {
    let records = random_records(50, 5, 3);
    let manifest = manifest_for(&records);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mpab"), dir.path().join("b.mpab"));
    write_bank(&records, &manifest, &a).unwrap();
    write_bank(&records, &manifest, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(bank::manifest_path(&a)).unwrap(),
        std::fs::read(bank::manifest_path(&b)).unwrap()
    );
}

#[test]
fn manifest_sidecar_is_required_and_must_cover_classes() {
    let records = random_records(10, 4, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.mpab");
    let mut manifest = manifest_for(&records);
    write_bank(&records, &manifest, &path).unwrap();
    std::fs::remove_file(bank::manifest_path(&path)).unwrap();
    assert!(matches!(read_bank(&path), Err(MpaError::Format(_))));

    let missing = *manifest.class_names.keys().next().unwrap();
    manifest.class_names.remove(&missing);
    assert!(matches!(write_bank(&records, &manifest, &path), Err(MpaError::Format(_))));
}
