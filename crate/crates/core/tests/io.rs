use std::path::Path;

use gpo_core::io::{decode, encode, parse_key_values, read_tensor, write_tensor, IoError, RawTensor};
use proptest::prelude::*;

fn sample() -> RawTensor {
    RawTensor::new(vec![2, 1, 3], vec![0.5, -1.0, 2.25, 1e-300, 3.0, -0.0]).unwrap()
}

#[test]
fn header_layout_is_bit_exact() {
    let bytes = encode(&sample());
    assert_eq!(&bytes[0..4], b"GPOT");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    assert_eq!(bytes[8], 1);
    assert_eq!(bytes[9], 3);
    assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
    assert_eq!(&bytes[34..42], &0.5f64.to_le_bytes());
    assert_eq!(bytes.len(), 10 + 24 + 48 + 4);
    let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
    assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
}

#[test]
fn file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.gpot");
    write_tensor(&path, &sample()).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), sample());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    let err = read_tensor(&path).unwrap_err();
    assert!(matches!(err, IoError::Crc { .. }));
    assert!(err.to_string().contains("t.gpot"));
}

#[test]
fn malformed_containers_report_offsets() {
    let p = Path::new("x.gpot");
    let good = encode(&sample());
    let mut magic = good.clone();
    magic[1] = b'X';
    assert!(matches!(decode(&magic, p), Err(IoError::Format { offset: 0, .. })));
    let mut version = good.clone();
    version[4] = 2;
    assert!(matches!(decode(&version, p), Err(IoError::Format { offset: 4, .. })));
    let mut dtype = good.clone();
    dtype[8] = 2;
    assert!(matches!(decode(&dtype, p), Err(IoError::Format { offset: 8, .. })));
    assert!(matches!(
        decode(&good[..15], p),
        Err(IoError::Format { offset: 15, .. })
    ));
    assert!(matches!(decode(&good[..50], p), Err(IoError::Format { .. })));
}

#[test]
fn shape_mismatch_is_rejected() {
    assert!(RawTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn key_values_parse_and_reject() {
    let kv = parse_key_values("# c\npde = burgers\n\nn=4 # tail\n", Path::new("c")).unwrap();
    assert_eq!(kv, vec![("pde".into(), "burgers".into()), ("n".into(), "4".into())]);
    assert!(matches!(
        parse_key_values("a = 1\nnonsense\n", Path::new("c")),
        Err(IoError::Text { line: 2, .. })
    ));
    assert!(parse_key_values("a = 1\na = 2\n", Path::new("c")).is_err());
}

proptest! {
    #[test]
    fn encode_decode_round_trip(dims in proptest::collection::vec(0usize..5, 0..4), seed in 0u64..1000) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0 - 50.0).collect();
        let t = RawTensor::new(dims, data).unwrap();
        prop_assert_eq!(decode(&encode(&t), Path::new("p")).unwrap(), t);
    }
}
