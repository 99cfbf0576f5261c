use std::path::Path;

use denviscom::formats::{
    decode_flo, decode_pfm, decode_ppm, encode_flo, encode_pfm, encode_ppm, flo_valid_mask, pfm_valid_mask, read_flo,
    read_pfm, read_ppm, write_flo, write_pfm, write_ppm, FLO_TAG,
};
use denviscom::Error;
use denviscom_tensor::Tensor;
use proptest::prelude::*;

fn f32_field(shape: &[usize], seed: u32) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f32 * 0.37 + seed as f32).sin() * 50.0) as f64)
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let flow = f32_field(&[2, 5, 7], 1);
    let p = dir.path().join("a.flo");
    write_flo(&flow, &p).unwrap();
    assert_eq!(read_flo(&p).unwrap(), flow);
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 12 + 8 * 35);

    let disp = f32_field(&[4, 3], 2);
    let p = dir.path().join("a.pfm");
    write_pfm(&disp, &p).unwrap();
    assert_eq!(read_pfm(&p).unwrap(), disp);

    let img = Tensor::from_fn(&[3, 2, 4], |i| (i * 10 % 256) as f64 / 255.0);
    let p = dir.path().join("a.ppm");
    write_ppm(&img, &p).unwrap();
    assert_eq!(read_ppm(&p).unwrap(), img);
}

#[test]
fn flo_layout_is_interleaved_little_endian() {
    let flow = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, -1.0, -2.0]).unwrap();
    let bytes = encode_flo(&flow).unwrap();
    assert_eq!(&bytes[..4], &FLO_TAG.to_le_bytes());
    assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
    assert_eq!(&bytes[8..12], &1i32.to_le_bytes());
    let vals: Vec<f32> = bytes[12..].chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    assert_eq!(vals, [1.0, -1.0, 2.0, -2.0]);
}

#[test]
fn pfm_rows_are_bottom_up_and_big_endian_is_read() {
    let map = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
    let bytes = encode_pfm(&map).unwrap();
    let header = b"Pf\n1 2\n-1.0\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..header.len() + 4], &2f32.to_le_bytes());
    let mut be = b"Pf\n1 2\n1.0\n".to_vec();
    be.extend_from_slice(&2f32.to_be_bytes());
    be.extend_from_slice(&1f32.to_be_bytes());
    assert_eq!(decode_pfm(&be, Path::new("be.pfm")).unwrap(), map);
}

#[test]
fn ppm_header_comments_are_skipped() {
    let mut bytes = b"P6\n# made by hand\n1 1\n# max\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 51]);
    let img = decode_ppm(&bytes, Path::new("c.ppm")).unwrap();
    assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
}

#[test]
fn invalid_entries_are_masked() {
    let flow = Tensor::new(&[2, 1, 3], vec![0.0, 2e9, 1.0, 0.0, 0.0, -1e10]).unwrap();
    assert_eq!(flo_valid_mask(&flow), [true, false, false]);
    let map = Tensor::new(&[1, 3], vec![1.0, f64::INFINITY, f64::NAN]).unwrap();
    assert_eq!(pfm_valid_mask(&map), [true, false, false]);
}

#[test]
fn malformed_files_are_reported_with_their_path() {
    let p = Path::new("bad.flo");
    let mut good = encode_flo(&Tensor::zeros(&[2, 2, 2])).unwrap();
    let err = decode_flo(&good[..20], p).unwrap_err();
    assert!(matches!(err, Error::Length { expected: 44, found: 20, .. }), "{err}");
    assert!(err.to_string().contains("bad.flo"));
    good[0] ^= 1;
    assert!(matches!(decode_flo(&good, p), Err(Error::Format { .. })));
    assert!(decode_flo(&[0; 4], p).is_err());

    let q = Path::new("bad.pfm");
    assert!(matches!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0", q), Err(Error::Format { .. })));
    assert!(matches!(decode_pfm(b"Pf\n1 1\n-1.0\n\0\0", q), Err(Error::Length { .. })));
    assert!(matches!(decode_pfm(b"Pf\n0 1\n-1.0\n", q), Err(Error::Format { .. })));
    assert!(matches!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0", q), Err(Error::Format { .. })));

    let r = Path::new("bad.ppm");
    assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0", r), Err(Error::Format { .. })));
    assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0", r), Err(Error::Format { .. })));
    assert!(matches!(decode_ppm(b"P6\n2 1\n255\n\0\0\0", r), Err(Error::Length { .. })));
    assert!(read_flo(Path::new("/nonexistent/x.flo")).is_err());
}

#[test]
fn writers_check_shapes() {
    assert!(encode_flo(&Tensor::zeros(&[3, 2, 2])).is_err());
    assert!(encode_pfm(&Tensor::zeros(&[1, 2, 2])).is_err());
    assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f32_values_survive_encoding(h in 1usize..6, w in 1usize..6, vals in prop::collection::vec(-1e6f32..1e6, 72)) {
        let flow = Tensor::from_fn(&[2, h, w], |i| vals[i % vals.len()] as f64);
        prop_assert_eq!(decode_flo(&encode_flo(&flow).unwrap(), Path::new("p.flo")).unwrap(), flow);
        let map = Tensor::from_fn(&[h, w], |i| vals[(i * 7) % vals.len()] as f64);
        prop_assert_eq!(decode_pfm(&encode_pfm(&map).unwrap(), Path::new("p.pfm")).unwrap(), map);
    }

    #[test]
    fn ppm_bytes_survive_decoding(h in 1usize..5, w in 1usize..5, bytes in prop::collection::vec(any::<u8>(), 48)) {
        let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&bytes[..3 * h * w]);
        let img = decode_ppm(&file, Path::new("p.ppm")).unwrap();
        prop_assert_eq!(encode_ppm(&img).unwrap(), file);
    }
}
