//! Reader checks against fixtures packed independently by
//! `fixtures/make_fixtures.py`, plus writer round trips.

use std::path::PathBuf;

use proptest::prelude::*;
use zoomseg::nifti::{self, parse_header, read_mask, read_volume, Datatype, NiftiError};
use zoomseg_core::Volume;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn float32_values_and_spacing() {
    let v = read_volume(fixture("le_f32_4x4x4.nii")).unwrap();
    assert_eq!(v.extents(), [4, 4, 4]);
    assert_eq!(v.spacing(), [1.0; 3]);
    let expected: Vec<f64> = (0..64).map(|i| i as f64 * 0.25 - 3.0).collect();
    assert_eq!(v.data(), &expected[..]);
}

#[test]
fn gzip_matches_plain() {
    assert_eq!(read_volume(fixture("le_f32_4x4x4.nii.gz")).unwrap(), read_volume(fixture("le_f32_4x4x4.nii")).unwrap());
}

#[test]
fn int16_scaling_and_endianness() {
    let be = read_volume(fixture("be_i16_scaled.nii")).unwrap();
    let le = read_volume(fixture("le_i16_scaled.nii")).unwrap();
    assert_eq!(be, le);
    assert_eq!(be.data()[0], 12.0);
    let raw = [4.0, -2.0, 0.0, 7.0, 100.0, -300.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let expected: Vec<f64> = raw.iter().map(|r| 0.5 * r + 10.0).collect();
    assert_eq!(be.data(), &expected[..]);
    assert_eq!(be.spacing(), [0.9f32 as f64, 1.1f32 as f64, 2.5]);
    let h = parse_header(&std::fs::read(fixture("be_i16_scaled.nii")).unwrap()).unwrap();
    assert_eq!(h.byte_order, nifti::ByteOrder::Big);
    assert_eq!((h.scl_slope, h.scl_inter), (0.5, 10.0));
}

#[test]
fn big_endian_reencodes_to_identical_volume() {
    let be = read_volume(fixture("be_i16_scaled.nii")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("le.nii");
    nifti::write_volume(&be, &p, Datatype::F32).unwrap();
    assert_eq!(read_volume(&p).unwrap(), be);
}

#[test]
fn uint8_mask() {
    let m = read_mask(fixture("le_u8_mask.nii")).unwrap();
    assert_eq!(m.extents(), [4, 3, 2]);
    assert_eq!(m.spacing(), [1.0, 1.0, 1.5]);
    let expected: Vec<u8> = (0..24).map(|i| ((i * 7) % 3 == 0) as u8).collect();
    assert_eq!(m.data(), &expected[..]);
    assert_eq!(m.lesion_volume_mm3(), m.count() as f64 * 1.5);
}

#[test]
fn float64_and_trailing_unit_dimension() {
    let v = read_volume(fixture("le_f64_2x2x2.nii")).unwrap();
    let expected: Vec<f64> = (0..8).map(|i| 1.0 / (i as f64 + 1.0) - 0.3).collect();
    assert_eq!(v.data(), &expected[..]);
    let four = read_volume(fixture("four_dim.nii")).unwrap();
    assert_eq!(four.extents(), [2, 2, 2]);
    assert_eq!(four.data()[7], 7.0);
}

#[test]
fn rejections() {
    assert!(matches!(read_volume(fixture("bad_magic.nii")), Err(NiftiError::BadMagic(m)) if &m == b"abcd"));
    assert!(matches!(read_volume(fixture("float128.nii")), Err(NiftiError::UnsupportedDatatype(1536))));
    assert!(matches!(read_volume(fixture("short_data.nii")), Err(NiftiError::ShortRead { expected: 256, got: 40 })));
    assert!(matches!(read_volume(fixture("missing.nii")), Err(NiftiError::Io { .. })));
}

/// Header bytes outside `descrip` plus the whole data block must survive
/// a read and rewrite unchanged.
#[test]
fn rewrite_is_byte_identical_outside_description() {
    for name in ["le_f32_4x4x4.nii", "le_f64_2x2x2.nii", "le_u8_mask.nii"] {
        let original = std::fs::read(fixture(name)).unwrap();
        let h = parse_header(&original).unwrap();
        let v = read_volume(fixture(name)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        nifti::write_volume(&v, &p, h.datatype).unwrap();
        let written = std::fs::read(&p).unwrap();
        assert_eq!(written.len(), original.len(), "{name}");
        assert_eq!(written[352..], original[352..], "{name} data");
        assert_eq!(written[..148], original[..148], "{name} header");
        assert_eq!(written[228..], original[228..], "{name} header tail");
    }
}

#[test]
fn gzip_output_is_reproducible() {
    let v = read_volume(fixture("le_f32_4x4x4.nii")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.nii.gz"), dir.path().join("b.nii.gz"));
    nifti::write_volume(&v, &a, Datatype::F32).unwrap();
    nifti::write_volume(&v, &b, Datatype::F32).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..2], &[0x1f, 0x8b]);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(read_volume(&a).unwrap(), v);
}

#[test]
fn pair_files_are_read_through_the_img_sibling() {
    let v = read_volume(fixture("le_f32_4x4x4.nii")).unwrap();
    let mut bytes = nifti::encode_volume(&v, Datatype::F32, false).unwrap();
    bytes[344..348].copy_from_slice(b"ni1\0");
    bytes[108..112].copy_from_slice(&0f32.to_le_bytes());
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.hdr"), &bytes[..352]).unwrap();
    std::fs::write(dir.path().join("s.img"), &bytes[352..]).unwrap();
    assert_eq!(read_volume(dir.path().join("s.hdr")).unwrap(), v);
}

fn grid() -> impl Strategy<Value = ([usize; 3], [f64; 3])> {
    let spacing = (1u32..40).prop_map(|s| s as f32 as f64 * 0.125);
    ([1usize..6, 1usize..6, 1usize..6], [spacing.clone(), spacing.clone(), spacing])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn float_round_trips_are_exact((extents, spacing) in grid(), seed in any::<u64>(), gz in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let n = extents.iter().product::<usize>();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f64s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e6..1e6)).collect();
        let f32s: Vec<f64> = f64s.iter().map(|&x| x as f32 as f64).collect();
        let ints: Vec<f64> = (0..n).map(|_| rng.gen_range(-32768i32..=32767) as f64).collect();
        let bytes: Vec<f64> = (0..n).map(|_| rng.gen_range(0u32..=255) as f64).collect();
        let dir = tempfile::tempdir().unwrap();
        let name = if gz { "v.nii.gz" } else { "v.nii" };
        for (dt, data) in [(Datatype::F64, f64s), (Datatype::F32, f32s), (Datatype::I16, ints), (Datatype::U8, bytes)] {
            let v = Volume::new(extents, spacing, data).unwrap();
            let p = dir.path().join(name);
            nifti::write_volume(&v, &p, dt).unwrap();
            let back = read_volume(&p).unwrap();
            prop_assert_eq!(&back, &v);
            let first = std::fs::read(&p).unwrap();
            nifti::write_volume(&back, &p, dt).unwrap();
            prop_assert_eq!(std::fs::read(&p).unwrap(), first);
        }
    }
}
