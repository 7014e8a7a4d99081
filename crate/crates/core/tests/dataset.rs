use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nsl_core::dataset::{
    decode_mask_png, decode_pfm, decode_png_gray, encode_mask_png, encode_pfm, encode_png16,
    generate_dataset, read_sample, render_random_sample, write_sample, Dataset, DatasetConfig,
    SampleMeta, Split,
};
use nsl_core::patterns::PatternKind;
use nsl_core::{NslError, Raster};
use proptest::prelude::*;

fn small() -> DatasetConfig {
    DatasetConfig {
        width: 48,
        height: 32,
        n_val: 3,
        n_test: 2,
        ..DatasetConfig::default()
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn meta(id: &str, rig: nsl_core::RigCalibration) -> SampleMeta {
    SampleMeta {
        id: id.into(),
        width: 0,
        height: 0,
        pattern_id: String::new(),
        seed: 0,
        rig,
        difficulty: None,
        split: None,
        noise_sigma: None,
        checksums: BTreeMap::new(),
    }
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(a.path(), 10, 42, &small()).unwrap();
    generate_dataset(b.path(), 10, 42, &small()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(c.path(), 10, 43, &small()).unwrap();
    assert_ne!(ta.get("manifest.json"), tree(c.path()).get("manifest.json"));
}

#[test]
fn splits_follow_the_pattern_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_val: 0,
        n_test: 0,
        ..small()
    };
    generate_dataset(dir.path(), 100, 5, &cfg).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in ds.records(Split::Train) {
        *counts.entry(r.pattern_id.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), PatternKind::TRAIN.len());
    let expected = 100.0 / PatternKind::TRAIN.len() as f64;
    for (kind, &n) in &counts {
        assert!((n as f64 - expected).abs() <= 0.2 * expected, "{kind}: {n}");
    }

    let other = tempfile::tempdir().unwrap();
    generate_dataset(other.path(), 4, 5, &small()).unwrap();
    let ds = Dataset::open(other.path()).unwrap();
    let test_kinds: Vec<&str> = PatternKind::TEST.iter().map(|k| k.name()).collect();
    assert!(ds
        .records(Split::Test)
        .iter()
        .all(|r| test_kinds.contains(&r.pattern_id.as_str())));
    assert!(ds
        .records(Split::Train)
        .iter()
        .all(|r| !test_kinds.contains(&r.pattern_id.as_str())));
    assert!(ds
        .records(Split::Val)
        .iter()
        .all(|r| !test_kinds.contains(&r.pattern_id.as_str())));
    assert_eq!(ds.records(Split::Val).len(), 3);
    assert_eq!(ds.records(Split::Test).len(), 2);
}

#[test]
fn sample_roundtrip_meets_bounds() {
    let (sample, _, _) = render_random_sample(17, PatternKind::Sincos, &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s");
    write_sample(&path, &sample, &meta("s", sample.rig)).unwrap();
    let back = read_sample(&path).unwrap();
    assert_eq!(back.depth_gt, sample.depth_gt);
    assert_eq!(back.disp_gt_lp.mask, sample.disp_gt_lp.mask);
    for (a, b) in back
        .disp_gt_lp
        .values
        .iter()
        .zip(sample.disp_gt_lp.values.iter())
    {
        assert_eq!(*a, *b as f32 as f64);
    }
    for (a, b) in back.ir_left.iter().zip(sample.ir_left.iter()) {
        assert!((a - b).abs() <= 1.0 / 131070.0 + 1e-15);
    }
    assert_eq!(back.rig, sample.rig);
    assert_eq!(back.pattern_id, "sincos");
}

#[test]
fn corrupt_files_are_rejected() {
    let (sample, _, _) = render_random_sample(3, PatternKind::DotsD415, &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s");
    write_sample(&path, &sample, &meta("s", sample.rig)).unwrap();

    let depth = path.join("depth.pfm");
    let bytes = fs::read(&depth).unwrap();
    assert!(matches!(
        decode_pfm(&bytes[..bytes.len() - 5], &depth),
        Err(NslError::CorruptSample { .. })
    ));
    assert!(matches!(
        decode_pfm(b"Pf\n4", &depth),
        Err(NslError::CorruptSample { .. })
    ));

    fs::write(&depth, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        read_sample(&path),
        Err(NslError::CorruptSample { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_is_lossless_for_f32(w in 1usize..20, h in 1usize..20, v in prop::collection::vec(-1e6f32..1e6, 400)) {
        let r = Raster::from_vec(w, h, v[..w * h].iter().map(|&x| x as f64).collect()).unwrap();
        prop_assert_eq!(decode_pfm(&encode_pfm(&r), Path::new("x")).unwrap(), r);
    }

    #[test]
    fn png16_error_is_half_a_quantum(w in 1usize..20, h in 1usize..20, v in prop::collection::vec(0.0f64..=1.0, 400)) {
        let img = Raster::from_vec(w, h, v[..w * h].to_vec()).unwrap();
        let back = decode_png_gray(&encode_png16(&img).unwrap(), Path::new("x")).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1.0 / 131070.0 + 1e-15);
        }
    }

    #[test]
    fn masks_roundtrip(w in 1usize..20, h in 1usize..20, v in prop::collection::vec(any::<bool>(), 400)) {
        let m = Raster::from_vec(w, h, v[..w * h].to_vec()).unwrap();
        prop_assert_eq!(decode_mask_png(&encode_mask_png(&m).unwrap(), Path::new("x")).unwrap(), m);
    }
}
