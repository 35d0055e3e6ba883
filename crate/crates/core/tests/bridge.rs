//! Files as written by the Python export side, encoded by hand here so the
//! reader is checked against the byte layout rather than against itself.

use std::fs;
use std::path::Path;

use novelseg_core::data::{load_sample, read_ppm, read_tensor, DType, DatasetLayout, DatasetManifest, IGNORE_LABEL};
use novelseg_core::Error;

fn owt(dtype: u8, shape: &[u64], payload: &[u8]) -> Vec<u8> {
    let mut out = b"OWT1".to_vec();
    out.push(dtype);
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn i32_bytes(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn put(path: &Path, bytes: &[u8]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, bytes).unwrap();
}

/// A 2x3 image with two known classes; the right column is ignored in the ground truth.
fn write_dataset(root: &Path) {
    let mut ppm = b"P6\n# exported\n3 2\n255\n".to_vec();
    ppm.extend((0..18u8).map(|i| i * 10));
    put(&root.join("images/a.ppm"), &ppm);
    let probs = [0.9f32, 0.1, 0.8, 0.2, 0.5, 0.5, 0.3, 0.7, 0.25, 0.75, 0.0, 1.0];
    put(&root.join("softmax/a.owt"), &owt(3, &[2, 3, 2], &f32_bytes(&probs)));
    put(&root.join("gt/a.owt"), &owt(2, &[2, 3], &i32_bytes(&[1, 1, -1, 2, 3, -1])));
    put(
        &root.join("manifest.json"),
        br#"{
  "version": 1,
  "source_model": "deeplabv3plus",
  "classes": ["road", "car"],
  "novel_classes": ["person"],
  "train": ["a"],
  "test": [],
  "feature_extractor": "densenet201",
  "feature_dim": 4
}
"#,
    );
}

#[test]
fn hand_encoded_sample_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let s = load_sample(dir.path(), "a").unwrap();
    assert_eq!((s.height(), s.width(), s.classes()), (2, 3, 2));
    assert_eq!(s.softmax.at(1, 2), &[0.0, 1.0]);
    assert!((s.softmax.at(0, 1)[0] - 0.8).abs() < 1e-7);
    assert_eq!(s.image.pixel(1, 0), [90, 100, 110]);
    assert_eq!(s.gt.unwrap().as_slice(), &[1, 1, IGNORE_LABEL, 2, 3, IGNORE_LABEL]);
}

#[test]
fn hand_encoded_manifest_reads() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let m = DatasetManifest::read(DatasetLayout::new(dir.path()).manifest_path()).unwrap();
    assert_eq!(m.n_known(), 2);
    assert_eq!(m.novel_ids(), vec![3]);
    assert_eq!(m.feature_dim, Some(4));
    assert!(m.generator.is_none());
}

#[test]
fn manifest_optional_fields_default() {
    let m: DatasetManifest =
        serde_json::from_str(r#"{"version":1,"source_model":"x","classes":["a","b"],"train":["t"]}"#).unwrap();
    m.validate().unwrap();
    assert!(m.test.is_empty() && m.novel_classes.is_empty() && m.feature_extractor.is_none());
}

#[test]
fn manifest_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let cases = [
        (r#"{"version":2,"source_model":"x","classes":["a","b"],"train":["t"]}"#, "format"),
        (r#"{"version":1,"source_model":"x","classes":["a"],"train":["t"]}"#, "validation"),
        (r#"{"version":1,"source_model":"x","classes":["a","b"],"train":[]}"#, "validation"),
        (r#"{"version":1,"source_model":"x","classes":["a","b"],"train":["t"],"test":["t"]}"#, "validation"),
        (r#"{"version":1,"source_model":"x","classes":["a","b"],"train":["../t"]}"#, "validation"),
        (r#"{"version":1,"classes":["a","b"],"train":["t"]}"#, "json"),
    ];
    for (text, kind) in cases {
        fs::write(&path, text).unwrap();
        let err = DatasetManifest::read(&path).unwrap_err();
        let ok = match kind {
            "format" => matches!(err, Error::Format(_)),
            "validation" => matches!(err, Error::Validation(_)),
            _ => matches!(err, Error::Json(_)),
        };
        assert!(ok, "{text}: {err}");
    }
    assert!(matches!(DatasetManifest::read(dir.path().join("none.json")), Err(Error::NotFound(_))));
}

#[test]
fn tensor_dtypes_decode() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.owt");
    put(&p, &owt(1, &[3], &[1, 2, 255]));
    assert_eq!(read_tensor(&p).unwrap().dtype(), DType::U8);
    let f64s: Vec<u8> = [1.5f64, -2.0].iter().flat_map(|x| x.to_le_bytes()).collect();
    put(&p, &owt(4, &[1, 2], &f64s));
    let t = read_tensor(&p).unwrap();
    assert_eq!((t.dtype(), t.shape()), (DType::F64, &[1usize, 2][..]));
    assert_eq!(t.to_f64_vec(), vec![1.5, -2.0]);
    // scalars and empty extents are not produced by the exporter
    put(&p, &owt(2, &[], &i32_bytes(&[-7])));
    assert!(matches!(read_tensor(&p), Err(Error::Size(_))));
    put(&p, &owt(2, &[0, 3], &[]));
    assert!(matches!(read_tensor(&p), Err(Error::Size(_))));
}

#[test]
fn malformed_tensors_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.owt");
    let mut bad_magic = owt(1, &[1], &[0]);
    bad_magic[3] = b'2';
    let cases = [
        bad_magic,
        owt(9, &[1], &[0]),
        owt(3, &[2], &f32_bytes(&[1.0])),
        owt(1, &[2], &[0, 0, 0]),
        b"OWT1\x01\x02\x01".to_vec(),
    ];
    for bytes in cases {
        put(&p, &bytes);
        assert!(matches!(read_tensor(&p), Err(Error::Format(_))), "{bytes:?}");
    }
    assert!(matches!(read_tensor(dir.path().join("gone.owt")), Err(Error::NotFound(_))));
}

#[test]
fn sample_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let layout = DatasetLayout::new(dir.path());
    // known ids start at 1, so 0 is not a valid label
    put(&layout.gt_path("a"), &owt(2, &[2, 3], &i32_bytes(&[0, 1, 1, 1, 1, 1])));
    assert!(matches!(load_sample(dir.path(), "a"), Err(Error::Validation(_))));
    put(&layout.gt_path("a"), &owt(2, &[3, 2], &i32_bytes(&[1; 6])));
    assert!(matches!(load_sample(dir.path(), "a"), Err(Error::Shape(_))));
    fs::remove_file(layout.gt_path("a")).unwrap();
    put(&layout.softmax_path("a"), &owt(3, &[2, 3, 2], &f32_bytes(&[f32::NAN; 12])));
    assert!(matches!(load_sample(dir.path(), "a"), Err(Error::Validation(_))));
    put(&layout.softmax_path("a"), &owt(3, &[2, 3, 1], &f32_bytes(&[1.0; 6])));
    load_sample(dir.path(), "a").unwrap();
    put(&layout.image_path("a"), b"P3\n3 2\n255\n");
    assert!(matches!(read_ppm(layout.image_path("a")), Err(Error::Format(_))));
}
