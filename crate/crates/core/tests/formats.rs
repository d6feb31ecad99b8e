use milrank::dataset::{
    read_features, read_manifest, read_truth, write_features, write_manifest, write_truth, ClipFeatureMatrix,
    DatasetManifest, SegmentTruth, Split, SyntheticConfig, SyntheticData, VideoEntry, VideoLabel,
};
use milrank::scorer::{init_params, read_model, write_model, ModelFile, ScorerParams};
use milrank::Error;
use proptest::prelude::*;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn one_by_one_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.milf");
    let m = ClipFeatureMatrix::<f32>::new(1, 1, vec![-0.0]).unwrap();
    write_features(&path, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 4);
    assert_eq!(&bytes[..4], b"MILF");
    let back = read_features::<f32>(&path).unwrap();
    assert_eq!(bits(back.as_slice()), bits(m.as_slice()));
}

#[test]
fn feature_errors_name_offsets() {
    let m = ClipFeatureMatrix::<f32>::new(2, 3, vec![1.0; 6]).unwrap();
    let good = m.encode().unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let err = ClipFeatureMatrix::<f32>::decode(&bad_magic, "f").unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    let err = ClipFeatureMatrix::<f32>::decode(&good[..good.len() - 1], "f").unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let mut zero_dim = good.clone();
    zero_dim[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert!(ClipFeatureMatrix::<f32>::decode(&zero_dim, "f").is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_features::<f32>("/nonexistent/dir/x.milf").unwrap_err();
    assert!(err.is_io());
}

proptest! {
    #[test]
    fn feature_matrix_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        raw in prop::collection::vec(any::<u32>(), 36),
    ) {
        // Arbitrary finite bit patterns, including subnormals and -0.
        let data: Vec<f32> = raw[..rows * cols]
            .iter()
            .map(|b| f32::from_bits(*b))
            .map(|x| if x.is_finite() { x } else { 1.5 })
            .collect();
        let m = ClipFeatureMatrix::new(rows, cols, data).unwrap();
        let bytes = m.encode().unwrap();
        let back = ClipFeatureMatrix::<f32>::decode(&bytes, "p").unwrap();
        prop_assert_eq!(bits(back.as_slice()), bits(m.as_slice()));
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}

fn perturbed(seed: u64, dims: &[usize]) -> ScorerParams<f32> {
    let mut p = init_params::<f32>(seed, dims).unwrap();
    for (i, v) in p.stack.iter_mut().enumerate() {
        *v += (i as f32) * 1e-3;
    }
    p
}

#[test]
fn model_round_trip_with_and_without_accumulators() {
    let dir = tempfile::tempdir().unwrap();
    for dims in [[1usize, 1, 1, 1], [5, 4, 3, 1]] {
        let p = perturbed(3, &dims);
        let mut acc = p.stack.zeros_like();
        for (i, v) in acc.iter_mut().enumerate() {
            *v = i as f32 + 0.25;
        }
        for with_acc in [false, true] {
            let path = dir.path().join(format!("m{}{with_acc}.milm", dims[0]));
            write_model(&path, &p, with_acc.then_some(&acc)).unwrap();
            let back = read_model::<f32>(&path).unwrap();
            let a: Vec<u32> = p.stack.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.params.stack.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(back.accumulators.is_some(), with_acc);
            if let Some(got) = &back.accumulators {
                assert!(got.iter().zip(acc.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}

#[test]
fn model_decode_rejects_trailing_and_truncated_bytes() {
    let bytes = ModelFile {
        params: perturbed(1, &[2, 2, 2, 1]),
        accumulators: None,
    }
    .encode()
    .unwrap();
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(ModelFile::<f32>::decode(&longer, "m").is_err());
    assert!(ModelFile::<f32>::decode(&bytes[..bytes.len() - 5], "m").is_err());
    assert!(ModelFile::<f32>::decode(&bytes[..3], "m").is_err());
}

#[test]
fn manifest_and_truth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let minimal = DatasetManifest {
        videos: vec![VideoEntry {
            id: "v".into(),
            feature_path: "v.milf".into(),
            label: VideoLabel::Abnormal,
            split: Split::Test,
            n_frames: 1,
            fps: 29.97,
            annotations: Some(vec![[0, 0]]),
        }],
        truth_path: None,
    };
    let data = SyntheticData::generate(&SyntheticConfig {
        dim: 2,
        n_segments: 4,
        train_bags_per_class: 2,
        test_bags_per_class: 2,
        k_min: 1,
        k_max: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    for (i, m) in [minimal, data.manifest()].iter().enumerate() {
        let path = dir.path().join(format!("manifest{i}.json"));
        write_manifest(&path, m).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(&back, m);
        assert_eq!(back.to_json().unwrap().as_bytes(), std::fs::read(&path).unwrap());
    }

    let mut one = SegmentTruth::default();
    one.videos.insert("only".into(), vec![true]);
    for (i, t) in [one, data.truth()].iter().enumerate() {
        let path = dir.path().join(format!("truth{i}.csv"));
        write_truth(&path, t).unwrap();
        let back = read_truth(&path).unwrap();
        assert_eq!(&back, t);
        assert_eq!(back.to_csv().unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn synthetic_tree_is_deterministic() {
    let cfg = SyntheticConfig {
        dim: 4,
        n_segments: 8,
        train_bags_per_class: 3,
        test_bags_per_class: 2,
        k_min: 2,
        k_max: 4,
        seed: 21,
        ..SyntheticConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    SyntheticData::generate(&cfg).unwrap().write(a.path()).unwrap();
    SyntheticData::generate(&cfg).unwrap().write(b.path()).unwrap();
    let mut files: Vec<_> = walk(a.path());
    files.sort();
    assert!(files.len() > 10);
    for f in files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synthetic_truth_has_one_run_of_planted_length() {
    let cfg = SyntheticConfig {
        dim: 4,
        train_bags_per_class: 10,
        test_bags_per_class: 10,
        k_min: 4,
        k_max: 4,
        ..SyntheticConfig::default()
    };
    let data = SyntheticData::generate(&cfg).unwrap();
    for v in &data.videos {
        let ones = v.truth.iter().filter(|t| **t).count();
        if v.entry.is_abnormal() {
            assert_eq!(ones, 4);
            let first = v.truth.iter().position(|t| *t).unwrap();
            assert!(v.truth[first..first + 4].iter().all(|t| *t));
        } else {
            assert_eq!(ones, 0);
        }
    }
}
