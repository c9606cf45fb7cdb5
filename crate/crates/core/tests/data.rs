mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cwgan_dehaze::data::*;
use cwgan_dehaze::image::{load_image, save_image, Image};
use cwgan_dehaze::metrics::psnr;
use cwgan_dehaze::Error;
use haze_autograd::Tensor;
use proptest::prelude::*;

fn write_png(path: &Path, w: usize, h: usize, v: f32) {
    save_image(path, &Image::filled(w, h, [v, v * 0.5, 1.0 - v])).unwrap();
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn manifest_of(n: usize) -> DatasetManifest {
    let pairs = (0..n)
        .map(|i| ImagePair {
            id: format!("img{i:05}"),
            hazy: format!("h/{i}.png").into(),
            clear: Some(format!("c/{i}.png").into()),
        })
        .collect();
    DatasetManifest::new("fixture", pairs).unwrap()
}

#[test]
fn ten_hazy_with_nine_clear_gives_nine_pairs_and_one_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..10 {
        write_png(&dir.path().join(format!("hazy/p{i}.png")), 8, 8, i as f32 / 10.0);
        if i != 4 {
            write_png(&dir.path().join(format!("clear/p{i}.png")), 8, 8, 0.5);
        }
    }
    let rep = load_manifest(dir.path(), &Layout::default()).unwrap();
    assert_eq!(rep.manifest.len(), 9);
    assert_eq!(rep.diagnostics.len(), 1);
    assert!(rep.diagnostics[0].contains("p4"));
    assert!(rep.manifest.has_references);
    assert!(rep.manifest.get("p4").is_none());
    let ids: Vec<&str> = rep.manifest.ids().collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn suffix_layout_pairs_by_stem() {
    let dir = tempfile::tempdir().unwrap();
    for stem in ["b", "a", "c"] {
        write_png(&dir.path().join(format!("{stem}_hazy.png")), 8, 8, 0.2);
        write_png(&dir.path().join(format!("{stem}_gt.png")), 8, 8, 0.4);
    }
    let rep = load_manifest(dir.path(), &Layout::suffix()).unwrap();
    assert_eq!(rep.manifest.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
    assert!(rep.diagnostics.is_empty());
}

#[test]
fn empty_and_missing_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_manifest(dir.path(), &Layout::default()), Err(Error::EmptyDataset(_))));
    assert!(matches!(load_manifest(&dir.path().join("nope"), &Layout::default()), Err(Error::Io { .. })));
}

#[test]
fn undecodable_and_mismatched_pairs_are_skipped_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_png(&d.join("hazy/good.png"), 8, 8, 0.3);
    write_png(&d.join("clear/good.png"), 8, 8, 0.3);
    fs::write(d.join("hazy/broken.png"), b"not a png").unwrap();
    write_png(&d.join("clear/broken.png"), 8, 8, 0.3);
    write_png(&d.join("hazy/size.png"), 8, 8, 0.3);
    write_png(&d.join("clear/size.png"), 8, 6, 0.3);
    let rep = load_manifest(d, &Layout::default()).unwrap();
    assert_eq!(rep.manifest.ids().collect::<Vec<_>>(), ["good"]);
    assert_eq!(rep.diagnostics.len(), 2);
    assert!(rep.diagnostics.iter().any(|m| m.contains("broken")));
    assert!(rep.diagnostics.iter().any(|m| m.contains("size") && m.contains("8x6")));
}

#[test]
fn reference_free_set_keeps_unpaired_hazy_images() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&dir.path().join(format!("hazy/r{i}.jpg")), 8, 8, 0.6);
    }
    let rep = load_manifest(dir.path(), &Layout::default()).unwrap();
    assert!(!rep.manifest.has_references);
    assert_eq!(rep.manifest.len(), 3);
    assert!(rep.manifest.pairs.iter().all(|p| p.clear.is_none()));
    assert!(matches!(PairSource::open(&rep.manifest, 8, 0), Err(Error::DatasetContract(_))));
}

#[test]
fn manifest_survives_moving_the_dataset() {
    let a = tempfile::tempdir().unwrap();
    let m = common::tiny_dataset(&a.path().join("ds"), 3, 1);
    let b = tempfile::tempdir().unwrap();
    fs::rename(a.path().join("ds"), b.path().join("moved")).unwrap();
    let loaded = DatasetManifest::load(&b.path().join("moved").join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.ids().collect::<Vec<_>>(), m.ids().collect::<Vec<_>>());
    assert!(loaded.pairs.iter().all(|p| p.hazy.is_file() && p.clear.as_ref().unwrap().is_file()));
}

#[test]
fn duplicate_ids_are_rejected() {
    let p = ImagePair { id: "x".into(), hazy: "a.png".into(), clear: None };
    assert!(DatasetManifest::new("d", vec![p.clone(), p]).is_err());
}

#[test]
fn synthesis_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { count: 12, size: 24, seed: 7, ..Default::default() };
    generate_synthetic_dataset(&dir.path().join("a"), &cfg).unwrap();
    generate_synthetic_dataset(&dir.path().join("b"), &cfg).unwrap();
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    generate_synthetic_dataset(&dir.path().join("c"), &SyntheticConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(tree(&dir.path().join("a")), tree(&dir.path().join("c")));
}

#[test]
fn zero_extinction_leaves_images_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { count: 5, size: 16, k_range: (0.0, 0.0), ..Default::default() };
    let m = generate_synthetic_dataset(dir.path(), &cfg).unwrap();
    for p in &m.pairs {
        assert_eq!(fs::read(&p.hazy).unwrap(), fs::read(p.clear.as_ref().unwrap()).unwrap());
    }
}

fn mean_psnr(m: &DatasetManifest) -> f64 {
    let total: f64 = m
        .pairs
        .iter()
        .map(|p| psnr(&load_image(p.clear.as_ref().unwrap()).unwrap(), &load_image(&p.hazy).unwrap()).unwrap())
        .sum();
    total / m.len() as f64
}

#[test]
fn denser_haze_lowers_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let light = SyntheticConfig { count: 200, size: 16, k_range: (0.2, 0.6), ..Default::default() };
    let dense = SyntheticConfig { k_range: (1.6, 2.0), ..light.clone() };
    let a = mean_psnr(&generate_synthetic_dataset(&dir.path().join("light"), &light).unwrap());
    let b = mean_psnr(&generate_synthetic_dataset(&dir.path().join("dense"), &dense).unwrap());
    assert!(a.is_finite() && b.is_finite());
    assert!(a > b, "light {a} dB vs dense {b} dB");
}

#[test]
fn synthetic_config_validation() {
    assert!(SyntheticConfig { count: 0, ..Default::default() }.validate().is_err());
    assert!(SyntheticConfig { k_range: (2.0, 1.0), ..Default::default() }.validate().is_err());
    assert!(SyntheticConfig { airlight_range: (0.5, 1.2), ..Default::default() }.validate().is_err());
}

#[test]
fn split_sizes_for_the_benchmark_sets() {
    assert_eq!(split(&manifest_of(1449), 0.2, 0).unwrap().test.len(), 290);
    assert_eq!(split(&manifest_of(45), 0.2, 0).unwrap().test.len(), 9);
}

proptest! {
    #[test]
    fn split_partitions_the_manifest(n in 1usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let m = manifest_of(n);
        let s = split(&m, ratio, seed).unwrap();
        let train: BTreeSet<&str> = s.train.ids().collect();
        let test: BTreeSet<&str> = s.test.ids().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert_eq!(test.len(), (ratio * n as f64).round() as usize);
        prop_assert_eq!(split(&m, ratio, seed).unwrap(), s);
    }

    #[test]
    fn net_tensors_stay_in_range(seed in 0u64..50, size in 4usize..24) {
        let img = common::texture(13, 9, seed);
        let t = to_net_tensor(&img, size, "x");
        prop_assert_eq!(t.values.shape(), &[3, size, size]);
        prop_assert!(t.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let wild = Tensor::from_vec(&[3, 2, 2], (0..12).map(|i| (i as f32 - 6.0) * (seed as f32 + 1.0)).collect()).unwrap();
        let back = from_net_tensor(&wild).unwrap();
        prop_assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn net_tensor_extremes_and_quantized_roundtrip() {
    let black = to_net_tensor(&Image::filled(5, 7, [0.0; 3]), 16, "b");
    assert!(black.values.data().iter().all(|&v| v == -1.0));
    let white = to_net_tensor(&Image::filled(5, 7, [1.0; 3]), 16, "w");
    assert!(white.values.data().iter().all(|&v| v == 1.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.png");
    save_image(&path, &common::texture(256, 256, 3)).unwrap();
    let img = load_image(&path).unwrap();
    let back = from_net_tensor(&load_net_tensor(&path, 256).unwrap().values).unwrap();
    let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 255.0, "max error {worst}");
}

#[test]
fn batches_are_a_function_of_seed_and_epoch() {
    let collect = |seed| {
        let mut s = BatchStream::new(10, 3, seed, 0, false, StreamCursor::default());
        (0..8).map(|_| s.next_batch()).collect::<Vec<_>>()
    };
    assert_eq!(collect(1), collect(1));
    assert_ne!(collect(1), collect(2));
    assert_eq!(epoch_order(10, 1, 0, 3), epoch_order(10, 1, 0, 3));
    assert_ne!(epoch_order(10, 1, 0, 3), epoch_order(10, 1, 0, 4));
}
