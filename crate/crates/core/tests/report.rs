mod common;

use std::fs;

use common::tiny_dataset;
use cwgan_dehaze::image::{load_image, save_image};
use cwgan_dehaze::metrics::MetricParams;
use cwgan_dehaze::report::*;

fn record(id: &str, psnr: f64, ssim: f64) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        metrics: Some(ImageMetrics { psnr: Some(psnr), ssim: Some(ssim), r: 1.5, r_empty_mask: false, sigma: 0.0, c_gain: 0.1 }),
        error: None,
    }
}

#[test]
fn references_as_outputs_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("ds"), 4, 1);
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    for p in &m.pairs {
        fs::copy(p.clear.as_ref().unwrap(), out.join(format!("{}.png", p.id))).unwrap();
    }
    let rep = evaluate_set(&m, &out, &MetricParams::default(), "oracle").unwrap();
    assert_eq!(rep.completed(), 4);
    let psnr = rep.aggregates.psnr.unwrap();
    let ssim = rep.aggregates.ssim.unwrap();
    assert_eq!((psnr.mean, psnr.std), (100.0, 0.0));
    assert_eq!((ssim.mean, ssim.std), (1.0, 0.0));
}

#[test]
fn hand_computed_aggregates() {
    let rep = MetricsReport::from_records("m", vec![record("a", 20.0, 0.5), record("b", 22.0, 0.7), record("c", 27.0, 0.9)]);
    let p = rep.aggregates.psnr.unwrap();
    assert!((p.mean - 23.0).abs() < 1e-12);
    assert!((p.std - 13f64.sqrt()).abs() < 1e-12);
    let s = rep.aggregates.ssim.unwrap();
    assert!((s.mean - 0.7).abs() < 1e-12);
    assert!((s.std - 0.2).abs() < 1e-12);
    assert_eq!(rep.aggregates.r.unwrap().std, 0.0);

    let single = MetricsReport::from_records("m", vec![record("a", 31.0, 0.8)]);
    assert_eq!(single.aggregates.psnr.unwrap().std, 0.0);
    assert_eq!(single.aggregates.psnr.unwrap().count, 1);
}

#[test]
fn missing_outputs_are_recorded_and_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("ds"), 3, 2);
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    for p in &m.pairs[1..] {
        save_image(&out.join(format!("{}.jpg", p.id)), &load_image(&p.hazy).unwrap()).unwrap();
    }
    let rep = evaluate_set(&m, &out, &MetricParams::default(), "hazy").unwrap();
    assert_eq!(rep.records.len(), 3);
    assert_eq!(rep.failed(), 1);
    assert!(rep.records[0].error.as_ref().unwrap().contains(&m.pairs[0].id));
    assert_eq!(rep.aggregates.psnr.unwrap().count, 2);

    let table = markdown_table(&[rep.clone()]);
    assert!(table.contains("| Metric | hazy |"));
    assert!(table.contains("2 of 3"));

    let json = dir.path().join("r.json");
    rep.save_json(&json).unwrap();
    assert_eq!(MetricsReport::load_json(&json).unwrap(), rep);

    let csv = rep.to_csv();
    assert!(csv.starts_with("id,psnr,ssim,r,sigma,c_gain,error\n"));
    assert!(csv.contains("\nmean,"));
    assert!(csv.contains("\ncount,2,2,2,2,2"));
}

#[test]
fn missing_output_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(&dir.path().join("ds"), 2, 3);
    assert!(evaluate_set(&m, &dir.path().join("none"), &MetricParams::default(), "x").is_err());
}

#[test]
fn table_lists_methods_side_by_side() {
    let a = MetricsReport::from_records("cwgan", vec![record("a", 20.0, 0.5)]);
    let b = MetricsReport::from_records("dcp", vec![record("a", 18.0, 0.4)]);
    let t = markdown_table(&[a, b]);
    assert!(t.contains("| Metric | cwgan | dcp |"));
    assert!(t.contains("20.000 ± 0.000"));
    assert!(t.contains("18.000 ± 0.000"));
    for row in ["PSNR (dB)", "SSIM", "| r |", "σ (%)", "| C |"] {
        assert!(t.contains(row), "{row}");
    }
}
