use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svfreg::{GridSpec, SegmentationMap, VectorField, Volume};
use svfreg_cli::commands::{CShapeRecord, MetricsReport};
use svfreg_cli::report::{read_json, ReportFile};
use svfreg_cli::{Kind, VolumeFile};
use tempfile::TempDir;

fn svfreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svfreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_image(dir: &TempDir, name: &str, vol: &Volume) -> PathBuf {
    let p = dir.path().join(name);
    VolumeFile::from_image(vol).write(&p).unwrap();
    p
}

fn write_field(dir: &TempDir, name: &str, f: &VectorField, kind: Kind) -> PathBuf {
    let p = dir.path().join(name);
    VolumeFile::from_field(f, kind).write(&p).unwrap();
    p
}

fn ramp(g: GridSpec) -> Volume {
    Volume::from_fn(g, |[x, y, z]| (x as f64 * 0.1 + y as f64 * 0.05 + z as f64 * 0.02).sin())
}

fn blob(g: GridSpec, cx: f64) -> Volume {
    let c = (g.dims[1] as f64 - 1.0) / 2.0;
    Volume::from_fn(g, move |[x, y, z]| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
        (-d2 / 18.0).exp()
    })
}

fn read_field(p: &Path) -> VectorField {
    VolumeFile::read(p).unwrap().to_field(p, &[Kind::Velocity, Kind::Displacement]).unwrap()
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.svf");
    let out = svfreg(&[
        "warp", "--image", s(&missing), "--field", s(&missing), "--out", s(&dir.path().join("o.svf")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.svf"));
}

#[test]
fn grid_mismatch_exits_3() {
    let dir = TempDir::new().unwrap();
    let img = write_image(&dir, "img.svf", &ramp(GridSpec::cube(6).unwrap()));
    let field = write_field(&dir, "phi.svf", &VectorField::zeros(GridSpec::cube(5).unwrap()), Kind::Displacement);
    let out = svfreg(&["warp", "--image", s(&img), "--field", s(&field), "--out", s(&dir.path().join("o.svf"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.svf");
    std::fs::write(&bad, "SVFREG1\n{\"dims\":[2,2,2]}\n").unwrap();
    let out = svfreg(&["invert", "--field", s(&bad), "--out", s(&dir.path().join("o.svf"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_field_warp_is_bitwise_identity() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(7).unwrap();
    let img = write_image(&dir, "img.svf", &ramp(g));
    let field = write_field(&dir, "phi.svf", &VectorField::zeros(g), Kind::Displacement);
    let out_path = dir.path().join("warped.svf");
    let out = svfreg(&["warp", "--image", s(&img), "--field", s(&field), "--out", s(&out_path)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&out_path).unwrap());
}

#[test]
fn label_flag_must_match_file_kind() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(4).unwrap();
    let img = write_image(&dir, "img.svf", &ramp(g));
    let seg = dir.path().join("seg.svf");
    VolumeFile::from_labels(&SegmentationMap::new(g, vec![1; g.len()]).unwrap()).unwrap().write(&seg).unwrap();
    let field = write_field(&dir, "phi.svf", &VectorField::zeros(g), Kind::Displacement);
    let o = dir.path().join("o.svf");
    let with_labels = svfreg(&["warp", "--image", s(&img), "--field", s(&field), "--out", s(&o), "--labels"]);
    assert_eq!(with_labels.status.code(), Some(2));
    let without = svfreg(&["warp", "--image", s(&seg), "--field", s(&field), "--out", s(&o)]);
    assert_eq!(without.status.code(), Some(2));
    let ok = svfreg(&["warp", "--image", s(&seg), "--field", s(&field), "--out", s(&o), "--labels"]);
    assert!(ok.status.success());
    assert_eq!(std::fs::read(&seg).unwrap(), std::fs::read(&o).unwrap());
}

#[test]
fn exp_then_invert_round_trips_an_image() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(16).unwrap();
    let v = svfreg::synth::random_smooth_velocity(g, 1.0, 3.0, 4).unwrap();
    let vp = write_field(&dir, "v.svf", &v, Kind::Velocity);
    let img = write_image(&dir, "img.svf", &ramp(g));
    let (phi, inv) = (dir.path().join("phi.svf"), dir.path().join("inv.svf"));
    assert!(svfreg(&["exp", "--velocity", s(&vp), "--out", s(&phi)]).status.success());
    assert!(svfreg(&["invert", "--field", s(&vp), "--out", s(&inv)]).status.success());
    let (w1, w2) = (dir.path().join("w1.svf"), dir.path().join("w2.svf"));
    assert!(svfreg(&["warp", "--image", s(&img), "--field", s(&inv), "--out", s(&w1)]).status.success());
    assert!(svfreg(&["warp", "--image", s(&w1), "--field", s(&phi), "--out", s(&w2)]).status.success());
    let a = VolumeFile::read(&img).unwrap().to_volume(&img).unwrap();
    let b = VolumeFile::read(&w2).unwrap().to_volume(&w2).unwrap();
    let worst = (0..g.len())
        .filter(|&i| g.in_interior(i, 3))
        .map(|i| (a.values()[i] - b.values()[i]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "{worst}");
}

#[test]
fn exp_of_zero_is_identity_and_comparison_is_reported() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(8).unwrap();
    let vp = write_field(&dir, "v.svf", &VectorField::zeros(g), Kind::Velocity);
    let (phi, cmp) = (dir.path().join("phi.svf"), dir.path().join("cmp.json"));
    let out = svfreg(&[
        "exp", "--velocity", s(&vp), "--out", s(&phi), "--compare-method", "rk4", "--compare-report", s(&cmp),
    ]);
    assert!(out.status.success());
    assert!(read_field(&phi).vectors().iter().all(|u| *u == [0.0; 3]));
    let c: serde_json::Value = read_json(&cmp).unwrap();
    assert_eq!(c["max_diff"], 0.0);
    assert_eq!(c["reference_method"], "rk4");
}

#[test]
fn metrics_self_dice_is_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("synth");
    assert!(svfreg(&["synth", "--preset", "disk", "--dims", "16,16,16", "--out-dir", s(&out)]).status.success());
    let seg = out.join("labels.svf");
    let field = write_field(&dir, "phi.svf", &VectorField::zeros(GridSpec::cube(16).unwrap()), Kind::Displacement);
    let m = dir.path().join("m.json");
    let r = svfreg(&[
        "metrics", "--a", s(&seg), "--b", s(&seg), "--field", s(&field), "--inverse", s(&field), "--out", s(&m),
    ]);
    assert!(r.status.success());
    let report: MetricsReport = read_json(&m).unwrap();
    assert_eq!(report.dice.unwrap().mean, Some(1.0));
    assert_eq!(report.jacobian.unwrap().folding, 0);
    assert_eq!(report.inverse_consistency.unwrap().max, 0.0);
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = svfreg(&["synth", "--preset", "cshape", "--dims", "24,24,24", "--seed", "3", "--out-dir", s(d)]);
        assert!(out.status.success());
    }
    for f in ["fixed.svf", "fixed_seg.svf", "moving.svf", "moving_seg.svf", "synth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cshape_radii_stay_in_range() {
    let dir = TempDir::new().unwrap();
    for seed in 0..100 {
        let d = dir.path().join(seed.to_string());
        let seed = seed.to_string();
        let out = svfreg(&["synth", "--preset", "cshape", "--dims", "16,16,1", "--seed", &seed, "--out-dir", s(&d)]);
        assert!(out.status.success());
        let rec: CShapeRecord = read_json(&d.join("synth.json")).unwrap();
        let (o, i) = (rec.shape.outer_fraction, rec.shape.inner_fraction);
        assert!((1.0 / 3.5..=1.0 / 2.5).contains(&o), "{o}");
        assert!((1.0 / 6.5..=1.0 / 5.5).contains(&i), "{i}");
    }
}

#[test]
fn bad_dims_are_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = svfreg(&["synth", "--preset", "disk", "--dims", "8,8", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn self_registration_report() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(12).unwrap();
    let img = write_image(&dir, "img.svf", &blob(g, 5.5));
    let out = dir.path().join("reg");
    let r = svfreg(&[
        "register", "--fixed", s(&img), "--moving", s(&img), "--out-dir", s(&out), "--iterations", "100",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: ReportFile = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.loss_trace.len(), 100);
    assert!(report.metrics.mean_velocity < 0.05);
    for f in ["mean_velocity.svf", "log_var.svf", "phi.svf", "phi_inv.svf", "warped.svf", "timings.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn registration_with_segmentations_reports_dice_and_surface() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(12).unwrap();
    let (f, m) = (blob(g, 5.0), blob(g, 6.0));
    let seg = |v: &Volume| SegmentationMap::new(g, v.values().iter().map(|&x| u32::from(x > 0.5)).collect()).unwrap();
    let (fi, mi) = (write_image(&dir, "f.svf", &f), write_image(&dir, "m.svf", &m));
    let (fs, ms) = (dir.path().join("fs.svf"), dir.path().join("ms.svf"));
    VolumeFile::from_labels(&seg(&f)).unwrap().write(&fs).unwrap();
    VolumeFile::from_labels(&seg(&m)).unwrap().write(&ms).unwrap();
    let out = dir.path().join("reg");
    let r = svfreg(&[
        "register", "--fixed", s(&fi), "--moving", s(&mi), "--fixed-seg", s(&fs), "--moving-seg", s(&ms),
        "--label", "1", "--out-dir", s(&out), "--iterations", "30", "--preset", "cshape",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: ReportFile = read_json(&out.join("report.json")).unwrap();
    assert!(report.metrics.dice.is_some());
    assert!(report.metrics.surface.is_some());
    assert!(report.loss_trace.iter().all(|l| l.surface > 0.0));
    assert!(out.join("warped_seg.svf").exists());
}

#[test]
fn config_file_round_trips_through_a_report() {
    let dir = TempDir::new().unwrap();
    let g = GridSpec::cube(8).unwrap();
    let img = write_image(&dir, "img.svf", &blob(g, 3.5));
    let first = dir.path().join("first");
    let r = svfreg(&[
        "register", "--fixed", s(&img), "--moving", s(&img), "--out-dir", s(&first),
        "--iterations", "5", "--lambda", "7", "--seed", "42",
    ]);
    assert!(r.status.success());
    let second = dir.path().join("second");
    let report_path = first.join("report.json");
    let r = svfreg(&[
        "register", "--fixed", s(&img), "--moving", s(&img), "--out-dir", s(&second), "--config", s(&report_path),
    ]);
    assert!(r.status.success());
    let (a, b): (ReportFile, ReportFile) = (read_json(&report_path).unwrap(), read_json(&second.join("report.json")).unwrap());
    assert_eq!(a.config, b.config);
    assert_eq!(b.config.prior.lambda, 7.0);
    assert_eq!(a.loss_trace, b.loss_trace);
}
