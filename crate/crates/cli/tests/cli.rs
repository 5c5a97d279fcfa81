use std::path::Path;
use std::process::{Command, Output};

use repeat_core::pipeline::validate_report;
use repeat_core::volume_io::read_nifti;
use serde_json::Value;

fn repeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repeat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON in {text}"));
    serde_json::from_str(line).unwrap()
}

fn phantom(kind: &str, dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["phantom", "--kind", kind, "--out-dir", path(dir), "--size", "48", "--spacing", "4"];
    args.extend_from_slice(extra);
    let out = repeat(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("truth.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    for f in ["fixed.nii.gz", "moving.nii.gz", "liver_mask.nii.gz"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    written
}

fn truth(v: &Value) -> f64 {
    v["ground_truth_delta_percent"].as_f64().unwrap()
}

const FAST_CONFIG: &str = "resample_spacing = 4.0\n\
[registration]\n\
levels = 2\n\
max_iters_per_level = 20\n";

#[test]
fn phantom_kinds_report_their_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(truth(&phantom("identity", &dir.path().join("id"), &[])), 0.0);
    assert_eq!(truth(&phantom("translate", &dir.path().join("t"), &["--offset", "3,-2,5"])), 0.0);
    let s = truth(&phantom("scale", &dir.path().join("s"), &["--factor", "1.05"]));
    assert!((s - 15.7625).abs() < 1e-6, "{s}");
    let r = truth(&phantom("respiratory", &dir.path().join("r"), &[]));
    assert!((r - 8.0).abs() < 1e-6, "{r}");
    let r = truth(&phantom("respiratory", &dir.path().join("r4"), &["--target-percent", "-4"]));
    assert!((r + 4.0).abs() < 1e-6, "{r}");
}

#[test]
fn run_writes_a_valid_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    phantom("scale", &case, &[]);
    let config = dir.path().join("fast.toml");
    std::fs::write(&config, FAST_CONFIG).unwrap();

    let (fixed, moving, mask) = (case.join("fixed.nii.gz"), case.join("moving.nii.gz"), case.join("liver_mask.nii.gz"));
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "run",
            "--fixed",
            path(&fixed),
            "--moving",
            path(&moving),
            "--mask",
            path(&mask),
            "--config",
            path(&config),
            "--out-dir",
            path(out),
        ];
        args.extend_from_slice(extra);
        let o = repeat(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
        let text = std::fs::read_to_string(out.join("report.json")).unwrap();
        assert_eq!(printed, serde_json::from_str::<Value>(&text).unwrap());
        validate_report(&printed).unwrap();
        (printed, text)
    };

    let (a, text_a) = run(&dir.path().join("a"), &["--deterministic"]);
    let (_, text_b) = run(&dir.path().join("b"), &["--deterministic"]);
    assert_eq!(text_a, text_b);
    assert!(a.get("created_unix").is_none());
    assert_eq!(a["fixed_phase"], "inspiration");
    assert_eq!(a["moving_phase"], "expiration");
    assert!(a["delta_percent"].as_f64().unwrap() > 5.0, "{a}");
    for f in ["deformation_field.nii.gz", "jacobian.nii.gz", "cost_history.csv"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f} missing");
    }

    let (swapped, _) = run(&dir.path().join("c"), &["--swap-phases"]);
    assert_eq!(swapped["fixed_phase"], "expiration");
    assert_eq!(swapped["moving_phase"], "inspiration");
    assert!(swapped["created_unix"].is_u64());

    // The standalone jacobian command reproduces the run's own output.
    let jac = dir.path().join("jac.nii.gz");
    let o = repeat(&["jacobian", "--field", path(&dir.path().join("a/deformation_field.nii.gz")), "--out", path(&jac)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ours = read_nifti(&jac).unwrap();
    let theirs = read_nifti(dir.path().join("a/jacobian.nii.gz")).unwrap();
    assert_eq!(ours.data(), theirs.data());
}

#[test]
fn bad_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    phantom("identity", &case, &[]);
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "windw_lo = -100\n").unwrap();
    let o = repeat(&[
        "run",
        "--fixed",
        path(&case.join("fixed.nii.gz")),
        "--moving",
        path(&case.join("moving.nii.gz")),
        "--mask",
        path(&case.join("liver_mask.nii.gz")),
        "--config",
        path(&config),
        "--out-dir",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "InvalidConfig");
    assert_eq!(err["exit_code"], 2);
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn missing_input_and_bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = repeat(&["jacobian", "--field", path(&dir.path().join("nope.nii.gz")), "--out", path(&dir.path().join("j.nii"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "IoFailure");

    let o = repeat(&["phantom", "--kind", "banana", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "InvalidArguments");

    let o = repeat(&["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for cmd in ["run", "phantom", "jacobian", "overlay"] {
        assert!(help.contains(cmd), "{help}");
    }
}

#[test]
fn overlay_writes_an_rgb_png_and_rejects_bad_slices() {
    let dir = tempfile::tempdir().unwrap();
    phantom("identity", dir.path(), &[]);
    let png = dir.path().join("axial.png");
    let args = |slice: &'static str, out: &Path| {
        repeat(&[
            "overlay",
            "--volume",
            path(&dir.path().join("fixed.nii.gz")),
            "--mask",
            path(&dir.path().join("liver_mask.nii.gz")),
            "--axis",
            "axial",
            "--slice",
            slice,
            "--out",
            path(out),
        ])
    };
    let o = args("20", &png);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(&bytes[12..16], b"IHDR");
    let width = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let height = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    assert_eq!((width, height), (48, 48));
    assert_eq!(bytes[24], 8, "bit depth");
    assert_eq!(bytes[25], 2, "colour type RGB");

    let o = args("48", &dir.path().join("bad.png"));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "IndexOutOfRange");
    assert!(!dir.path().join("bad.png").exists());
}

#[test]
fn jacobian_of_an_affine_field_is_its_determinant() {
    use nalgebra::{Matrix3, Vector3};
    use repeat_core::registration::DeformationField;
    use repeat_core::volume_io::{write_deformation_field, Geometry};

    let dir = tempfile::tempdir().unwrap();
    let g = Geometry::centered([12, 10, 8], [2.0, 2.5, 3.0]).unwrap();
    let a = Matrix3::new(1.1, 0.05, 0.0, 0.0, 0.95, 0.02, 0.01, 0.0, 1.03);
    let cases = [(Matrix3::identity(), "zero"), (a, "affine")];
    for (m, name) in cases {
        let field = DeformationField::from_fn(g.clone(), |p| (m - Matrix3::identity()) * p + Vector3::new(1.0, 0.0, -2.0))
            .unwrap();
        let src = dir.path().join(format!("{name}_field.nii.gz"));
        let dst = dir.path().join(format!("{name}_jac.nii.gz"));
        write_deformation_field(&field, &src).unwrap();
        let o = repeat(&["jacobian", "--field", path(&src), "--out", path(&dst)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let jac = read_nifti(&dst).unwrap();
        let want = m.determinant();
        let worst = jac.data().iter().map(|d| (d - want).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{name}: worst {worst}");
    }
}
