use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hires_core::image::read_raw;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hires(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hires"))
        .args(args)
        .env_remove("HIRES_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_reports_scores_and_tie_trail() {
    let o = hires(&["plan", "800", "600"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(
        s.contains("chosen 672x672 (eff 338688, wasted 112896)"),
        "{s}"
    );
    assert!(s.contains("grid 2x2"));

    let s = stdout(&hires(&["plan", "336", "336"]));
    assert!(s.contains("effective area ties [0, 1, 2, 3, 4] -> wasted area ties [0, 1] -> decided by list_order"), "{s}");

    let o = hires(&["plan", "2000", "500", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["plan"]["grid"], serde_json::json!([3, 1]));
    assert_eq!(v["selection"]["decided_by"], "effective_area");
}

#[test]
fn plan_rejects_zero_dims_and_bad_candidates() {
    assert_eq!(hires(&["plan", "0", "600"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, "[[300, 336]]").unwrap();
    assert_eq!(
        hires(&["plan", "10", "10", "--candidates", path(&c)])
            .status
            .code(),
        Some(2)
    );
    std::fs::write(&c, "[[336, 336], [672, 336]]").unwrap();
    let s = stdout(&hires(&["plan", "10", "10", "--candidates", path(&c)]));
    assert!(s.contains("chosen 336x336"), "{s}");
}

#[test]
fn encode_writes_dump_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let image = root().join("assets/test_96.ppm");
    let desk = root().join("configs/desk.json");
    let o = hires(&[
        "--out-dir",
        path(dir.path()),
        "encode",
        path(&image),
        "--config",
        path(&desk),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_raw(&dir.path().join("tokens.raw")).unwrap();
    assert_eq!(t.dims(), &[5, 36, 64]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tokens.json")).unwrap())
            .unwrap();
    assert_eq!(summary["shape"], serde_json::json!([5, 36, 64]));
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 16);
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| !e
        .unwrap()
        .path()
        .to_string_lossy()
        .ends_with(".tmp")));
}

#[test]
fn fusion_off_and_gate_zero_give_identical_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let image = root().join("assets/test_96.ppm");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root().join("configs/desk.json")).unwrap())
            .unwrap();
    let mut dumps = Vec::new();
    for enabled in [true, false] {
        cfg["fusion"]["enabled"] = enabled.into();
        let c = dir.path().join(format!("cfg_{enabled}.json"));
        std::fs::write(&c, cfg.to_string()).unwrap();
        let out = dir.path().join(format!("tok_{enabled}.raw"));
        let o = hires(&[
            "encode",
            path(&image),
            "--config",
            path(&c),
            "--seed",
            "2",
            "--out",
            path(&out),
        ]);
        assert!(o.status.success());
        dumps.push(std::fs::read(out).unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn output_dir_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hires"))
        .args([
            "encode",
            path(&root().join("assets/test_96.ppm")),
            "--config",
        ])
        .arg(root().join("configs/tiny.json"))
        .args(["--seed", "0"])
        .env("HIRES_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("tokens.raw").exists());
}

#[test]
fn bad_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let desk = root().join("configs/desk.json");
    let missing = dir.path().join("none.ppm");
    let out = dir.path().join("t.raw");
    assert_eq!(
        hires(&[
            "encode",
            path(&missing),
            "--config",
            path(&desk),
            "--seed",
            "0",
            "--out",
            path(&out)
        ])
        .status
        .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 9}"#).unwrap();
    let image = root().join("assets/test_96.ppm");
    assert_eq!(
        hires(&[
            "encode",
            path(&image),
            "--config",
            path(&bad),
            "--seed",
            "0",
            "--out",
            path(&out)
        ])
        .status
        .code(),
        Some(2)
    );
    // seed is mandatory
    assert_eq!(
        hires(&["encode", path(&image), "--config", path(&desk)])
            .status
            .code(),
        Some(2)
    );
    let o = hires(&[
        "ablate",
        "--config",
        path(&desk),
        "--seed",
        "0",
        "--matrix",
        "ds,multi_concat",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("multi_global_ca_conv"));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = root().join("configs/tiny.json");
    let base = [
        "--out-dir",
        path(dir.path()),
        "gradcheck",
        "--config",
        path(&tiny),
        "--seed",
        "0",
        "--coords",
        "2",
    ];
    let o = hires(&base);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for mode in ["channel", "local_ca", "global_ca", "add"] {
        assert!(s.contains(mode), "{s}");
    }
    let mut corrupt = base.to_vec();
    corrupt.push("--corrupt");
    let o = hires(&corrupt);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst offender"));

    let mut fast = vec!["--precision", "fast"];
    fast.extend_from_slice(&base);
    assert_eq!(hires(&fast).status.code(), Some(2));
}

#[test]
fn ablate_and_probe_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = root().join("configs/tiny.json");
    let out = path(dir.path());
    let o = hires(&[
        "--out-dir",
        out,
        "ablate",
        "--config",
        path(&tiny),
        "--seed",
        "1",
        "--matrix",
        "ds,multi_add,pyramid_channel",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("ds,"));

    let o = hires(&[
        "--out-dir",
        out,
        "probe",
        "--config",
        path(&tiny),
        "--task",
        "boundary_glyph_count",
        "--seed",
        "1",
        "--samples",
        "3",
        "--stage1-steps",
        "2",
        "--stage2-steps",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "ds");
    assert_eq!(rows[1]["variant"], "hybrid");
    assert!(rows
        .iter()
        .all(|r| r["stage1_frozen_bit_identical"] == true));
    assert!(report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .all(|m| m["config_hash"].is_string()));
    assert!(dir.path().join("timing.json").exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("curves.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2 * 3
    );

    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&tiny).unwrap()).unwrap();
    cfg["fusion"]["enabled"] = false.into();
    let off = dir.path().join("off.json");
    std::fs::write(&off, cfg.to_string()).unwrap();
    let o = hires(&[
        "--out-dir",
        out,
        "probe",
        "--config",
        path(&off),
        "--task",
        "boundary_glyph_count",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
