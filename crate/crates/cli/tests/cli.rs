use std::path::Path;
use std::process::{Command, Output};

use twinbeam::records::read_stats_csv;

fn twinbeam(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinbeam"))
        .args(args)
        .env("TWINBEAM_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str], cache: &Path) {
    let out = twinbeam(args, cache);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn theory_total_at_zero_squeezing_is_vacuum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    ok(&["theory", "--tau", "0", "--dist", "total", "--nmax", "6", "--out", p(&out)], dir.path());
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "n,value");
    assert_eq!(rows[1], "0,1");
    assert!(rows[2..].iter().all(|r| r.ends_with(",0")));
    assert!(out.with_file_name("s.csv.meta.json").exists());

    let joint = dir.path().join("j.csv");
    ok(&["theory", "--nbar", "1", "--dist", "joint", "--nmax", "3", "--out", p(&joint)], dir.path());
    let text = std::fs::read_to_string(&joint).unwrap();
    assert_eq!(text.lines().next(), Some("n,m,value"));
    assert_eq!(text.lines().count(), 1 + 16);
}

#[test]
fn vacuum_pipeline_diag_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("vac.csv");
    let est = dir.path().join("vac.json");
    let diag = dir.path().join("diag.csv");
    ok(
        &["simulate", "--nbar", "0", "--eta", "1", "--samples", "20000", "--seed", "5", "--modes", "1", "--out", p(&data)],
        dir.path(),
    );
    ok(&["reconstruct", "--dataset", p(&data), "--mode", "bare", "--nmax", "4", "--out", p(&est)], dir.path());
    ok(&["analyze", "--estimate", p(&est), "--stat", "diag", "--out", p(&diag)], dir.path());
    let pts = read_stats_csv(&diag).unwrap();
    assert_eq!(pts.len(), 5);
    assert!((pts[0].value - 1.0).abs() < 5.0 * pts[0].stderr + 1e-12, "{:?}", pts[0]);
    for q in &pts[1..] {
        assert!(q.value.abs() < 5.0 * q.stderr + 1e-12, "{q:?}");
    }
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(
        &["simulate", "--nbar", "2", "--eta", "1", "--samples", "500", "--seed", "9", "--modes", "2", "--out", p(&a)],
        dir.path(),
    );
    let cfg = dir.path().join("cfg.json");
    let json = format!(
        r#"{{"nbar": 2, "eta": 1, "samples": 500, "seed": 9, "modes": 2, "out": {:?}}}"#,
        p(&b)
    );
    std::fs::write(&cfg, json).unwrap();
    ok(&["simulate", "--config", p(&cfg)], dir.path());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // flags override the file
    let c = dir.path().join("c.csv");
    ok(&["simulate", "--config", p(&cfg), "--seed", "10", "--out", p(&c)], dir.path());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    std::fs::write(&cfg, r#"{"nbar": 2, "colour": "blue"}"#).unwrap();
    assert_eq!(code(&twinbeam(&["simulate", "--config", p(&cfg)], dir.path())), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("e.json");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = twinbeam(&["reconstruct", "--dataset", p(&empty), "--mode", "bare", "--eta", "1", "--out", p(&est)], dir.path());
    assert_eq!(code(&out), 2);

    let missing = dir.path().join("missing.csv");
    let out = twinbeam(&["reconstruct", "--dataset", p(&missing), "--mode", "bare", "--eta", "1", "--out", p(&est)], dir.path());
    assert_eq!(code(&out), 2);

    let data = dir.path().join("d.csv");
    ok(
        &["simulate", "--nbar", "1", "--eta", "1", "--samples", "2000", "--seed", "3", "--modes", "2", "--out", p(&data)],
        dir.path(),
    );
    let out = twinbeam(
        &["reconstruct", "--dataset", p(&data), "--mode", "bare", "--eta", "0.4", "--out", p(&est)],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&twinbeam(&["validate", "--kernel-eta", "0.5"], dir.path())), 3);

    ok(&["reconstruct", "--dataset", p(&data), "--mode", "bare", "--nmax", "6", "--out", p(&est)], dir.path());
    let corr = dir.path().join("corr.csv");
    ok(&["analyze", "--estimate", p(&est), "--stat", "correlation", "--big-n", "3", "--out", p(&corr)], dir.path());
    assert_eq!(read_stats_csv(&corr).unwrap().len(), 7);
    let out = twinbeam(&["analyze", "--estimate", p(&est), "--stat", "correlation", "--big-n", "4", "--out", p(&corr)], dir.path());
    assert_eq!(code(&out), 2);

    // a dataset edited after its sidecar was written fails verification
    let mut bytes = std::fs::read(&data).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    std::fs::write(&data, bytes).unwrap();
    let out = twinbeam(&["reconstruct", "--dataset", p(&data), "--mode", "bare", "--out", p(&est)], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupted_kernel_cache_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    std::fs::create_dir(&cache).unwrap();
    ok(&["validate", "--kernel-eta", "1"], &cache);
    let tables: Vec<_> = std::fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "tbk"))
        .collect();
    assert!(!tables.is_empty());
    let sizes: Vec<u64> = tables.iter().map(|t| std::fs::metadata(t).unwrap().len()).collect();
    for t in &tables {
        let mut bytes = std::fs::read(t).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        bytes.truncate(bytes.len() - 8);
        std::fs::write(t, bytes).unwrap();
    }
    let report = dir.path().join("report.json");
    ok(&["validate", "--kernel-eta", "1", "--report", p(&report)], &cache);
    for (t, s) in tables.iter().zip(&sizes) {
        assert_eq!(std::fs::metadata(t).unwrap().len(), *s);
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

/// Every recipe runs end to end with the record counts cut down, and every
/// file a check refers to is produced.
#[test]
fn recipe_commands_run() {
    let manifest: serde_json::Value =
        serde_json::from_str(include_str!("../../../recipes/manifest.json")).expect("manifest parses");
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("out")).unwrap();
    let cache = dir.path().join("cache");
    std::fs::create_dir(&cache).unwrap();
    for recipe in manifest["recipes"].as_array().unwrap() {
        let name = recipe["name"].as_str().unwrap();
        for cmd in recipe["commands"].as_array().unwrap() {
            let mut args: Vec<String> = cmd.as_str().unwrap().split_whitespace().map(String::from).collect();
            if let Some(i) = args.iter().position(|a| a == "--samples") {
                args[i + 1] = "4000".into();
            }
            let out = Command::new(env!("CARGO_BIN_EXE_twinbeam"))
                .args(&args)
                .current_dir(dir.path())
                .env("TWINBEAM_CACHE_DIR", &cache)
                .output()
                .unwrap();
            assert_eq!(code(&out), 0, "{name}: {cmd}: {}", String::from_utf8_lossy(&out.stderr));
        }
        for check in recipe["checks"].as_array().unwrap() {
            if let Some(f) = check["against"].as_str().filter(|s| s.starts_with("out/")) {
                assert!(dir.path().join(f).exists(), "{name}: missing {f}");
            }
        }
    }
}
