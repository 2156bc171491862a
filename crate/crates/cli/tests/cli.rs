use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.ini");

fn capsbeam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsbeam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = capsbeam(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Synthesizes and ToF-corrects the toy phantom into `dir`.
fn toy_rf(dir: &Path) -> String {
    let out = dir.to_str().unwrap();
    ok(&["synth", "--config", TOY, "--out", out]);
    ok(&["tofc", "--config", TOY, "--out", out, "--in", &p(dir, "raw.cbtf")]);
    p(dir, "rf.cbtf")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(capsbeam(&["--help"]).status.code(), Some(0));
    assert_eq!(capsbeam(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["beamform", "--method", "capon", "--in", "x.cbtf"],
        vec!["beamform", "--method", "das"],
        vec!["sim", "--weights", "w.cbwb"],
        vec!["prune", "--ratio", "1.5", "--out", out],
        vec!["sim", "--layer", "conv9", "--out", out],
    ] {
        let o = capsbeam(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let rf = toy_rf(tmp.path());
    let o = capsbeam(&["tofc", "--config", TOY, "--out", out, "--in", &rf, &rf]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("one raw file per angle"));
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = capsbeam(&["beamform", "--method", "das", "--in", &p(tmp.path(), "missing.cbtf"), "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tmp.path().join("bad.ini");
    std::fs::write(&bad, "[grid]\nnum_rows = 8\nbogus = 1\n").unwrap();
    let o = capsbeam(&["report", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `bogus` in [grid]"));

    // rf data on the wrong grid
    let rf = toy_rf(tmp.path());
    let o = capsbeam(&["beamform", "--method", "das", "--in", &rf, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn beamform_writes_image_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let rf = toy_rf(tmp.path());
    ok(&["beamform", "--method", "das", "--in", &rf, "--config", TOY, "--out", tmp.path().to_str().unwrap()]);
    let pgm = std::fs::read(tmp.path().join("das.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 32\n255\n"));
    assert_eq!(pgm.len(), "P5\n16 32\n255\n".len() + 16 * 32);
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    for name in ["raw.cbtf", "rf.cbtf", "das.cbtf", "das_beamsum.cbtf", "das.pgm"] {
        let line = manifest.lines().find(|l| l.starts_with(&format!("{name} "))).unwrap();
        assert!(line.contains("tool=capsbeam/") && line.contains(" config="), "{line}");
    }
}

#[test]
fn seed_flag_changes_the_phantom() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["synth", "--config", TOY, "--out", a.path().to_str().unwrap(), "--seed", "1"]);
    ok(&["synth", "--config", TOY, "--out", b.path().to_str().unwrap(), "--seed", "2"]);
    assert_ne!(std::fs::read(a.path().join("raw.cbtf")).unwrap(), std::fs::read(b.path().join("raw.cbtf")).unwrap());
}

fn compare_rows(a: &Path, b: &Path, out: &Path) -> (Vec<Vec<String>>, f64) {
    let stdout = ok(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let max = stdout.lines().find_map(|l| l.strip_prefix("max_abs_pct_change=")).unwrap().parse().unwrap();
    let text = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows = text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    (rows, max)
}

fn run_metrics(dir: &Path, image: &str) {
    ok(&["metrics", "--config", TOY, "--out", dir.to_str().unwrap(), "--in", &p(dir, image)]);
}

#[test]
fn compare_das_against_mvdr_and_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let rf = toy_rf(tmp.path());
    let dirs: Vec<PathBuf> = ["das", "mvdr"].iter().map(|m| tmp.path().join(m)).collect();
    for (m, d) in ["das", "mvdr"].iter().zip(&dirs) {
        ok(&["beamform", "--method", m, "--config", TOY, "--in", &rf, "--out", d.to_str().unwrap()]);
        run_metrics(d, &format!("{m}.cbtf"));
    }
    let (rows, max) = compare_rows(&dirs[0], &dirs[0], &tmp.path().join("same"));
    assert_eq!(max, 0.0);
    assert!(rows.iter().all(|r| r[4] == "0"));
    let (rows, _) = compare_rows(&dirs[0], &dirs[1], &tmp.path().join("cmp"));
    let cr = rows.iter().find(|r| r[0] == "cr").unwrap();
    assert!(cr[4].parse::<f64>().unwrap() > 0.0, "{cr:?}");
}

#[test]
fn fixed_point_metrics_stay_within_five_percent_of_float() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let rf = toy_rf(tmp.path());
    ok(&["quantize", "--config", TOY, "--out", out, "--in", &rf]);
    let w = p(tmp.path(), "quantized.cbwb");
    for mode in ["float", "fixed"] {
        let d = tmp.path().join(mode);
        ok(&["infer", "--config", TOY, "--mode", mode, "--weights", &w, "--in", &rf, "--out", d.to_str().unwrap()]);
        run_metrics(&d, &format!("capsbeam_{mode}.cbtf"));
    }
    let (rows, max) = compare_rows(&tmp.path().join("float"), &tmp.path().join("fixed"), &tmp.path().join("cmp"));
    assert!(rows.len() >= 3);
    assert!(max <= 5.0, "max metric change {max}%");
}

#[test]
fn compare_needs_metrics_on_matching_regions() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = capsbeam(&[
        "compare",
        a.path().to_str().unwrap(),
        b.path().to_str().unwrap(),
        "--out",
        a.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no metrics.csv"));
}

#[test]
fn prune_sweep_keeps_a_passing_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let rf = toy_rf(tmp.path());
    let stdout =
        ok(&["prune", "--config", TOY, "--out", out, "--in", &rf, "--ratios", "0.1,0.3", "--max-cr-loss-db", "100"]);
    assert!(stdout.contains("chosen ratio=0.3"), "{stdout}");
    assert!(tmp.path().join("pruned.cbwb").is_file());
    let sweep = std::fs::read_to_string(tmp.path().join("prune_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn functional_sim_checks_against_fixed_point_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let rf = toy_rf(tmp.path());
    ok(&["quantize", "--config", TOY, "--out", out, "--in", &rf]);
    let w = p(tmp.path(), "quantized.cbwb");
    for layer in ["conv0", "caps0", "routing", "fc2"] {
        ok(&["sim", "--config", TOY, "--out", out, "--weights", &w, "--in", &rf, "--layer", layer, "--check"]);
    }
    let stdout = ok(&["sim", "--config", TOY, "--out", out, "--weights", &w, "--in", &rf, "--check"]);
    assert!(stdout.contains("external_word_transactions="));
    // an unquantized bundle has no scales for the functional run
    ok(&["prune", "--config", TOY, "--out", out]);
    let o = capsbeam(&["sim", "--config", TOY, "--out", out, "--weights", &p(tmp.path(), "pruned.cbwb"), "--in", &rf]);
    assert_eq!(o.status.code(), Some(1));
}
