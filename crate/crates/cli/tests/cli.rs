use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in about a second
alpha = 0.01
q = 2
n_v = 6
v_max = 4.5
n_y = 8
n_omega = 2x4
epsilon_schedule = 0.1, 0.01, 0
tol = 1e-9
max_exit_fraction = 0.05
dt = 0.2
t_end = 4
";

fn couette(dir: &Path, extra_cfg: &str, args: &[&str], cache: Option<&Path>) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra_cfg}output_dir = {}\n", dir.join("out").display())).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_couette"));
    cmd.arg("--config").arg(&cfg).args(args).env_remove("COUETTE_CACHE_DIR");
    if let Some(c) = cache {
        cmd.env("COUETTE_CACHE_DIR", c);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn steady_at_zero_shear_is_the_maxwellian() {
    let d = tempfile::tempdir().unwrap();
    let out = couette(d.path(), "", &["--alpha", "0", "steady"], None);
    ok(&out);
    let o = d.path().join("out");
    for f in ["g1.bin", "gr1.bin", "gr2.bin", "profile.csv", "steady_meta.json", "run_meta.json"] {
        assert!(o.join(f).exists(), "{f} missing");
    }
    let profile = fs::read_to_string(o.join("profile.csv")).unwrap();
    let mut lines = profile.lines();
    assert_eq!(lines.next().unwrap(), "y,a,b_x,b_y,b_z,c,min_F");
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(cols.len(), 7);
        for x in &cols[1..6] {
            assert!(x.abs() < 1e-12, "{line}");
        }
        assert!(cols[6] > 0.0);
    }
    let meta = json(&o.join("run_meta.json"));
    assert_eq!(meta["command"], "steady");
}

#[test]
fn report_reads_steady_dumps() {
    let d = tempfile::tempdir().unwrap();
    ok(&couette(d.path(), "", &["steady"], None));
    ok(&couette(d.path(), "", &["report"], None));
    let r = json(&d.path().join("out/report.json"));
    assert!(r.is_object());
}

#[test]
fn verify_kernel_writes_csv() {
    let d = tempfile::tempdir().unwrap();
    let out = couette(d.path(), "", &["verify-kernel", "--samples", "3"], None);
    ok(&out);
    let csv = fs::read_to_string(d.path().join("out/kernel_checks.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "check_name,value,bound,pass");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 10);
    for r in &rows {
        assert_eq!(r.len(), 4);
        r[1].parse::<f64>().unwrap();
        r[2].parse::<f64>().unwrap();
        assert!(r[3] == "true" || r[3] == "false");
    }
    let row = |name: &str| rows.iter().find(|r| r[0] == name).unwrap_or_else(|| panic!("{name} missing"));
    assert_eq!(row("collision_invariant_defect")[3], "true");
    assert_eq!(row("nu_spread")[3], "true");
}

#[test]
fn cycles_survival_is_monotone() {
    let d = tempfile::tempdir().unwrap();
    ok(&couette(d.path(), "", &["cycles", "--T0", "5", "--kmax", "12", "--samples", "20000"], None));
    let csv = fs::read_to_string(d.path().join("out/survival.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (c[3], c[4])
        })
        .collect();
    assert_eq!(rows.len(), 12);
    for w in rows.windows(2) {
        assert!(w[1].0 <= w[0].0 + 3.0 * w[0].1.max(w[1].1), "{w:?}");
    }
    let summary = json(&d.path().join("out/cycles.json"));
    assert_eq!(summary["n_samples"], 20000);
}

#[test]
fn unsteady_writes_decay_fit() {
    let d = tempfile::tempdir().unwrap();
    ok(&couette(d.path(), "", &["--t-end", "8", "unsteady"], None));
    let csv = fs::read_to_string(d.path().join("out/decay.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 41);
    let fit = json(&d.path().join("out/decay_fit.json"));
    assert!(fit["lambda0"].as_f64().unwrap().is_finite());
}

#[test]
fn unknown_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let out = couette(d.path(), "shear_rate = 0.1\n", &["steady"], None);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("shear_rate"), "{err}");
}

#[test]
fn unstable_shear_needs_override() {
    let d = tempfile::tempdir().unwrap();
    let out = couette(d.path(), "", &["--alpha", "0.2", "--q", "6", "verify-kernel", "--samples", "1"], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nu0/2"));
    let out = couette(
        d.path(),
        "",
        &["--alpha", "0.2", "--q", "6", "--allow-unstable", "verify-kernel", "--samples", "1"],
        None,
    );
    ok(&out);
}

#[test]
fn runs_are_deterministic_and_cache_is_transparent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    ok(&couette(a.path(), "", &["steady"], None));
    // first cached run fills the cache, second reads it
    ok(&couette(b.path(), "", &["steady"], Some(cache.path())));
    assert!(fs::read_dir(cache.path()).unwrap().count() > 0);
    ok(&couette(c.path(), "", &["steady"], Some(cache.path())));
    for f in ["g1.bin", "gr1.bin", "gr2.bin", "profile.csv"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.path().join("out").join(f)).unwrap(), "{f}");
    }
}
