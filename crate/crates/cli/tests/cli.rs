use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hopper(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopper")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path.as_ref()).unwrap();
    r.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn empty_height_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["optimize", "--out", "res"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("res").exists());
}

#[test]
fn unreadable_params_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["optimize", "--heights", "0.3", "--params", "missing.json", "--out", "res"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    assert!(!dir.path().join("res").exists());
}

#[test]
fn out_of_range_height_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["optimize", "--heights", "0.3,1.2"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn optimize_simulate_and_stability_double_spring() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = hopper(&["optimize", "--heights", "0.3", "--out", "a"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let control = p.join("a/control_double_h0.300.csv");
    assert!(read(&control).starts_with("t,u,I\n"));
    let summary: serde_json::Value = serde_json::from_str(&read(p.join("a/summary_double.json"))).unwrap();
    assert_eq!(summary[0]["converged"], true);

    // Rerunning reproduces every artifact byte for byte.
    let out = hopper(&["optimize", "--heights", "0.3", "--out", "b"], p);
    assert_eq!(code(&out), 0);
    for f in ["solution_double_h0.300.json", "control_double_h0.300.csv", "summary_double.json"] {
        assert_eq!(read(p.join("a").join(f)), read(p.join("b").join(f)), "{f}");
    }

    let sol = p.join("a/solution_double_h0.300.json");
    let sol = sol.to_str().unwrap();
    let out = hopper(&["simulate", "--solution", sol, "--hops", "20", "--out", "sim"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let series = read(p.join("sim/timeseries_double_h0.300.csv"));
    assert!(series.starts_with("t,domain,z_b,y,delta,dz_b,dy,ddelta,u,F_ground\n"));
    assert!(read(p.join("sim/phase_portrait_double_h0.300.csv")).starts_with("z_b,dz_b\n"));
    let apexes = rows(p.join("sim/apexes_double_h0.300.csv"));
    assert_eq!(apexes.len(), 20);
    for a in &apexes {
        let h: f64 = a[2].parse().unwrap();
        assert!((h - 0.3).abs() < 0.01 * 0.3, "apex {h}");
    }

    let out = hopper(&["simulate", "--solution", sol, "--hops", "0", "--out", "zero"], p);
    assert_eq!(code(&out), 0);
    assert_eq!(read(p.join("zero/timeseries_double_h0.300.csv")), "t,domain,z_b,y,delta,dz_b,dy,ddelta,u,F_ground\n");

    let out = hopper(&["stability", "--solution", sol, "--out", "st"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(p.join("st/stability_double_h0.300_open_loop.json"))).unwrap();
    assert_eq!(report["stable"], true);
    assert!(report["lambda_max"].as_f64().unwrap() < 1.0);
}

#[test]
fn single_spring_open_loop_is_reported_not_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["stability", "--variant", "single", "--heights", "0.3", "--out", "st"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("st/stability_single_h0.300_open_loop.json"))).unwrap();
    assert_eq!(report["stable"], false);

    let out = hopper(&["stability", "--variant", "single", "--heights", "0.3", "--pd", "100,30", "--out", "st"], dir.path());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("st/stability_single_h0.300_pd.json"))).unwrap();
    assert_eq!(report["stable"], true);
}

#[test]
fn fixture_report_matches_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["report", "--fixture", "--out", "r"], dir.path());
    assert_eq!(code(&out), 0);
    let table = rows(dir.path().join("r/published_comparison.csv"));
    assert_eq!(table.len(), 5);
    assert_eq!(&table[2][..7], ["0.3", "250.1", "0.29", "0.16", "132.6", "0.76", "0.54"]);
}

#[test]
fn report_over_two_heights() {
    let dir = tempfile::tempdir().unwrap();
    let out = hopper(&["report", "--heights", "0.2,0.4", "--out", "r"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = read(dir.path().join("r/report.csv"));
    assert!(text.starts_with("H_f,F_max_single,eta_mech_single,eta_elec_single,F_max_double,eta_mech_double,eta_elec_double,"));
    assert_eq!(rows(dir.path().join("r/report.csv")).len(), 2);
}

#[test]
fn fit_on_bundled_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = data("drop_log.csv");
    let guess = data("drop_guess.json");
    let args = ["fit", "--log", log.to_str().unwrap(), "--initial-height", "0.3", "--params", guess.to_str().unwrap(), "--out", "f"];
    let out = hopper(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&read(dir.path().join("f/fit.json"))).unwrap();
    let residual = fit["residual"].as_f64().unwrap();
    assert!(residual < fit["initial_residual"].as_f64().unwrap());
    // The bundled log carries 1 mm noise.
    assert!(residual < 1.2e-3, "{residual}");
    let truth: serde_json::Value = serde_json::from_str(&read(data("nominal.json"))).unwrap();
    for k in ["k_p", "k_s"] {
        let (f, t) = (fit["params"][k].as_f64().unwrap(), truth[k].as_f64().unwrap());
        assert!((f / t - 1.0).abs() < 0.05, "{k}: {f} vs {t}");
    }
}

#[test]
fn synthetic_log_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    for o in ["a", "b"] {
        let out = hopper(&["synth-log", "--noise", "0.001", "--seed", "9", "--duration", "0.3", "--out", o], dir.path());
        assert_eq!(code(&out), 0);
    }
    assert_eq!(read(dir.path().join("a/drop_log.csv")), read(dir.path().join("b/drop_log.csv")));
    let out = hopper(&["synth-log", "--noise", "0.001", "--seed", "10", "--duration", "0.3", "--out", "c"], dir.path());
    assert_eq!(code(&out), 0);
    assert_ne!(read(dir.path().join("a/drop_log.csv")), read(dir.path().join("c/drop_log.csv")));
}

#[test]
fn config_file_supplies_keys_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let params = data("nominal.json");
    std::fs::write(&cfg, format!("params = {:?}\nheights = []\nout = \"from_file\"\n", params.to_str().unwrap())).unwrap();
    let out = hopper(&["--config", "run.toml", "optimize"], dir.path());
    assert_eq!(code(&out), 2, "empty list from the file is still a usage error");
    let out = hopper(&["--config", "run.toml", "optimize", "--heights", "0.2", "--knots", "20"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from_file/solution_double_h0.200.json").exists());
}

#[test]
fn bundled_example_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("example.toml");
    let out = hopper(&["--config", cfg.to_str().unwrap(), "report", "--fixture", "--out", "r"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
