use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const DELTA1: &str = r#"
[model]
lambda_l = 0.0
lambda_g = 2.0
gamma = 1.0
pi = "delta(1)"
allow_zero_rates = true
"#;

fn hsis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsis"))
        .args(args)
        .output()
        .expect("binary runs")
}

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new(toml: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, toml).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn exec(&self, sub: &str, extra: &[&str]) -> Output {
        let out = self.out();
        let mut args = vec![
            sub,
            "-c",
            self.config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        hsis(&args)
    }

    /// Runs and returns the output directory printed on success.
    fn ok(&self, sub: &str, extra: &[&str]) -> PathBuf {
        let o = self.exec(sub, extra);
        assert!(
            o.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    }
}

/// Data rows of a provenance-stamped CSV: comment line, header, rows.
fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# hsis "));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = csv(path);
    let j = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[j]).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_smoke() {
    let run = Run::new(&format!(
        "{DELTA1}\n[initial]\nkind = \"binomial\"\nq = 0.5\n\n[simulate]\nhouseholds = 50\nhorizon = 2.0\nsample_dt = 0.5\n"
    ));
    let dir = run.ok("simulate", &["--seed", "1"]);
    let (header, rows) = csv(&dir.join("trace_000.csv"));
    assert_eq!(header, ["t", "mean_infected", "frac_infected_households"]);
    assert!(rows.len() >= 2);
    assert!(dir.join("aggregate.csv").exists());
    assert!(dir.join("summary.json").exists());
}

#[test]
fn simulate_is_deterministic_for_any_thread_count() {
    let run = Run::new(&format!(
        "{DELTA1}\n[initial]\nkind = \"binomial\"\nq = 0.2\n\n[simulate]\nhouseholds = 300\nhorizon = 5.0\nsample_dt = 0.5\nreplicas = 6\n"
    ));
    let read = |dir: &Path| fs::read(dir.join("aggregate.csv")).unwrap();
    let a = read(&run.ok("simulate", &["--seed", "7"]));
    let b = read(&run.ok("simulate", &["--seed", "7", "--threads", "1"]));
    let c = read(&run.ok("simulate", &["--seed", "7", "--threads", "3"]));
    assert_eq!(a, b);
    assert_eq!(a, c);
    let other = run.ok("simulate", &["--seed", "8"]);
    assert_ne!(a, read(&other));
}

#[test]
fn simulate_long_run_mean_matches_endemic_level() {
    // Homogeneous SIS with lambda = 2, gamma = 1 settles at m* = 1/2.
    let run = Run::new(&format!(
        "{DELTA1}\n[initial]\nkind = \"binomial\"\nq = 0.5\n\n[simulate]\nhouseholds = 1000\nhorizon = 20.0\nsample_dt = 0.5\nreplicas = 100\naverage_from = 5.0\n"
    ));
    let summary = json(&run.ok("simulate", &["--seed", "3"]).join("summary.json"));
    let mean = summary["long_run_mean"].as_f64().unwrap();
    assert!((0.47..=0.53).contains(&mean), "{mean}");
}

#[test]
fn fp_disease_free_stays_at_zero() {
    let run = Run::new(
        "[model]\nlambda_l = 1.0\nlambda_g = 1.0\ngamma = 1.0\npi = \"geometric(0.5)\"\n\n[initial]\nkind = \"disease_free\"\n\n[fp]\nhorizon = 5.0\ndt = 0.004\n",
    );
    let means = column(&run.ok("fp", &[]).join("means.csv"), "mean");
    assert!(means.len() > 2);
    assert!(means.iter().all(|&m| m == 0.0));
}

#[test]
fn fp_homogeneous_case_is_logistic() {
    let run = Run::new(&format!(
        "{DELTA1}\n[initial]\nkind = \"binomial\"\nq = 0.9\n\n[fp]\nhorizon = 20.0\ndt = 0.001\n"
    ));
    let path = run.ok("fp", &[]).join("means.csv");
    let (t, m) = (column(&path, "t"), column(&path, "mean"));
    let exact = |t: f64| 0.5 / (1.0 + (0.5 / 0.9 - 1.0) * (-t).exp());
    let err = t
        .iter()
        .zip(&m)
        .map(|(t, m)| (m - exact(*t)).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn forced_run_at_the_endemic_level_is_stationary() {
    let model = "[model]\nlambda_l = 1.2\nlambda_g = 1.5\ngamma = 1.0\npi = { 1 = 0.3, 2 = 0.3, 4 = 0.4 }\n";
    let run = Run::new(&format!("{model}\n[equilibrium]\ntol = 1e-13\n"));
    let eq = run.ok("equilibrium", &[]);
    let report = json(&eq.join("report.json"));
    let m_star = report["m_star"].as_f64().unwrap();
    assert!(m_star > 0.0);

    let forcing = run.dir.path().join("forcing.csv");
    let rows: String = (0..=100)
        .map(|i| format!("{},{m_star:.17}\n", i as f64 * 0.1))
        .collect();
    fs::write(&forcing, format!("# constant\nt,m\n{rows}")).unwrap();
    let run = Run::new(&format!(
        "{model}\n[initial]\nkind = \"endemic\"\n\n[fp]\nmode = \"forced\"\nhorizon = 10.0\ndt = 0.01\nforcing_file = {:?}\n",
        forcing.to_str().unwrap()
    ));
    let means = column(&run.ok("fp", &[]).join("means.csv"), "mean");
    let drift = means.iter().map(|m| (m - m_star).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-8, "{drift}");
}

#[test]
fn equilibrium_report_fields() {
    let run = Run::new(&format!("{DELTA1}\n[equilibrium]\nreplicas = 2000\n"));
    let dir = run.ok("equilibrium", &["--seed", "5"]);
    let report = json(&dir.join("report.json"));
    for key in [
        "r0",
        "m_star",
        "regime",
        "malthusian_r",
        "n_max",
        "config_hash",
        "version",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["r0"].as_f64().unwrap(), 2.0);
    assert!((report["m_star"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!((report["malthusian_r"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(report["regime"], "supercritical");
    let (header, rows) = csv(&dir.join("mu_star.csv"));
    assert_eq!(header, ["n", "k", "weight"]);
    assert_eq!(rows.len(), 2);
}

#[test]
fn subcritical_equilibrium_reports_no_growth() {
    let run = Run::new("[model]\nlambda_l = 0.5\nlambda_g = 0.5\ngamma = 1.0\npi = \"delta(2)\"\n");
    let report = json(&run.ok("equilibrium", &[]).join("report.json"));
    assert_eq!(report["m_star"].as_f64().unwrap(), 0.0);
    assert_eq!(report["regime"], "subcritical");
    assert!(report["malthusian_r"].is_null());
    assert!(report["malthusian_note"].is_string());
}

#[test]
fn branching_rate_matches_malthusian_rate() {
    let run = Run::new(&format!(
        "{DELTA1}\n[branching]\ninit_count = 20\nhorizon = 6.0\nsample_dt = 0.25\nreplicas = 30\nwindow = [2.0, 6.0]\n"
    ));
    let summary = json(&run.ok("branching", &["--seed", "11"]).join("summary.json"));
    assert!(
        summary["difference"].as_f64().unwrap().abs() < 0.1,
        "{summary}"
    );
}

#[test]
fn fixedpoint_writes_certificate() {
    let run = Run::new(
        "[model]\nlambda_l = 1.0\nlambda_g = 1.0\ngamma = 1.0\npi = \"delta(3)\"\n\n[initial]\nkind = \"fixed\"\ncount = 1\n\n[fixedpoint]\nhorizon = 3.0\ndt = 0.005\ntol = 1e-6\n",
    );
    let dir = run.ok("fixedpoint", &[]);
    let summary = json(&dir.join("summary.json"));
    assert_eq!(summary["converged"], true);
    let lo = column(&dir.join("bracket.csv"), "m_minus");
    let hi = column(&dir.join("bracket.csv"), "m_plus");
    assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
    assert!(column(&dir.join("convergence.csv"), "gap").len() >= 2);
}

#[test]
fn every_file_carries_provenance() {
    let run = Run::new(&format!(
        "{DELTA1}\n[simulate]\nhouseholds = 20\nhorizon = 1.0\nsample_dt = 0.5\njoint = \"all\"\n\n[fp]\nhorizon = 1.0\ndt = 0.01\nstore_every = 10\n"
    ));
    for (sub, extra) in [
        ("simulate", vec!["--seed", "2"]),
        ("fp", vec![]),
        ("equilibrium", vec![]),
    ] {
        let dir = run.ok(sub, &extra);
        let hash = dir
            .parent()
            .unwrap()
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .to_string();
        assert_eq!(hash.len(), 16);
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let text = fs::read_to_string(&path).unwrap();
            if path.extension().unwrap() == "csv" {
                let first = text.lines().next().unwrap();
                assert_eq!(
                    first,
                    format!("# hsis {} config_hash={hash}", env!("CARGO_PKG_VERSION")),
                    "{path:?}"
                );
            } else {
                let v: Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["config_hash"], hash.as_str());
                assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
            }
        }
    }
}

#[test]
fn overrides_change_the_hash() {
    let run = Run::new(&format!("{DELTA1}\n[fp]\nhorizon = 1.0\ndt = 0.01\n"));
    let a = run.ok("fp", &[]);
    let b = run.ok("fp", &["--set", "fp.horizon=2.0"]);
    assert_ne!(a, b);
    assert_eq!(column(&b.join("means.csv"), "t").last().copied(), Some(2.0));
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn config_errors_exit_2() {
    let unknown = Run::new(&format!(
        "{DELTA1}\n[fp]\nhorizon = 1.0\ndt = 0.01\nbogus = 1\n"
    ));
    assert_eq!(code(&unknown.exec("fp", &[])), 2);

    let missing = Run::new(DELTA1);
    assert_eq!(code(&missing.exec("fp", &[])), 2);

    let unstable = Run::new(&format!("{DELTA1}\n[fp]\nhorizon = 1.0\ndt = 0.5\n"));
    let o = unstable.exec("fp", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));

    let narrow = Run::new(&format!(
        "{DELTA1}\n[chaos]\nhouseholds = [1000]\nreplicas = 4\nhorizon = 1.0\nprobe_dt = 0.5\nfp_dt = 0.01\n"
    ));
    assert_eq!(code(&narrow.exec("chaos", &["--seed", "1"])), 2);

    let run = Run::new(&format!(
        "{DELTA1}\n[simulate]\nhouseholds = 10\nhorizon = 1.0\nsample_dt = 0.5\n"
    ));
    assert_eq!(code(&run.exec("simulate", &[])), 2, "missing --seed");
    assert_eq!(
        code(&run.exec("simulate", &["--seed", "1", "--set", "simulate.nope=1"])),
        2
    );
    assert_eq!(
        code(&hsis(&[
            "simulate",
            "-c",
            "/nonexistent.toml",
            "--seed",
            "1"
        ])),
        2
    );
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&hsis(&["--help"])), 0);
    assert_eq!(code(&hsis(&["--version"])), 0);
}
