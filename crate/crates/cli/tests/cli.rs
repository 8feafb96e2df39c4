use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spinlife::io::{histogram_from_csv, histogram_to_csv, parse_key_values, ConfigDocument};
use spinlife::*;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/synthetic_biexp.csv");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_fit.txt");

fn spinlife(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinlife")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn values(path: &Path) -> std::collections::BTreeMap<String, String> {
    parse_key_values(&fs::read_to_string(path).unwrap())
        .unwrap()
        .into_iter()
        .map(|(k, (_, v))| (k, v))
        .collect()
}

fn num(m: &std::collections::BTreeMap<String, String>, k: &str) -> f64 {
    m[k].parse().unwrap()
}

fn fixture_histogram() -> DecayHistogram {
    let truth = BiexpParams {
        a: 1000.0,
        b: 5000.0,
        tau1: 20.0,
        tau2: 3.0,
        c: 10.0,
    };
    let irf = IrfModel::new(0.5, 5.0).unwrap();
    let bw = 0.05;
    let counts = (0..4096)
        .map(|i| model_eval(&truth, &irf, (i as f64 + 0.5) * bw).unwrap().round() as u64)
        .collect();
    let mut meta = AcquisitionMeta::new(FieldGeometry::with_default_axis(0.0, 45.0, 0.0).unwrap(), Polarization::Rcp);
    meta.label = "synthetic biexponential".into();
    DecayHistogram::new(0.0, bw, counts, meta).unwrap()
}

#[test]
#[ignore = "rewrites the committed fixture"]
fn regenerate_fixture() {
    fs::write(FIXTURE, histogram_to_csv(&fixture_histogram())).unwrap();
}

#[test]
fn fixture_is_the_forward_model() {
    let committed = histogram_from_csv(&fs::read_to_string(FIXTURE).unwrap()).unwrap();
    assert_eq!(committed.counts(), fixture_histogram().counts());
}

#[test]
fn fit_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.txt");
    let o = spinlife(&["fit", FIXTURE, "--irf", "0.5,5.0", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (got, want) = (values(&out), values(Path::new(GOLDEN)));
    let rel = |k: &str| (num(&got, k) / num(&want, k) - 1.0).abs();
    assert!(rel("tau1_ns") <= 0.02, "tau1 {}", got["tau1_ns"]);
    assert!(rel("tau2_ns") <= 0.05, "tau2 {}", got["tau2_ns"]);
    assert!(rel("a_long") <= 0.05 && rel("a_short") <= 0.05, "{got:?}");
    assert!((num(&got, "c_offset") - num(&want, "c_offset")).abs() <= 1.0);
    assert_eq!(got["converged"], "true");
}

#[test]
fn simulate_writes_histogram_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let o = spinlife(&["simulate", "--seed", "7", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let doc = ConfigDocument::default();
    let n_bins = doc.spin_params().unwrap().n_bins();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "time_ns,counts");
    assert_eq!(data.len(), n_bins + 1);
    assert!(text.contains("# seed = 7"));
    assert!(text.lines().any(|l| l.starts_with("# config_hash = ")));

    let sidecar = fs::read_to_string(dir.path().join("h.csv.meta.toml")).unwrap();
    let back = ConfigDocument::from_toml(&sidecar).unwrap();
    assert_eq!(back.seed, 7);
    assert!(text.contains(&format!("# config_hash = {}", back.hash())));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        assert_eq!(code(&spinlife(&["simulate", "--seed", "11", "--out", path_str(p)])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn coarse_step_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[model]\ntau_down_ns = 1.0\nsigma_tau_ns = 0.0\ndt_ns = 0.1\n");
    let o = spinlife(&["simulate", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("5% Poisson thinning guard"), "{}", stderr(&o));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn unknown_config_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "seed = 1\n\n[model]\ntau_upp_ns = 20\n");
    let o = spinlife(&["simulate", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("tau_upp_ns"), "{err}");
}

#[test]
fn malformed_irf_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = spinlife(&["fit", FIXTURE, "--irf", "0.5;5", "--out", path_str(&dir.path().join("r.txt"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn truncated_csv_exits_2_with_row() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(FIXTURE).unwrap();
    let mut cut: String = text.lines().take(40).map(|l| format!("{l}\n")).collect();
    cut.push_str("2.0");
    let bad = write_config(dir.path(), "bad.csv", &cut);
    let o = spinlife(&["fit", path_str(&bad), "--out", path_str(&dir.path().join("r.txt"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 41"), "{}", stderr(&o));
}

#[test]
fn degenerate_biexponential_exits_4() {
    // zero field: the RCP decay is a single exponential
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.csv");
    assert_eq!(code(&spinlife(&["simulate", "--seed", "2", "--out", path_str(&h)])), 0);
    let o = spinlife(&["fit", path_str(&h), "--out", path_str(&dir.path().join("r.txt"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("ill-conditioned"));
}

#[test]
fn simulate_then_fit_recovers_lifetime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[model]\nsigma_tau_ns = 0.0\n");
    let h = dir.path().join("h.csv");
    let r = dir.path().join("r.txt");
    assert_eq!(code(&spinlife(&["simulate", "--config", path_str(&cfg), "--seed", "4", "--out", path_str(&h)])), 0);
    let o = spinlife(&["fit", "--mono", path_str(&h), "--config", path_str(&cfg), "--out", path_str(&r)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tau = num(&values(&r), "tau_ns");
    let want = ConfigDocument::default().model.tau_up_ns;
    assert!((tau / want - 1.0).abs() <= 0.02, "tau {tau} vs {want}");
}

#[test]
fn calibrate_irf_then_fit_with_calibration_file() {
    let dir = tempfile::tempdir().unwrap();
    // scatter pulse: the IRF itself, sampled on the fixture's grid
    let irf = IrfModel::new(0.5, 5.0).unwrap();
    let bw = 0.05;
    let counts = (0..400)
        .map(|i| {
            let t = (i as f64 + 0.5) * bw;
            (2e5 * bw * (-(t - irf.t0).powi(2) / (2.0 * irf.s * irf.s)).exp() / (irf.s * (2.0 * std::f64::consts::PI).sqrt())).round() as u64 + 2
        })
        .collect();
    let meta = AcquisitionMeta::new(FieldGeometry::with_default_axis(0.0, 45.0, 0.0).unwrap(), Polarization::Rcp);
    let pulse = dir.path().join("pulse.csv");
    fs::write(&pulse, histogram_to_csv(&DecayHistogram::new(0.0, bw, counts, meta).unwrap())).unwrap();

    let cal = dir.path().join("irf.txt");
    let o = spinlife(&["calibrate-irf", path_str(&pulse), "--out", path_str(&cal)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = values(&cal);
    assert!((num(&m, "s_ns") - 0.5).abs() < 0.01 && (num(&m, "t0_ns") - 5.0).abs() < 0.01, "{m:?}");
    assert_eq!(m["resolution_limited"], "false");

    let r = dir.path().join("r.txt");
    let o = spinlife(&["fit", FIXTURE, "--irf", path_str(&pulse), "--out", path_str(&r)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!((num(&values(&r), "tau1_ns") / 20.0 - 1.0).abs() < 0.02);
}

#[test]
fn oracle_export_matches_expected_decay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "polarization = \"LCP\"\n[geometry]\nb_gauss = 300\n");
    let out = dir.path().join("o.csv");
    let o = spinlife(&["oracle", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let doc = ConfigDocument::from_toml(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let (p, g) = (doc.spin_params().unwrap(), doc.geometry().unwrap());
    let phi0 = initial_phase(Polarization::Lcp);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), p.n_bins());
    for r in rows.iter().step_by(97) {
        let lo = r[0] - 0.5 * p.bin_width;
        let want = expected_decay(&p, &g, phi0, lo) - expected_decay(&p, &g, phi0, lo + p.bin_width);
        assert!((r[2] - want).abs() <= 1e-9 * want.max(1.0), "{r:?} vs {want}");
        assert!((r[1] - expected_decay(&p, &g, phi0, r[0])).abs() <= 1e-9 * r[1].max(1.0));
    }
}

const SWEEP_CONFIG: &str = "seed = 3
[sweep]
b_values = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0]
phi_values = [-40.0, 0.0, 40.0, 80.0]
cosine_fields = [200.0]
";

#[test]
fn oracle_sweep_outputs_are_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.toml", SWEEP_CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = spinlife(&["sweep", "--oracle", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["points.csv", "delta.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let points = fs::read_to_string(a.join("points.csv")).unwrap();
    let mut lines = points.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "phi_deg,B_gauss,polarization,tau_long_ns,tau_long_err_ns,chi2_reduced,flag"
    );
    let mut tau = std::collections::HashMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        tau.insert((f[0].to_string(), f[1].to_string(), f[2].to_string()), f[3].parse::<f64>().unwrap());
    }
    let delta = fs::read_to_string(a.join("delta.csv")).unwrap();
    let mut lines = delta.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "phi_deg,B_gauss,dtau_ns,dtau_err_ns");
    let mut n = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let key = |p: &str| (f[0].to_string(), f[1].to_string(), p.to_string());
        let want = tau[&key("RCP")] - tau[&key("LCP")];
        assert!((f[2].parse::<f64>().unwrap() - want).abs() < 1e-9, "{l}");
        n += 1;
    }
    assert_eq!(n, 6 * 4);
    let summary = fs::read_to_string(a.join("summary.txt")).unwrap();
    assert!(summary.contains("# seed = 3"));
    assert!(summary.contains("cosine.B_200.amplitude_ns"));
}

#[test]
fn oracle_sweep_at_zero_azimuth_alternates_sign() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.toml", "[sweep]\nphi_values = [0.0]\ncosine_fields = []\n");
    let out = dir.path().join("s");
    let o = spinlife(&["sweep", "--oracle", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let delta = fs::read_to_string(out.join("delta.csv")).unwrap();
    let d: Vec<f64> = delta
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(d.iter().any(|&x| x > 1.0) && d.iter().any(|&x| x < -1.0), "{d:?}");
    let summary = values(&out.join("summary.txt"));
    assert!(summary.contains_key("first_extremum.phi_0.B_gauss"), "{summary:?}");
}

#[test]
fn sweep_with_every_point_failing_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.toml",
        "[model]\nn0 = 10\n[sweep]\nb_values = [200.0]\nphi_values = [0.0]\ncosine_fields = []\n",
    );
    let out = dir.path().join("s");
    let o = spinlife(&["sweep", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    // the record of the failures is still written
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("failed_points = 2"));
}

fn report(b: f64, phi: f64, pol: &str, tau1: f64, err: f64) -> String {
    format!(
        "# seed = 1\na_long = 100\na_short = 900\ntau1_ns = {tau1}\ntau2_ns = 2\nc_offset = 0\ntau1_err_ns = {err}\n\
         tau2_err_ns = 0.1\nchi2_reduced = 1\nconverged = true\niterations = 9\nB_gauss = {b}\nphi_deg = {phi}\n\
         theta_deg = 45\npolarization = {pol}\n"
    )
}

#[test]
fn delta_pairs_reports_by_field_and_azimuth() {
    let dir = tempfile::tempdir().unwrap();
    let files = [
        ("a.txt", report(100.0, 0.0, "RCP", 21.0, 0.3)),
        ("b.txt", report(100.0, 0.0, "LCP", 18.0, 0.4)),
        ("c.txt", report(200.0, 0.0, "LCP", 22.0, 0.3)),
        ("d.txt", report(200.0, 0.0, "RCP", 19.5, 0.4)),
        ("e.txt", report(300.0, 0.0, "RCP", 19.5, 0.4)),
    ];
    let mut args = vec!["delta".to_string()];
    for (name, text) in &files {
        let p = write_config(dir.path(), name, text);
        args.push(p.to_str().unwrap().to_string());
    }
    let out = dir.path().join("delta.csv");
    args.extend(["--out".into(), out.to_str().unwrap().into()]);
    let o = spinlife(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<Vec<f64>> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..3], [0.0, 100.0, 3.0]);
    assert!((rows[0][3] - 0.5).abs() < 1e-12);
    assert_eq!(rows[1][..3], [0.0, 200.0, -2.5]);
}

#[test]
fn delta_without_pairs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "a.txt", &report(100.0, 0.0, "RCP", 21.0, 0.3));
    let o = spinlife(&["delta", path_str(&p), "--out", path_str(&dir.path().join("d.csv"))]);
    assert_eq!(code(&o), 2);
}
