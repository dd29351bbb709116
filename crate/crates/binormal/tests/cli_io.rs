use std::fs;
use std::path::{Path, PathBuf};

use binormal::cli_io::*;
use binormal::Error;

fn scratch_dir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("binormal-cli-io-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn opts(dir: &Path, formats: &[Format]) -> OutputOptions {
    OutputOptions { directory: dir.join("out"), formats: formats.to_vec(), quiet: true }
}

const TWO_CORNERS: &str = "
[[corners]]
x = 0.0
theta = 1.5707963267948966

[[corners]]
x = 1.0
theta = 1.5707963267948966
tau = 3.141592653589793
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn design_writes_one_row_per_corner() {
    let dir = scratch_dir("design");
    let spec = write(&dir, "spec.toml", TWO_CORNERS);
    let o = opts(&dir, &[Format::Csv]);
    let m = cmd_design(&spec, None, &o).unwrap();
    assert_eq!(m.exit_code(), 0);
    let text = fs::read_to_string(o.directory.join("coefficients.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap(), "location,re,im");
}

#[test]
fn design_output_reads_back_bit_identically() {
    let dir = scratch_dir("roundtrip");
    let spec = write(&dir, "spec.toml", TWO_CORNERS);
    let o = opts(&dir, &[Format::Csv, Format::Json]);
    cmd_design(&spec, None, &o).unwrap();
    let back = read_coefficients(&o.directory.join("coefficients.csv")).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(o.directory.join("coefficients.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), back.len());
    for (r, (x, a)) in rows.iter().zip(&back) {
        assert_eq!(r[0].as_f64().unwrap().to_bits(), x.to_bits());
        assert_eq!(r[1].as_f64().unwrap().to_bits(), a.re.to_bits());
        assert_eq!(r[2].as_f64().unwrap().to_bits(), a.im.to_bits());
    }
    // Feeding the table to evolve reproduces the data exactly.
    let cfg_text = format!(
        "tasks = [\"evolve\"]\n[input]\ncoefficients_file = \"{}\"\n[solver]\nt_min = 0.01\nt_max = 0.02\nn_output = 2\n",
        o.directory.join("coefficients.csv").display()
    );
    let cfg = RunConfig::from_toml(&cfg_text).unwrap();
    let o2 = OutputOptions { directory: dir.join("evolve"), ..o.clone() };
    let m = run(&cfg, None, &o2).unwrap();
    assert_eq!(m.exit_code(), 0, "{:?}", m.errors);
}

#[test]
fn flat_corner_exits_with_validation_code() {
    let dir = scratch_dir("flat");
    let spec = write(&dir, "spec.toml", "[[corners]]\nx = 0.0\ntheta = 1.0\n\n[[corners]]\nx = 1.0\ntheta = 3.141592653589793\n");
    let e = cmd_design(&spec, None, &opts(&dir, &[Format::Csv])).unwrap_err();
    assert!(matches!(e, Error::Domain(_)));
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("corner 1"), "{e}");
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(matches!(RunConfig::from_toml("tasks = []\n[solver]\ntolerance = 1e-9\n"), Err(Error::Config(_))));
    assert!(RunConfig::from_toml("colour = 1\n").is_err());
    assert!(matches!(read_polyline_text("[[corners]]\nx = 0.0\ntheta = 1.0\nangle = 2.0\n"), Err(Error::Config(_))));
}

fn read_polyline_text(text: &str) -> binormal::Result<binormal::polyline_codec::PolylineSpec> {
    let dir = scratch_dir("poly");
    read_polyline(&write(&dir, "p.toml", text))
}

#[test]
fn config_validation() {
    let missing = RunConfig::from_toml("tasks = [\"evolve\"]\n").unwrap();
    assert!(missing.validate().is_err());
    let both = RunConfig::from_toml("[input]\ncoefficients = [[0.0, 0.3, 0.0]]\npolyline = \"x.toml\"\n").unwrap();
    assert!(both.validate().is_err());
    let t0 = RunConfig::from_toml("tasks = [\"reconstruct\"]\n[input]\ncoefficients = [[0.0, 0.3, 0.0]]\n[frame]\nt0 = 5.0\n").unwrap();
    assert!(t0.validate().is_err());
    let absent = RunConfig::from_toml("[input]\ncoefficients_file = \"/nonexistent/c.csv\"\n").unwrap();
    assert!(absent.validate().is_err());
    assert!(RunConfig::default().validate().is_ok());
}

#[test]
fn empty_task_list_writes_only_the_manifest() {
    let dir = scratch_dir("empty");
    let o = opts(&dir, &[Format::Csv]);
    let m = run(&RunConfig::default(), None, &o).unwrap();
    assert_eq!(m.exit_code(), 0);
    assert!(m.files.is_empty());
    let names: Vec<_> = fs::read_dir(&o.directory).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("manifest.json")]);
}

const SINGLE_DIRAC: &str = "
tasks = [\"evolve\", \"reconstruct\", \"verify\"]

[input]
coefficients = [[0.0, 0.8, 0.0]]

[solver]
t_min = 1e-3
t_max = 1.0
sign = 1
convention = \"geometric\"
n_output = 20

[frame]
times = [0.05, 0.0125, -0.05]

[frame.grid]
lo = -1.0
hi = 1.0
n = 81

[selfsimilar]
amplitudes = [0.8]
";

#[test]
fn single_dirac_run_passes_verification() {
    let dir = scratch_dir("verify");
    let cfg = RunConfig::from_toml(SINGLE_DIRAC).unwrap();
    let o = opts(&dir, &[Format::Csv]);
    let m = run(&cfg, None, &o).unwrap();
    assert_eq!(m.exit_code(), 0, "{:?}", m.errors);
    let checks = m.diagnostics["verify"]["checks"].as_array().unwrap();
    assert!(checks.len() >= 5);
    assert!(checks.iter().all(|c| c["pass"].as_bool().unwrap()), "{checks:?}");
    // Every listed file exists with the recorded checksum.
    for f in &m.files {
        let bytes = fs::read(o.directory.join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(o.directory.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), m.files.len());
    assert_eq!(manifest["config"]["solver"]["sign"], 1);
}

#[test]
fn negative_times_reflect_the_curve() {
    let dir = scratch_dir("reverse");
    let cfg = RunConfig::from_toml(SINGLE_DIRAC).unwrap();
    let o = opts(&dir, &[Format::Csv]);
    run(&cfg, Some(Task::Reconstruct), &o).unwrap();
    let mut r = csv::Reader::from_path(o.directory.join("curve.csv")).unwrap();
    let rows: Vec<Vec<f64>> = r.records().map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect()).collect();
    let neg: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] < 0.0).collect();
    assert_eq!(neg.len(), 81);
    // Rows are in increasing x and carry unit tangents.
    for w in neg.windows(2) {
        assert!(w[1][1] > w[0][1]);
    }
    for r in &neg {
        let t = (r[5] * r[5] + r[6] * r[6] + r[7] * r[7]).sqrt();
        assert!((t - 1.0).abs() < 1e-10);
    }
    // One corner: the reversed run reproduces the same corner angle.
    let tangent = |x: f64| {
        let r = neg.iter().min_by(|a, b| (a[1] - x).abs().partial_cmp(&(b[1] - x).abs()).unwrap()).unwrap();
        [r[5], r[6], r[7]]
    };
    let (a, b) = (tangent(-1.0), tangent(1.0));
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    assert!(cos < 0.9, "{cos}");
}

#[test]
fn runs_are_deterministic() {
    let cfg = RunConfig::from_toml(SINGLE_DIRAC).unwrap();
    let sums: Vec<Vec<(String, String)>> = ["det-a", "det-b"]
        .iter()
        .map(|n| {
            let dir = scratch_dir(n);
            let m = run(&cfg, Some(Task::Evolve), &opts(&dir, &[Format::Csv, Format::Json])).unwrap();
            m.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect()
        })
        .collect();
    assert_eq!(sums[0], sums[1]);
    assert_eq!(sums[0].len(), 2);
}

#[test]
fn selfsimilar_table_feeds_design() {
    let dir = scratch_dir("phi");
    let o = opts(&dir, &[Format::Csv]);
    let a = binormal::self_similar::alpha_from_angle(std::f64::consts::FRAC_PI_2).unwrap();
    cmd_selfsimilar(&[a], 100.0, &binormal::self_similar::ProfileConfig::default(), &o).unwrap();
    let table = read_phi_table(&o.directory.join("phi_table.csv")).unwrap();
    assert_eq!(table.entries.len(), 1);
    assert_eq!(table.entries[0].0, a);
    let spec = write(&dir, "spec.toml", TWO_CORNERS);
    let o2 = OutputOptions { directory: dir.join("design"), ..o.clone() };
    let m = cmd_design(&spec, Some(&o.directory.join("phi_table.csv")), &o2).unwrap();
    assert_eq!(m.exit_code(), 0);
}

#[test]
fn failing_task_is_recorded_in_the_manifest() {
    let dir = scratch_dir("fail");
    let cfg = RunConfig::from_toml("tasks = [\"talbot\"]\n[input]\ncoefficients = [[0.0, 0.1, 0.0]]\n[solver]\nt_max = 0.2\n[talbot]\nq = 4\n").unwrap();
    let o = opts(&dir, &[Format::Csv]);
    let m = run(&cfg, None, &o).unwrap();
    assert_eq!(m.errors.len(), 1);
    assert_eq!(m.errors[0].task, "talbot");
    assert_eq!(m.exit_code(), 2);
    assert!(o.directory.join("manifest.json").exists());
}

#[test]
fn format_parsing() {
    assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
    assert_eq!("json".parse::<Format>().unwrap(), Format::Json);
    assert!("xml".parse::<Format>().is_err());
}
