use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn qbench(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qbench"));
    cmd.args(args).env_remove("QBENCH_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("qbench runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const DISK_SPEC: &str = r#"
width = 48
height = 48
n_slices = 8
sigma = 60
seed = 4
quantize = true

[[objects]]
shape = "disk"
center = [23.5, 23.5]
size = [30, 30]
value = 900
"#;

const CONSTANT_SPEC: &str = r#"{"width": 64, "height": 64, "n_slices": 20, "background_value": 400, "sigma": 100, "seed": 1}"#;

fn synth(dir: &TempDir, name: &str, spec: &str, ext: &str) -> PathBuf {
    let spec_path = dir.path().join(format!("{name}.{ext}"));
    fs::write(&spec_path, spec).unwrap();
    let out = dir.path().join(format!("{name}.qvol"));
    let o = qbench(&["synth", p(&spec_path), p(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a", DISK_SPEC, "toml");
    let b = synth(&dir, "b", DISK_SPEC, "toml");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn zero_sigma_synth_writes_the_template() {
    let dir = TempDir::new().unwrap();
    let spec = DISK_SPEC.replace("sigma = 60", "sigma = 0");
    let path = synth(&dir, "clean", &spec, "toml");
    let v = qbench::container::load_volume(&path).unwrap().volume;
    let values: std::collections::BTreeSet<u64> = v.iter_pixels().map(|x| x as u64).collect();
    assert_eq!(values.into_iter().collect::<Vec<_>>(), vec![0, 900]);
}

#[test]
fn invalid_spec_is_a_load_error() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(
        &spec,
        r#"{"width": 0, "height": 4, "n_slices": 1, "sigma": 1, "seed": 1}"#,
    )
    .unwrap();
    let o = qbench(&["synth", p(&spec), p(&dir.path().join("x.qvol"))], &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn estimate_report_matches_library() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let out = dir.path().join("report.json");
    let o = qbench(&["estimate", p(&input), "--output", p(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let r = report(&out);
    let v = qbench::container::load_volume(&input).unwrap();
    let est = qbench::estimate(&v.volume, &qbench::SearchConfig::default()).unwrap();
    assert_eq!(r["estimate"]["sigma"].as_f64().unwrap(), est.sigma);
    assert_eq!(
        r["threshold"]["t_opt"].as_f64().unwrap(),
        est.threshold.t_opt
    );
    assert_eq!(r["input"]["sha256"].as_str().unwrap(), v.digest);
    assert_eq!(r["score"]["exponent_source"], "default");
    assert_eq!(r["config"]["search_mode"], "bracketed-minimum");
}

#[test]
fn flags_are_echoed() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let o = qbench(
        &[
            "estimate",
            p(&input),
            "--t-start",
            "30",
            "--epsilon",
            "5",
            "--grid-step",
            "2",
            "--correction-factor",
            "1.5264",
            "--search-mode",
            "exhaustive",
            "--ref-resolution",
            "2",
            "--exponent-m",
            "1.4",
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["config"]["t_start"], 30.0);
    assert_eq!(r["config"]["epsilon"], 5.0);
    assert_eq!(r["config"]["grid_step"], 2.0);
    assert_eq!(r["config"]["correction_factor"], 1.5264);
    assert_eq!(r["config"]["search_mode"], "exhaustive");
    assert_eq!(r["threshold"]["mode_used"], "exhaustive");
    assert_eq!(r["score"]["reference_resolution_mm"], 2.0);
    assert_eq!(r["score"]["exponent_m"], 1.4);
    assert_eq!(r["score"]["exponent_source"], "user");
}

#[test]
fn constant_image_reports_no_object() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "flat", CONSTANT_SPEC, "json");
    let o = qbench(&["estimate", p(&input)], &[]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("WARNING: no object detected"));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["threshold"]["no_object"], true);
    assert_eq!(r["estimate"]["snr"], 0.0);
    assert_eq!(r["threshold"]["t_opt"], r["threshold"]["t_max"]);
}

#[test]
fn reports_are_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let runs: Vec<Vec<u8>> = ["1", "3", "8"]
        .iter()
        .map(|threads| {
            let o = qbench(
                &["curve", p(&input), "--factors", "1,1.5,2"],
                &[("QBENCH_THREADS", threads)],
            );
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            o.stdout
        })
        .collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn missing_input_is_a_load_error() {
    let o = qbench(&["estimate", "/nonexistent/volume.qvol"], &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_container_is_a_load_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.qvol");
    fs::write(&bad, b"QVOL1 not json\n\x00\x00").unwrap();
    let o = qbench(&["estimate", p(&bad)], &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("malformed container header"));
}

#[test]
fn all_zero_volume_is_an_estimation_error() {
    let dir = TempDir::new().unwrap();
    let zeros = qbench::Volume::from_raw(8, 8, 2, vec![0.0; 128], qbench::VoxelSize::ISOTROPIC_1MM)
        .unwrap();
    let path = dir.path().join("zeros.qvol");
    qbench::container::save_container(&zeros, qbench::container::Dtype::U16, &path).unwrap();
    let o = qbench(&["estimate", p(&path)], &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn usage_errors() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let single = qbench(&["curve", p(&input), "--factors", "2"], &[]);
    assert_eq!(code(&single), 2);
    let below_one = qbench(&["curve", p(&input), "--factors", "0.5,2"], &[]);
    assert_eq!(code(&below_one), 2);
    let fitted = qbench(&["estimate", p(&input), "--exponent-m", "fitted"], &[]);
    assert_eq!(code(&fitted), 2);
    let mode = qbench(&["estimate", p(&input), "--search-mode", "ternary"], &[]);
    assert_eq!(code(&mode), 2);
    let eps = qbench(&["estimate", p(&input), "--epsilon", "0"], &[]);
    assert_eq!(code(&eps), 2);
    let threads = qbench(&["estimate", p(&input)], &[("QBENCH_THREADS", "zero")]);
    assert_eq!(code(&threads), 2);
    assert_eq!(code(&qbench(&["frobnicate"], &[])), 2);
}

#[test]
fn unwritable_output_is_an_output_error() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let out = dir.path().join("missing_dir").join("r.json");
    let o = qbench(&["estimate", p(&input), "--output", p(&out)], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn curve_writes_csv_sidecar() {
    let dir = TempDir::new().unwrap();
    let input = synth(&dir, "disk", DISK_SPEC, "toml");
    let out = dir.path().join("curve.json");
    let o = qbench(
        &[
            "curve",
            p(&input),
            "--factors",
            "1,1.5,2",
            "--exponent-m",
            "fitted",
            "--output",
            p(&out),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    let csv = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "resolution_mm,noise,snr");
    assert_eq!(
        lines.len(),
        1 + r["curve"]["points"].as_array().unwrap().len()
    );
    assert_eq!(r["score"]["exponent_source"], "fitted");
    assert_eq!(r["score"]["exponent_m"], r["curve"]["fit"]["gradient_m"]);
}

#[test]
fn pgm_directory_input() {
    let dir = TempDir::new().unwrap();
    let stack = dir.path().join("stack");
    fs::create_dir(&stack).unwrap();
    let volume = qbench::container::load_volume(&synth(&dir, "disk", DISK_SPEC, "toml"))
        .unwrap()
        .volume;
    for (j, s) in volume.slices().iter().enumerate() {
        fs::write(
            stack.join(format!("img{j:03}.pgm")),
            qbench::container::encode_pgm16(s).unwrap(),
        )
        .unwrap();
    }
    let o = qbench(&["estimate", p(&stack)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("1 mm isotropic"));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["input"]["format"]["kind"], "pgm-stack");
    assert_eq!(r["input"]["dims"], serde_json::json!([48, 48, 8]));
    let est = qbench::estimate(&volume, &qbench::SearchConfig::default()).unwrap();
    assert_eq!(r["estimate"]["sigma"].as_f64().unwrap(), est.sigma);
}
