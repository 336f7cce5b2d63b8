use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nystra::fixtures::{gaussian, gaussian_inputs, separated_prototype_inputs};
use nystra::io::{read_tensor, write_batch, write_json, write_matrix, ManifestFile, TapManifest, TensorRole};
use nystra::Matrix;
use serde_json::Value;
use tempfile::TempDir;

fn nystra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nystra"))
        .args(args)
        .env_remove("NYSTRA_FAULT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Qkv {
    dir: TempDir,
}

impl Qkv {
    fn gaussian(n: usize, d: usize, dv: usize, seed: u64) -> Self {
        let inp = gaussian_inputs(n, d, dv, 1.0, seed);
        Self::from(&inp.q, &inp.k, &inp.v)
    }

    fn from(q: &Matrix, k: &Matrix, v: &Matrix) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_matrix(&dir.path().join("q.ntsr"), q).unwrap();
        write_matrix(&dir.path().join("k.ntsr"), k).unwrap();
        write_matrix(&dir.path().join("v.ntsr"), v).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }

    fn approx(&self, extra: &[&str]) -> Output {
        let (q, k, v) = (self.path("q.ntsr"), self.path("k.ntsr"), self.path("v.ntsr"));
        let (out, rep) = (self.path("out.ntsr"), self.path("report.json"));
        let mut args = vec!["approx", "--q", &q, "--k", &k, "--v", &v, "--out", &out, "--report", &rep];
        args.extend_from_slice(extra);
        nystra(&args)
    }

    fn report(&self) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path("report.json")).unwrap()).unwrap()
    }
}

#[test]
fn approx_writes_output_and_report() {
    let t = Qkv::gaussian(64, 8, 4, 1);
    let o = t.approx(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = read_tensor(Path::new(&t.path("out.ntsr"))).unwrap();
    assert_eq!(out.shape(), [64, 4]);
    let rep = t.report();
    assert_eq!(rep["m"], 16);
    assert_eq!(rep["iterations"], 6);
    assert_eq!(rep["strategy"], "pool-1d");
    assert_eq!(rep["stabilize"], true);
    let err = rep["reports"][0]["output_rel_error"].as_f64().unwrap();
    assert!(err > 0.0 && err < 1.0, "{err}");
    assert!(stdout(&o).contains("output_rel_error"));
}

#[test]
fn approx_is_deterministic() {
    let t = Qkv::gaussian(48, 8, 4, 2);
    assert_eq!(code(&t.approx(&[])), 0);
    let (a, ra) = (std::fs::read(t.path("out.ntsr")).unwrap(), std::fs::read(t.path("report.json")).unwrap());
    assert_eq!(code(&t.approx(&[])), 0);
    assert_eq!(a, std::fs::read(t.path("out.ntsr")).unwrap());
    assert_eq!(ra, std::fs::read(t.path("report.json")).unwrap());
}

#[test]
fn approx_clamps_m_with_warning() {
    let t = Qkv::gaussian(10, 4, 2, 3);
    let o = t.approx(&["--m", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("clamp"), "{}", stderr(&o));
    assert_eq!(t.report()["m"], 10);
}

#[test]
fn approx_rejects_mismatched_tokens() {
    let t = Qkv::gaussian(32, 4, 2, 4);
    write_matrix(&t.dir.path().join("k.ntsr"), &gaussian(31, 4, 1.0, 5)).unwrap();
    let o = t.approx(&[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn approx_overflow_without_stabilization_is_numerical() {
    let (inp, _) = separated_prototype_inputs(4, 32, 4, 2, 4.0, 0.1, 6);
    let hot = inp.with_query_scale(100.0);
    let t = Qkv::from(&hot.q, &hot.k, &hot.v);
    let o = t.approx(&["--no-stabilize", "--landmark-indices", "0,1,2,3"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = t.approx(&["--landmark-indices", "0,1,2,3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn approx_missing_and_corrupt_files_are_io_errors() {
    let t = Qkv::gaussian(16, 4, 2, 9);
    std::fs::remove_file(t.dir.path().join("v.ntsr")).unwrap();
    assert_eq!(code(&t.approx(&[])), 3);
    std::fs::write(t.dir.path().join("v.ntsr"), b"NTSR\x01\x00\x00\x00junk").unwrap();
    assert_eq!(code(&t.approx(&[])), 3);
}

#[test]
fn approx_batch_reports_each_item() {
    let items: Vec<_> = (0..3).map(|s| gaussian_inputs(32, 8, 4, 1.0, 20 + s)).collect();
    let t = Qkv::gaussian(1, 1, 1, 0);
    let q: Vec<_> = items.iter().map(|i| i.q.cast::<f32>()).collect();
    let k: Vec<_> = items.iter().map(|i| i.k.cast::<f32>()).collect();
    let v: Vec<_> = items.iter().map(|i| i.v.cast::<f32>()).collect();
    write_batch(&t.dir.path().join("q.ntsr"), &q).unwrap();
    write_batch(&t.dir.path().join("k.ntsr"), &k).unwrap();
    write_batch(&t.dir.path().join("v.ntsr"), &v).unwrap();
    let o = t.approx(&["--m", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = read_tensor(Path::new(&t.path("out.ntsr"))).unwrap();
    assert_eq!(out.shape(), [3, 32, 4]);
    assert_eq!(out.dtype(), nystra::Dtype::F32);
    let rep = t.report();
    assert_eq!(rep["items"], 3);
    let errs: Vec<f64> = rep["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["output_rel_error"].as_f64().unwrap())
        .collect();
    assert_eq!(errs.len(), 3);
    let max = errs.iter().copied().fold(0.0, f64::max);
    assert_eq!(rep["aggregate"]["max_output_rel_error"].as_f64().unwrap(), max);
}

#[test]
fn approx_strategies() {
    let t = Qkv::gaussian(64, 8, 4, 10);
    let o = t.approx(&["--strategy", "pool-2d", "--grid", "8x8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(t.report()["strategy"], "pool-2d");
    assert_eq!(code(&t.approx(&["--strategy", "pool-2d"])), 2);
    assert_eq!(code(&t.approx(&["--grid", "4x4"])), 2);
    assert_eq!(code(&t.approx(&["--grid", "8x8"])), 0);
    assert_eq!(t.report()["strategy"], "pool-2d");

    let o = t.approx(&["--strategy", "explicit", "--landmark-indices", "0,9,33,60"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(t.report()["m"], 4);
    assert_eq!(code(&t.approx(&["--strategy", "explicit"])), 2);
    assert_eq!(code(&t.approx(&["--strategy", "pool-1d", "--landmark-indices", "1"])), 2);

    write_matrix(&t.dir.path().join("qb.ntsr"), &gaussian(5, 8, 1.0, 11)).unwrap();
    write_matrix(&t.dir.path().join("kb.ntsr"), &gaussian(5, 8, 1.0, 12)).unwrap();
    let (qb, kb) = (t.path("qb.ntsr"), t.path("kb.ntsr"));
    assert_eq!(code(&t.approx(&["--q-bar", &qb, "--k-bar", &kb])), 0);
    assert_eq!(t.report()["strategy"], "explicit");
    assert_eq!(t.report()["m"], 5);
}

#[test]
fn approx_from_manifest_uses_window_grid() {
    let t = Qkv::gaussian(64, 8, 4, 13);
    let files = [TensorRole::Q, TensorRole::K, TensorRole::V]
        .into_iter()
        .zip(["q.ntsr", "k.ntsr", "v.ntsr"])
        .map(|(role, p)| ManifestFile { role, path: PathBuf::from(p), sha256: None })
        .collect();
    let man = TapManifest {
        model: "toy".into(),
        layer: "layers.0.attn".into(),
        head: 0,
        window: 8,
        n: 64,
        d: 8,
        d_h: None,
        dtype: None,
        files,
    };
    write_json(&t.dir.path().join("manifest.json"), &man).unwrap();
    let (mf, out, rep) = (t.path("manifest.json"), t.path("out.ntsr"), t.path("report.json"));
    let o = nystra(&["approx", "--manifest", &mf, "--out", &out, "--report", &rep]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(t.report()["strategy"], "pool-2d");

    std::fs::write(t.dir.path().join("broken.json"), "{\"model\": ").unwrap();
    let broken = t.path("broken.json");
    assert_eq!(code(&nystra(&["approx", "--manifest", &broken, "--out", &out, "--report", &rep])), 3);

    let spectrum_out = t.path("spectrum.csv");
    let o = nystra(&["spectrum", "--manifest", &mf, "--out", &spectrum_out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn spectrum_of_constant_tokens_has_one_dominant_value() {
    let n = 64;
    let row = Matrix::from_fn(n, 4, |_, j| [0.3, -0.1, 0.5, 0.2][j]);
    let t = Qkv::from(&row, &row, &gaussian(n, 2, 1.0, 14));
    let (q, k, out) = (t.path("q.ntsr"), t.path("k.ntsr"), t.path("spectrum.csv"));
    let o = nystra(&["spectrum", "--q", &q, "--k", &k, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,sigma_gtilde,sigma_ga"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows[0][0], "1");
    let sigma = |r: &Vec<&str>| r[1].parse::<f64>().unwrap();
    let s1 = sigma(&rows[0]);
    assert!(rows[1..].iter().all(|r| sigma(r) <= 1e-10 * s1));
    assert!(rows[15][2].parse::<f64>().is_ok());
    assert_eq!(rows[16][2], "");
    assert!(stdout(&o).contains("effective_rank 1"));
}

#[test]
fn spectrum_top_flag() {
    let t = Qkv::gaussian(40, 4, 2, 15);
    let (q, k, out, rep) = (t.path("q.ntsr"), t.path("k.ntsr"), t.path("s.csv"), t.path("s.json"));
    let o = nystra(&["spectrum", "--q", &q, "--k", &k, "--m", "8", "--top", "5", "--out", &out, "--report", &rep]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 6);
    let j: Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(j["sigma_gtilde"].as_array().unwrap().len(), 5);
}

#[test]
fn bench_self_test_fits_exact_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = nystra(&["bench", "--self-test", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("slope 2.0000"), "{}", stdout(&o));
    let fits: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.fit.json")).unwrap()).unwrap();
    assert_eq!(fits["fits"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_small_grid_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = nystra(&[
        "bench", "--n-grid", "32,64,128,256,512", "--d", "8", "--dv", "8", "--m", "4", "--repeats", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next(), Some("method,N,m,d,dv,repeat,wall_time_s,peak_bytes"));
    assert_eq!(csv.lines().count(), 1 + 2 * 5 * 3);
    let s = stdout(&o);
    assert!(s.contains("exact") && s.contains("workspace"), "{s}");
}

#[test]
fn bench_bad_grids_are_usage_errors() {
    assert_eq!(code(&nystra(&["bench", "--n-grid", "", "--out", "/dev/null"])), 2);
    assert_eq!(code(&nystra(&["bench", "--n-grid", "512,256,1024,2048,4096", "--out", "/dev/null"])), 2);
}

#[test]
fn validate_quick_run_passes() {
    let t = Instant::now();
    let o = nystra(&["validate", "--trials", "1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(t.elapsed().as_secs() < 10);
    let s = stdout(&o);
    assert!(s.contains("16 of 16 invariants passed"), "{s}");
    assert!(!s.contains("FAIL"));
}

#[test]
fn validate_fault_injection_names_failing_invariant() {
    let o = Command::new(env!("CARGO_BIN_EXE_nystra"))
        .args(["validate", "--trials", "2"])
        .env("NYSTRA_FAULT", "pinv")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL pinv"), "{}", stdout(&o));
    assert!(stderr(&o).contains("iterative pinv matches svd pinv"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_nystra"))
        .args(["validate", "--trials", "1"])
        .env("NYSTRA_FAULT", "gamma-rays")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flag_prints_usage() {
    let o = nystra(&["approx", "--frobnicate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&nystra(&["--help"])), 0);
}
