use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = dfm(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let out = dir.join(format!("out-{name}"));
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, format!("out_dir = {:?}\n{body}", out.display().to_string())).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_data_families() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("pm.json");
    ok(&["make-data", "--family", "point-mass", "--size", "3", "--point", "2,0,1", "--out", s(&p)]);
    let v = read_json(&p);
    assert_eq!(v["entries"].as_array().unwrap().len(), 1);
    assert_eq!(v["entries"][0]["tokens"], serde_json::json!([2, 0, 1]));

    let p = dir.path().join("parity.json");
    ok(&["make-data", "--family", "parity", "--size", "2", "--dims", "4", "--out", s(&p)]);
    let entries = read_json(&p)["entries"].as_array().unwrap().clone();
    assert_eq!(entries.len(), 8);
    for e in &entries {
        assert!((e["p"].as_f64().unwrap() - 0.125).abs() < 1e-12);
        let sum: u64 = e["tokens"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).sum();
        assert_eq!(sum % 2, 0);
    }

    let p = dir.path().join("gmm.json");
    let out = ok(&["make-data", "--family", "gaussian-mixture-labeled", "--weights", "0.3,0.7", "--means", "-2,2", "--n", "50", "--out", s(&p)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("50 joint points"));
}

#[test]
fn data_file_round_trips_through_config() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("toy.json");
    ok(&["make-data", "--family", "structured-toy", "--out", s(&data)]);
    let inline = write_config(dir.path(), "inline", "flow = \"masking\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n[eval]\nn_samples = 400\n");
    let file = write_config(
        dir.path(),
        "file",
        &format!("flow = \"masking\"\nsize = 4\ndims = 3\n[data]\nfamily = \"file\"\npath = {:?}\n[eval]\nn_samples = 400\n", s(&data)),
    );
    ok(&["sample", "-c", s(&inline)]);
    ok(&["sample", "-c", s(&file)]);
    let a = std::fs::read(dir.path().join("out-inline/samples.json")).unwrap();
    let b = std::fs::read(dir.path().join("out-file/samples.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic_and_zero_steps_is_init() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 3\nflow = \"masking\"\nsize = 2\ndims = 4\n[data]\nfamily = \"parity\"\n[denoiser]\nkind = \"mlp\"\nhidden = 16\n";
    let cfg = write_config(dir.path(), "p", body);
    let out = dir.path().join("out-p");
    let run = |steps: &str, sub: &str| {
        let o = dir.path().join(sub);
        ok(&["train", "-c", s(&cfg), "--steps", steps, "--out-dir", s(&o)]);
        o
    };
    let a = run("50", "a");
    let b = run("50", "b");
    assert_eq!(std::fs::read(a.join("losses.csv")).unwrap(), std::fs::read(b.join("losses.csv")).unwrap());

    let z = run("0", "z");
    let init = read_json(&z.join("checkpoint.json"));
    let again = run("0", "z2");
    let init2 = read_json(&again.join("checkpoint.json"));
    assert_eq!(init["layers"], init2["layers"]);
    assert_ne!(read_json(&a.join("checkpoint.json"))["layers"], init["layers"]);
    assert!(!out.exists());
}

#[test]
fn training_reduces_parity_loss() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 1\nflow = \"masking\"\nsize = 2\ndims = 4\n[data]\nfamily = \"parity\"\n[denoiser]\nkind = \"mlp\"\nhidden = 32\n[denoiser.train]\nsteps = 20000\nlearning_rate = 0.02\nbatch_size = 64\n";
    let cfg = write_config(dir.path(), "p", body);
    ok(&["train", "-c", s(&cfg)]);
    let text = std::fs::read_to_string(dir.path().join("out-p/losses.csv")).unwrap();
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 20000);
    let window = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (window(&losses[..500]), window(&losses[losses.len() - 500..]));
    assert!(last < 0.95 * first, "first {first} last {last}");

    // Sampling from the checkpoint uses the trained model.
    ok(&["sample", "-c", s(&cfg), "--checkpoint", s(&dir.path().join("out-p/checkpoint.json")), "--n", "200"]);
}

#[test]
fn sample_errors_and_edge_cases() {
    let dir = TempDir::new().unwrap();
    let uni = write_config(dir.path(), "u", "flow = \"uniform\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n");
    let out = dfm(&["sample", "-c", s(&uni), "--scheme", "masking-fast"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    ok(&["sample", "-c", s(&uni), "--n", "0"]);
    let v = read_json(&dir.path().join("out-u/samples.json"));
    assert_eq!(v.as_array().unwrap().len(), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("out-u/trajectories.jsonl")).unwrap(), "");

    let mlp = write_config(dir.path(), "m", "flow = \"masking\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n[denoiser]\nkind = \"mlp\"\n");
    assert_eq!(code(&dfm(&["sample", "-c", s(&mlp)])), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "flow = \"masking\"\nsize = 4\ndims = 3\nbogus = 1\n[data]\nfamily = \"structured_toy\"\n").unwrap();
    assert_eq!(code(&dfm(&["sample", "-c", s(&bad)])), 2);
    assert_eq!(code(&dfm(&["make-data", "--family", "nope", "--out", "x.json"])), 2);

    let mismatch = write_config(dir.path(), "mm", "flow = \"masking\"\nsize = 3\ndims = 3\n[data]\nfamily = \"structured_toy\"\n");
    assert_eq!(code(&dfm(&["sample", "-c", s(&mismatch)])), 4);
}

#[test]
fn point_mass_pipeline() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 5\nflow = \"masking\"\nsize = 3\ndims = 2\n[data]\nfamily = \"point_mass\"\npoint = [2, 1]\n[sampler]\ndt = 0.01\neta = 2.0\n[eval]\nn_samples = 300\n";
    let cfg = write_config(dir.path(), "pm", body);
    ok(&["sample", "-c", s(&cfg)]);
    let samples = read_json(&dir.path().join("out-pm/samples.json"));
    assert_eq!(samples.as_array().unwrap().len(), 300);
    assert!(samples.as_array().unwrap().iter().all(|x| x == &serde_json::json!([2, 1])));
    let jsonl = std::fs::read_to_string(dir.path().join("out-pm/trajectories.jsonl")).unwrap();
    for line in jsonl.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for k in ["traj", "t", "dim", "from", "to"] {
            assert!(v.get(k).is_some(), "{line}");
        }
    }
    ok(&["eval", "-c", s(&cfg)]);
    let report = read_json(&dir.path().join("out-pm/report.json"));
    assert!(report["metrics"]["tv"]["value"].as_f64().unwrap().abs() < 1e-12);
    // Token frequencies are half 2s and half 1s.
    assert!((report["metrics"]["entropy_bits"]["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("out-pm/report.csv")).unwrap();
    assert!(csv.starts_with("name,value,stderr,n"));
}

#[test]
fn elbo_of_uniform_bits_is_one() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 11\nflow = \"masking\"\nsize = 2\ndims = 3\n[data]\nfamily = \"iid_uniform\"\n[eval]\nmetrics = [\"elbo\"]\nmc_samples = 20000\n";
    let cfg = write_config(dir.path(), "e", body);
    std::fs::create_dir_all(dir.path().join("out-e")).unwrap();
    std::fs::write(dir.path().join("out-e/samples.json"), "[[0,1,0]]").unwrap();
    ok(&["eval", "-c", s(&cfg)]);
    let m = &read_json(&dir.path().join("out-e/report.json"))["metrics"]["elbo_bits_per_token"];
    let (v, se) = (m["value"].as_f64().unwrap(), m["stderr"].as_f64().unwrap());
    assert!((v - 1.0).abs() <= 3.0 * se, "{v} ± {se}");
}

#[test]
fn sweep_grid_and_determinism() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 9\nflow = \"masking\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n[sampler]\ndt = 0.02\n";
    let cfg = write_config(dir.path(), "sw", body);
    let run = |sub: &str| {
        let o = dir.path().join(sub);
        ok(&["sweep", "-c", s(&cfg), "--etas", "0,4", "--temperatures", "0.5,1", "--n", "200", "--out-dir", s(&o)]);
        o
    };
    let a = run("a");
    let b = run("b");
    let text = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "eta,temperature,tv,entropy_bits,mean_jumps,jumps_stderr,n");
    assert_eq!(text.lines().count(), 5);
    let (ja, jb) = (read_json(&a.join("sweep.json")), read_json(&b.join("sweep.json")));
    assert_eq!(ja["rows"], jb["rows"]);
    assert_eq!(ja["seed"], 9);
}

#[test]
fn same_config_same_hash_and_outputs() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 2\nflow = \"uniform\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n[sampler]\ndt = 0.02\neta = 1.0\n[eval]\nn_samples = 300\n";
    let cfg = write_config(dir.path(), "d", body);
    let first = ok(&["sample", "-c", s(&cfg)]);
    let a = std::fs::read(dir.path().join("out-d/samples.json")).unwrap();
    ok(&["eval", "-c", s(&cfg)]);
    let ra = read_json(&dir.path().join("out-d/report.json"));
    let second = ok(&["sample", "-c", s(&cfg)]);
    let b = std::fs::read(dir.path().join("out-d/samples.json")).unwrap();
    ok(&["eval", "-c", s(&cfg)]);
    let rb = read_json(&dir.path().join("out-d/report.json"));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn joint_sampling_modes() {
    let dir = TempDir::new().unwrap();
    let body = "seed = 4\nflow = \"masking\"\nsize = 2\ndims = 1\n[data]\nfamily = \"gaussian_mixture_labeled\"\nweights = [0.5, 0.5]\nmeans = [-3.0, 3.0]\nsigma = 0.5\n[sampler]\ndt = 0.01\n[eval]\nn_samples = 100\n";
    let cfg = write_config(dir.path(), "j", body);
    ok(&["sample", "-c", s(&cfg)]);
    let v = read_json(&dir.path().join("out-j/samples.json"));
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 100);
    // Tokens carry the component label, so the coordinate sits on the matching side.
    let agree = rows
        .iter()
        .filter(|r| (r["coords"][0].as_f64().unwrap() > 0.0) == (r["tokens"][0].as_u64().unwrap() == 1))
        .count();
    assert!(agree >= 95, "{agree}");

    ok(&["sample", "-c", s(&cfg), "--mode", "fix-tokens", "--condition", "1"]);
    let v = read_json(&dir.path().join("out-j/samples.json"));
    assert!(v.as_array().unwrap().iter().all(|r| r["tokens"] == serde_json::json!([1])));

    ok(&["sample", "-c", s(&cfg), "--mode", "fix-coords", "--condition", "-3"]);
    let v = read_json(&dir.path().join("out-j/samples.json"));
    assert!(v.as_array().unwrap().iter().all(|r| r["coords"] == serde_json::json!([-3.0])));

    let uni = write_config(dir.path(), "ju", &body.replace("\"masking\"", "\"uniform\""));
    assert_eq!(code(&dfm(&["sample", "-c", s(&uni)])), 4);
    let tab = write_config(dir.path(), "t", "flow = \"masking\"\nsize = 4\ndims = 3\n[data]\nfamily = \"structured_toy\"\n");
    assert_eq!(code(&dfm(&["sample", "-c", s(&tab), "--mode", "fix-tokens", "--condition", "1"])), 2);
}
