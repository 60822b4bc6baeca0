mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use selenc::cli::{run_from, CliError};
use selenc::config::ExperimentSpec;

fn paillier_config(mask_ratio: f64, key: &str) -> String {
    mock_config(mask_ratio).replace("backend = \"mock\"\nexpansion_ratio = 16.66", "backend = \"paillier\"") + key
}

fn mock_config(mask_ratio: f64) -> String {
    format!(
        r#"
seed = 7
n_clients = 3
rounds = 2
weights = [0.5, 0.3, 0.2]
mask_ratio = {mask_ratio}
backend = "mock"
expansion_ratio = 16.66

[model]
layers = [4, 8, 2]

[data]
kind = "synthetic"
samples_per_client = 8
noise = 0.05
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn selenc(out: &Path, args: &[&str]) -> Result<String, CliError> {
    let mut argv = vec!["selenc".to_string(), "--out-dir".into(), out.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_from(argv)
}

/// Data rows of a CSV written by the CLI, header comment skipped.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (header, rows) = read_csv(path);
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    rows.into_iter().map(|r| r[i].clone()).collect()
}

fn floats(path: &Path, name: &str) -> Vec<f64> {
    column(path, name).iter().map(|v| v.parse().unwrap()).collect()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn keygen_is_deterministic_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        selenc(dir, &["keygen", "--bits", "1024", "--seed", "7"]).unwrap();
    }
    assert_eq!(files_in(&a), ["public_key.json", "secret_key.json"]);
    for name in files_in(&a) {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn threshold_keygen_writes_shares_only() {
    let tmp = tempfile::tempdir().unwrap();
    let keys = tmp.path().join("keys");
    selenc(tmp.path(), &["keygen", "--bits", "1024", "--seed", "3", "--threshold", "5:3", "--out", keys.to_str().unwrap()])
        .unwrap();
    let names = files_in(&keys);
    assert_eq!(names.iter().filter(|n| n.starts_with("share_")).count(), 5);
    assert!(!names.contains(&"secret_key.json".to_string()));

    for bad in ["3:5", "5", "a:b", "5:0"] {
        let err = selenc(tmp.path(), &["keygen", "--bits", "1024", "--seed", "3", "--threshold", bad]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}: {err}");
    }
    assert!(selenc(tmp.path(), &["keygen", "--bits", "100", "--seed", "3"]).is_err());
}

#[test]
fn training_from_threshold_shares_needs_k_of_them() {
    let tmp = tempfile::tempdir().unwrap();
    let keys = tmp.path().join("keys");
    selenc(tmp.path(), &["keygen", "--bits", "1024", "--seed", "5", "--threshold", "4:2", "--out", keys.to_str().unwrap()])
        .unwrap();
    let text = paillier_config(0.5, "\n[key]\nsecurity_bits = 1024\ndir = \"keys\"\n");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    fs::remove_file(keys.join("share_1.json")).unwrap();
    fs::remove_file(keys.join("share_3.json")).unwrap();
    let out = selenc(&tmp.path().join("out"), &["train", "--config", cfg.to_str().unwrap()]).unwrap();
    assert!(out.starts_with("summary"), "{out}");

    // the key size in the config has to match the key on disk
    let wrong = write_config(tmp.path(), "wrong.toml", &text.replace("security_bits = 1024", "security_bits = 2048"));
    let err = selenc(&tmp.path().join("out"), &["train", "--config", wrong.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.kind(), "config");

    fs::remove_file(keys.join("share_2.json")).unwrap();
    let err = selenc(&tmp.path().join("out"), &["train", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.kind(), "keys", "{err}");
}

#[test]
fn unknown_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &(mock_config(0.1) + "\n[extra]\nbogus_key = 1\n"));
    let err = selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("extra"), "{err}");

    let nested = mock_config(0.1).replace("noise = 0.05", "noise = 0.05\nsamples = 3");
    let cfg = write_config(tmp.path(), "nested.toml", &nested);
    let err = selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert!(err.to_string().contains("samples"), "{err}");
}

#[test]
fn invalid_configs_fail_before_key_work() {
    let tmp = tempfile::tempdir().unwrap();
    // a missing key directory would be a keys error; validation comes first
    let text = paillier_config(0.1, "\n[key]\ndir = \"nowhere\"\n").replace("[0.5, 0.3, 0.2]", "[0.5, 0.3, 0.3]");
    let cfg = write_config(tmp.path(), "w.toml", &text);
    let err = selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.kind(), "config", "{err}");
    assert!(err.to_string().contains("weights"), "{err}");
    assert!(files_in(tmp.path()).iter().all(|n| n.ends_with(".toml")));
}

#[test]
fn binary_reports_errors_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &mock_config(1.5));
    let out = Command::new(env!("CARGO_BIN_EXE_selenc"))
        .args(["--out-dir", tmp.path().to_str().unwrap(), "train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("mask_ratio"));

    let ok = Command::new(env!("CARGO_BIN_EXE_selenc")).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let help = String::from_utf8(ok.stdout).unwrap();
    for sub in ["keygen", "sensitivity", "mask", "train", "budget", "attack", "bench"] {
        assert!(help.contains(sub), "{sub}");
    }
}

#[test]
fn train_p_zero_equals_the_plain_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "p0.toml", &mock_config(0.0));
    let out = selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap();
    for needle in ["bytes up", "wall time", "epsilon total inf", "final training loss"] {
        assert!(out.contains(needle), "{needle} missing from\n{out}");
    }
    let spec = ExperimentSpec::load(&cfg).unwrap();
    let r = &spec.round;
    let want = common::oracle_fedavg(
        &spec.shape,
        &spec.datasets().unwrap(),
        &r.weights,
        r.rounds,
        r.local_steps,
        r.lr,
        r.seed,
        &r.dropout,
    );
    let got = column(&tmp.path().join("model.csv"), "value");
    let want: Vec<String> = want.iter().map(|v| format!("{v:?}")).collect();
    assert_eq!(got, want);
}

#[test]
fn mock_reports_the_configured_expansion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "full.toml", &mock_config(1.0));
    selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap();
    let metrics = tmp.path().join("metrics.csv");
    let phase = column(&metrics, "phase");
    let up = floats(&metrics, "bytes_up");
    let params = 4 * 8 + 8 + 8 * 2 + 2;
    for (ph, bytes) in phase.iter().zip(&up) {
        if ph == "train" {
            let ratio = bytes / (8.0 * params as f64);
            assert!((ratio - 16.66).abs() < 1e-3, "{ratio}");
        }
    }
}

/// Encrypted upload bytes of one client, from `metrics.csv` and `model.csv`.
fn encrypted_upload_bytes(dir: &Path) -> f64 {
    let metrics = dir.join("metrics.csv");
    let up = floats(&metrics, "bytes_up");
    let phase = column(&metrics, "phase");
    let train_up = phase.iter().zip(&up).find(|(p, _)| *p == "train").map(|(_, b)| *b).unwrap();
    let flags = column(&dir.join("model.csv"), "encrypted");
    let clear = flags.iter().filter(|f| *f == "0").count();
    train_up - 8.0 * clear as f64
}

#[test]
fn ten_percent_mask_costs_about_a_tenth() {
    let tmp = tempfile::tempdir().unwrap();
    let paillier = |p: f64| paillier_config(p, "\n[key]\nsecurity_bits = 1024\n").replace("[4, 8, 2]", "[16, 16, 8]");
    let mut bytes = Vec::new();
    for (name, p) in [("ten", 0.1), ("all", 1.0)] {
        let cfg = write_config(tmp.path(), &format!("{name}.toml"), &paillier(p));
        let out = tmp.path().join(name);
        selenc(&out, &["train", "--config", cfg.to_str().unwrap()]).unwrap();
        bytes.push(encrypted_upload_bytes(&out));
    }
    // 1024-bit blocks: 4-byte length plus 256 bytes, 12 slots each
    let block = 260.0;
    assert!((bytes[0] - 0.1 * bytes[1]).abs() <= block, "{bytes:?}");
}

#[test]
fn budget_ratios_and_full_encryption() {
    let tmp = tempfile::tempdir().unwrap();
    selenc(tmp.path(), &["--seed", "1", "budget", "--p", "0.5", "--policy", "selective", "--trials", "200"]).unwrap();
    let ratio = floats(&tmp.path().join("budget.csv"), "ratio_to_j");
    assert!((ratio[0] - 0.25).abs() < 0.01, "{ratio:?}");

    selenc(tmp.path(), &["--seed", "1", "budget", "--p", "0.5", "--policy", "random", "--trials", "200"]).unwrap();
    let ratio = floats(&tmp.path().join("budget.csv"), "ratio_to_j");
    assert!((ratio[0] - 0.5).abs() < 0.01, "{ratio:?}");

    selenc(tmp.path(), &["budget", "--p", "1", "--trials", "20"]).unwrap();
    let path = tmp.path().join("budget.csv");
    assert_eq!(column(&path, "epsilon"), ["0.0", "0.0"]);

    assert_eq!(selenc(tmp.path(), &["budget", "--policy", "some"]).unwrap_err().exit_code(), 2);
    assert!(selenc(tmp.path(), &["budget", "--p", "1.5"]).is_err());
}

#[test]
fn attack_curve_has_both_policies_and_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--seed", "3", "attack", "--seeds", "2", "--iters", "20", "--restarts", "2", "--p-grid", "0,0.5,1"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    selenc(&a, &args).unwrap();
    selenc(&b, &args).unwrap();
    for name in ["attack_runs.csv", "defense_curve.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let curve = a.join("defense_curve.csv");
    let (header, _) = read_csv(&curve);
    for col in ["p", "selective_median_mse", "random_median_mse", "tau_median"] {
        assert!(header.contains(&col.to_string()), "{col}");
    }
    assert_eq!(floats(&curve, "p"), [0.0, 0.5, 1.0]);

    // file options, overridden by flags
    let opts = write_config(tmp.path(), "attack.toml", "policy = \"random\"\nseeds = 1\niters = 5\nrestarts = 1\np_grid = [0.0, 1.0]\n");
    let c = tmp.path().join("c");
    selenc(&c, &["attack", "--config", opts.to_str().unwrap(), "--iters", "6"]).unwrap();
    let (header, rows) = read_csv(&c.join("defense_curve.csv"));
    assert!(!header.contains(&"selective_median_mse".to_string()));
    assert_eq!(rows.len(), 2);
    assert!(column(&c.join("attack_runs.csv"), "iters").iter().all(|v| v == "6"));
    let bad = write_config(tmp.path(), "bad.toml", "polcy = \"random\"\n");
    assert_eq!(selenc(&c, &["attack", "--config", bad.to_str().unwrap()]).unwrap_err().kind(), "config");
}

#[test]
fn bench_reports_median_and_iqr() {
    let tmp = tempfile::tempdir().unwrap();
    selenc(
        tmp.path(),
        &["bench", "--backend", "mock", "--model-params", "1000,10000", "--ratios", "0,0.1,1", "--repeat", "5"],
    )
    .unwrap();
    let path = tmp.path().join("bench.csv");
    let (header, rows) = read_csv(&path);
    assert_eq!(rows.len(), 6);
    for col in ["enc_ms_median", "enc_ms_iqr", "agg_ms_median", "dec_ms_iqr", "bytes"] {
        assert!(header.contains(&col.to_string()), "{col}");
    }
    let bytes = floats(&path, "bytes");
    // ratio 0 sends the model in the clear
    assert_eq!(bytes[0], 8000.0);
}

#[test]
fn outputs_carry_provenance_and_json_lines_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "m.toml", &mock_config(0.1));
    selenc(tmp.path(), &["--format", "json-lines", "--seed", "12", "train", "--config", cfg.to_str().unwrap()]).unwrap();
    let text = fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["header"]["seed"], 12);
    assert_eq!(header["header"]["config"].as_str().unwrap().len(), 64);
    let rows: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!rows.is_empty());
    for key in ["round", "client", "phase", "bytes_up", "bytes_down", "enc_ms", "agg_ms", "dec_ms", "train_ms", "epsilon_round", "epsilon_total"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }

    selenc(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]).unwrap();
    let first = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let first = first.lines().next().unwrap();
    assert!(first.starts_with("# selenc ") && first.contains("config=") && first.contains("seed=7"), "{first}");
}

#[test]
fn sensitivity_and_mask_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "m.toml", &mock_config(0.25));
    selenc(tmp.path(), &["sensitivity", "--config", cfg.to_str().unwrap()]).unwrap();
    let sens = tmp.path().join("sensitivity.csv");
    let (header, rows) = read_csv(&sens);
    assert_eq!(header, ["index", "layer", "aggregate", "client_0", "client_1", "client_2"]);
    assert_eq!(rows.len(), 58);
    assert!(floats(&sens, "aggregate").iter().all(|s| *s >= 0.0));

    let out = selenc(tmp.path(), &["mask", "--config", cfg.to_str().unwrap(), "--p", "0.5"]).unwrap();
    assert!(out.contains("encrypting 29 of 58"), "{out}");
    let bin = fs::read(tmp.path().join("mask.bin")).unwrap();
    let mask = selenc_core::mask::EncryptionMask::from_bytes(&bin).unwrap();
    let flags = column(&tmp.path().join("mask.csv"), "encrypted");
    assert_eq!(flags.iter().filter(|f| *f == "1").count(), mask.encrypted_count());
    assert!(selenc(tmp.path(), &["mask", "--config", cfg.to_str().unwrap(), "--p", "2"]).is_err());
}
