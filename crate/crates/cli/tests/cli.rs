use std::path::Path;
use std::process::{Command, Output};

fn dkfac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkfac")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn cost_on_bundled_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dkfac(&["cost", "--p=4,64", "--alg=dp_kfac,mpd_kfac_mo", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("dp_kfac") && text.contains("mpd_kfac_mo"), "{text}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("cost.json")).unwrap()).unwrap();
    assert_eq!(json["n_g"], 25_503_912);
    assert!(dir.path().join("cost.txt").exists());
}

#[test]
fn cost_on_custom_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("net.txt");
    write(&manifest, "# d_in d_out\n3 4\n5 2\n");
    let out = dkfac(&["cost", manifest.to_str().unwrap(), "--p=2", "--alg=ssgd"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("ssgd"));
}

#[test]
fn verify_oracle_suite_passes() {
    let out = dkfac(&["verify", "oracle", "--seed", "3"]);
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn gen_data_then_train_on_idx() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = dkfac(&["gen-data", "gaussian_blobs", "--samples=200", "--dim=6", "--classes=3", "--prefix=toy", "--out-dir", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let images = dir.path().join("toy-images.idx");
    let labels = dir.path().join("toy-labels.idx");
    assert!(images.exists() && labels.exists(), "{}", stdout(&out));

    let cfg = dir.path().join("run.ini");
    write(
        &cfg,
        &format!(
            "[network]\nlayers = 6, 8, 3\n[data]\nkind = idx\nimages = {}\nlabels = {}\n\
             [train]\nworkers = 2\nbatch_size = 20\nepochs = 1\nlr = 0.01\n",
            images.display(),
            labels.display()
        ),
    );
    let run_dir = dir.path().join("out");
    let out = dkfac(&["train", cfg.to_str().unwrap(), "--seed", "5", "--out-dir", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("iteration,epoch,lr,train_loss"));
    // 200 samples less the 10% evaluation split, 20 per batch.
    assert_eq!(csv.lines().count(), 1 + 9);

    // Replaying the manifest reproduces the metrics byte for byte.
    let replay = dir.path().join("replay");
    let out = dkfac(&["train", run_dir.join("run.json").to_str().unwrap(), "--out-dir", replay.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(csv, std::fs::read_to_string(replay.join("metrics.csv")).unwrap());
}

#[test]
fn train_override_after_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    write(&cfg, "[network]\nlayers = 4, 3\n[data]\nsamples = 60\ndim = 4\nclasses = 3\n[train]\nworkers = 2\nbatch_size = 20\n");
    let out_dir = dir.path().join("o");
    let out = dkfac(&["--out-dir", out_dir.to_str().unwrap(), "train", cfg.to_str().unwrap(), "train.algorithm=ssgd"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("run.json")).unwrap();
    assert!(manifest.contains("ssgd"), "{manifest}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    write(&bad, "[train]\nworkers = many\n");
    let out = dkfac(&["train", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.workers"));

    assert_eq!(dkfac(&["cost", "--alg=nope"]).status.code(), Some(2));
    assert_eq!(dkfac(&["verify", "nope"]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.txt");
    write(&garbage, "3 4\nnot numbers\n");
    assert_eq!(dkfac(&["cost", garbage.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("missing.ini");
    assert_eq!(dkfac(&["train", missing.to_str().unwrap()]).status.code(), Some(2));

    let good = dir.path().join("good.ini");
    write(&good, "[network]\nlayers = 4, 3\n[data]\nsamples = 60\ndim = 4\nclasses = 3\n[train]\nworkers = 2\nbatch_size = 20\n");
    let out = dkfac(&["train", good.to_str().unwrap(), "--out-dir", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}
