use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pseudocbct"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = d.join("pairs");
    for seed in 0..3 {
        let ct = pairs.join(format!("ct_{seed}.vol"));
        let cbct = pairs.join(format!("cbct_{seed}.vol"));
        ok(bin()
            .args(["phantom", "--seed", &seed.to_string(), "--size", "32", "32", "--slices", "2", "--out", p(&ct)])
            .output()
            .unwrap());
        ok(bin()
            .args(["simulate", "--in", p(&ct), "--out", p(&cbct), "--seed", "4", "--no-mask3"])
            .output()
            .unwrap());
    }
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pairs.join("cbct_0.params.json")).unwrap()).unwrap();
    assert_eq!(side.as_array().unwrap().len(), 2);
    assert_eq!(side[0]["switches"]["mask3"], false);
    assert_eq!(side[0]["switches"]["warp"], true);

    let codec = d.join("codec.ckpt");
    ok(bin()
        .args(["train-codec", "--data", p(&pairs), "--factor", "2", "--out", p(&codec)])
        .args(["--epochs", "1", "--widths", "4", "--seed", "1"])
        .output()
        .unwrap());
    let cldm = d.join("cldm.ckpt");
    ok(bin()
        .args(["train-cldm", "--pairs", p(&pairs), "--codec", p(&codec), "--epochs", "1", "--steps", "5"])
        .args(["--seed", "2", "--widths", "4,8", "--out", p(&cldm)])
        .output()
        .unwrap());
    let sel = ok(bin()
        .args(["select-noise", "--cldm", p(&cldm), "--codec", p(&codec)])
        .args(["--cbct", p(&pairs.join("cbct_0.vol")), "--ref", p(&pairs.join("ct_0.vol")), "--candidates", "2"])
        .output()
        .unwrap());
    let sel: serde_json::Value = serde_json::from_slice(&sel.stdout).unwrap();
    assert_eq!(sel["scores"].as_array().unwrap().len(), 2);

    let syn = d.join("syn.vol");
    let gen = |out: &Path| {
        ok(bin()
            .args(["generate", "--cldm", p(&cldm), "--codec", p(&codec), "--in", p(&pairs.join("cbct_1.vol"))])
            .args(["--noise-seed", "3", "--out", p(out)])
            .output()
            .unwrap())
    };
    gen(&syn);
    let again = d.join("syn2.vol");
    gen(&again);
    assert_eq!(std::fs::read(&syn).unwrap(), std::fs::read(&again).unwrap());

    let eval = d.join("eval");
    ok(bin()
        .args(["evaluate", "--syn", p(&syn), "--cbct", p(&pairs.join("cbct_1.vol"))])
        .args(["--ref", p(&pairs.join("ct_1.vol")), "--roi", "16,16", "--out", p(&eval)])
        .output()
        .unwrap());
    assert!(eval.join("report.json").exists());
    assert!(eval.join("histogram.csv").exists());
    assert!(eval.join("colormap_syn_cbct_000.png").exists());
}

#[test]
fn errors_exit_with_their_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.vol");
    let out = bin()
        .args(["simulate", "--in", p(&missing), "--out", p(&dir.path().join("o.vol"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(6));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let bad = dir.path().join("bad.vol");
    std::fs::write(&bad, b"PCBVOL01garbage").unwrap();
    let out = bin()
        .args(["simulate", "--in", p(&bad), "--out", p(&dir.path().join("o.vol"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));

    let out = bin()
        .args(["phantom", "--size", "8", "8", "--out", p(&dir.path().join("x.vol"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_config_round_trips() {
    let out = ok(bin().arg("config").output().unwrap());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = pseudocbct_core::pipeline::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, pseudocbct_core::pipeline::ExperimentConfig::default());
}
