use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hsunmix::io::{load_cube, load_estimates, RunConfig};
use hsunmix::mixing::ppnmm_image;

fn hsunmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsunmix"))
        .args(args)
        .env_remove("HSUNMIX_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hsunmix(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "channels = 6\nspectral_channels = 4\nca_reduction = 2\nepochs = 4\nlr_rest = 0.003\n";

#[test]
fn synth_writes_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth", "--model", "ppnmm", "--rows", "10", "--cols", "12", "-R", "4", "-L", "24", "--snr", "30", "--seed", "7", "-o", p(&d)]);
    for f in ["cube.bin", "cube.bin.json", "abund.bin", "endmembers.csv", "bfield.bin", "meta.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(load_cube(&d.join("cube.bin")).unwrap().tensor().shape(), &[10, 12, 24]);

    let lmm = dir.path().join("lmm");
    ok(&["synth", "--model", "lmm", "--rows", "6", "--cols", "6", "-R", "3", "-L", "10", "-o", p(&lmm)]);
    assert!(lmm.join("cube.bin").exists() && !lmm.join("bfield.bin").exists());
}

#[test]
fn clean_cube_is_the_forward_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth", "--model", "ppnmm", "--rows", "8", "--cols", "9", "-R", "3", "-L", "16", "--snr", "clean", "--seed", "3", "-o", p(&d)]);
    let truth = load_estimates(&d).unwrap();
    let y = load_cube(&d.join("cube.bin")).unwrap();
    let model = ppnmm_image(&truth.abundances, &truth.endmembers, truth.bfield.as_ref().unwrap()).unwrap();
    for (a, b) in y.tensor().data().iter().zip(model.tensor().data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn train_is_deterministic_and_eval_scores_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth", "--model", "ppnmm", "--rows", "12", "--cols", "12", "-R", "3", "-L", "16", "--snr", "30", "--seed", "5", "-o", p(&d)]);
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, TINY).unwrap();
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        ok(&["train", "-d", p(&d), "-c", p(&cfg), "-o", p(run), "--seed", "1"]);
    }
    for f in ["losses.csv", "checkpoint.bin", "endmembers.csv", "abund.bin"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    for f in ["timing.csv", "bfield.bin", "config.txt", "abund_0.pgm", "abund_2.pgm"] {
        assert!(runs[0].join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(runs[0].join("losses.csv")).unwrap().lines().count(), 5);

    let echoed = fs::read_to_string(runs[0].join("config.txt")).unwrap();
    let resolved = RunConfig::parse(&echoed).unwrap();
    assert_eq!(resolved.to_text(), echoed);
    assert_eq!((resolved.encoder.channels, resolved.train.seed, resolved.train.epochs), (6, 1, 4));

    let out = ok(&["eval", "--run", p(&runs[0]), "-d", p(&d)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["permutation"].as_array().unwrap().len(), 3);
    assert!(report["rmse_abun"].as_f64().unwrap() > 0.0);
    assert!(report["rmse_b"].is_number());
    assert!(runs[0].join("eval.json").exists() && runs[0].join("b_hist.csv").exists());
}

#[test]
fn train_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth", "--model", "lmm", "--rows", "10", "--cols", "10", "-R", "2", "-L", "16", "--snr", "40", "-o", p(&d)]);
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, TINY).unwrap();
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        ok(&[
            "train", "-d", p(&d), "-c", p(&cfg), "-o", p(run), "--init", "farthest_point", "--ablate", "spectral",
            "--epochs", "2", "--set", "gamma=2",
        ]);
    }
    let init = |r: &Path| fs::read(r.join("init_endmembers.csv")).unwrap();
    assert_eq!(init(&runs[0]), init(&runs[1]));
    let cfg = RunConfig::parse(&fs::read_to_string(runs[0].join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg.ablation, hsunmix::encoder::Ablation::NoSpectral);
    assert_eq!((cfg.train.epochs, cfg.encoder.gamma), (2, 2.0));
    assert_eq!(cfg.init, hsunmix::init::InitMethod::FarthestPoint);
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    for (model, has_b) in [("ppnmm", true), ("lmm", false)] {
        let d = dir.path().join(model);
        ok(&["synth", "--model", model, "--rows", "6", "--cols", "7", "-R", "3", "-L", "12", "--snr", "30", "-o", p(&d)]);
        let json = dir.path().join(format!("{model}.json"));
        let out = ok(&["eval", "--run", p(&d), "-d", p(&d), "-o", p(&json)]);
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["rmse_abun"].as_f64(), Some(0.0));
        assert_eq!(report["sad_end"].as_f64(), Some(0.0));
        assert_eq!(report.get("rmse_b").is_some(), has_b, "{report}");
        if has_b {
            assert_eq!(report["rmse_b"].as_f64(), Some(0.0));
        }
        assert_eq!(report["permutation"], serde_json::json!([0, 1, 2]));
        let on_disk: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(on_disk, report);
    }
}

#[test]
fn eval_rejects_mismatched_endmember_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--model", "lmm", "--rows", "5", "--cols", "5", "-R", "2", "-L", "8", "-o", p(&a)]);
    ok(&["synth", "--model", "lmm", "--rows", "5", "--cols", "5", "-R", "3", "-L", "8", "-o", p(&b)]);
    let out = hsunmix(&["eval", "--run", p(&a), "-d", p(&b)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("msda_block") && text.contains("mhsa_block") && !text.contains("FAIL"), "{text}");
    let out = ok(&["gradcheck", "--op", "swda"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("pass")).count(), 1);
    let out = ok(&["gradcheck", "--op", "conv2d", "--eps", "5e-3"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("eps 0.005"));
    assert_eq!(hsunmix(&["gradcheck", "--op", "nothing"]).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hsunmix(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hsunmix(&["synth", "--rows", "3"]).status.code(), Some(1));
    let missing = dir.path().join("nothing");
    assert_eq!(
        hsunmix(&["train", "-d", p(&missing), "-o", p(&dir.path().join("r")), "-R", "2"]).status.code(),
        Some(2)
    );
    let d = dir.path().join("d");
    ok(&["synth", "--model", "lmm", "--rows", "5", "--cols", "5", "-R", "2", "-L", "8", "-o", p(&d)]);
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "epocs = 3\n").unwrap();
    let out = hsunmix(&["train", "-d", p(&d), "-c", p(&cfg), "-o", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    fs::write(d.join("cube.bin"), [0u8; 12]).unwrap();
    let out = hsunmix(&["train", "-d", p(&d), "-o", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("length mismatch"));
}
