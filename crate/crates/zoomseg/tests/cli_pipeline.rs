//! End-to-end runs of the `zoomseg` binary on a small synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

use zoomseg::checkpoint::Checkpoint;
use zoomseg::report::{AblationReport, EvaluationReport};
use zoomseg_core::train::{TrainConfig, SYSTEM_ENSEMBLE, SYSTEM_PRE_FINETUNE};

fn zoomseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoomseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = zoomseg(args);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "{args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_config(dir: &Path) -> String {
    let mut c = TrainConfig::desk();
    c.zoom_in.patch_extents = [8, 8, 8];
    c.zoom_in.epochs = 4;
    c.zoom_in.schedule.t0 = 2;
    c.zoom_in.dev_every = 2;
    c.zoom_out.patch_extents = [16, 16, 16];
    c.zoom_out.epochs = 3;
    c.zoom_out.schedule.t0 = 1;
    c.zoom_out.snapshot_epochs = vec![1, 2, 3];
    c.zoom_out.dev_every = 3;
    c.inference_crop = [16, 16, 16];
    let path = dir.join("quick.json");
    std::fs::write(&path, zoomseg::config::to_json(&c)).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_train_predict_evaluate_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let out = ok(&["synth", "--out", s(&data), "--train", "3", "--dev", "1", "--test", "4", "--dim", "20", "--seed", "7"]);
    assert!(out.contains("wrote 8 scans"));
    let manifest = data.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert_eq!(text.lines().filter(|l| l.ends_with(",test")).count(), 4);

    let cfg = quick_config(root);
    let run = root.join("run");
    let header = ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&run)]);
    assert!(header.contains("ZoomIn: input 8x8x8"), "{header}");
    for f in ["final.lfck", "pre_finetune.lfck", "best_dev.lfck", "history.json", "snapshot_epoch1.lfck", "snapshot_epoch3.lfck"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let f = Checkpoint::load(run.join("pre_finetune.lfck")).unwrap();
    assert_eq!(f.meta.system, SYSTEM_PRE_FINETUNE);
    assert_eq!(f.meta.history.len(), 4);
    assert_eq!(Checkpoint::load(run.join("snapshot_epoch2.lfck")).unwrap().meta.system, SYSTEM_ENSEMBLE);

    let (pred_f, pred, pred_e) = (root.join("pf"), root.join("p"), root.join("pe"));
    ok(&["predict", "--ckpt", s(&run.join("pre_finetune.lfck")), "--manifest", s(&manifest), "--out-dir", s(&pred_f)]);
    ok(&["predict", "--ckpt", s(&run.join("final.lfck")), "--manifest", s(&manifest), "--out-dir", s(&pred)]);
    let snaps: Vec<String> = (1..=3).map(|e| s(&run.join(format!("snapshot_epoch{e}.lfck"))).to_string()).collect();
    let mut args = vec!["predict", "--ensemble"];
    args.extend(snaps.iter().map(String::as_str));
    args.extend(["--manifest", s(&manifest), "--out-dir", s(&pred_e)]);
    ok(&args);

    let single_in = data.join("images/synth_004.nii.gz");
    let (prob, mask) = (root.join("one.nii.gz"), root.join("one_mask.nii.gz"));
    ok(&["predict", "--ckpt", s(&run.join("final.lfck")), "--in", s(&single_in), "--out", s(&prob), "--crop", "16,16,12", "--mask-out", s(&mask)]);
    let pv = zoomseg::nifti::read_volume(&prob).unwrap();
    assert_eq!(pv.extents(), [20, 20, 20]);
    assert_eq!(pv.get([0, 0, 0]), 0.0);
    assert!(zoomseg::nifti::read_mask(&mask).is_ok());

    let reports: Vec<_> = [("F", &pred_f, "3D-ResU-Net-F"), ("final", &pred, "3D-ResU-Net"), ("E", &pred_e, "3D-ResU-Net-E")]
        .iter()
        .map(|(tag, dir, system)| {
            let r = root.join(format!("report_{tag}.json"));
            let table = ok(&["evaluate", "--pred", s(dir), "--manifest", s(&manifest), "--out", s(&r), "--bootstrap", "500", "--seed", "1", "--system", system]);
            assert!(table.starts_with("Methods\tDSC\tmDSC\tHD (mm)"), "{table}");
            r
        })
        .collect();
    for r in &reports {
        assert!(ok(&["evaluate", "--verify", s(r)]).contains("zero discrepancy"));
        let rep = EvaluationReport::load(r).unwrap();
        assert_eq!(rep.per_scan.len(), 4);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r).unwrap()).unwrap();
        for key in ["dsc", "mdsc", "hd_mm", "assd_mm", "tpr", "precision"] {
            assert!(json["aggregate"][key]["mean"].is_number() || json["aggregate"][key]["mean"].is_null(), "{key}");
        }
        assert!(json["micro_dsc"].is_number());
    }

    let ablation = root.join("ablation.json");
    let t5 = ok(&["compare", "--a", s(&reports[0]), "--b", s(&reports[1]), "--out", s(&ablation)]);
    assert_eq!(t5.lines().count(), 4);
    assert!(t5.lines().nth(3).unwrap().starts_with('Δ'));
    let ab = AblationReport::load(&ablation).unwrap();
    assert_eq!(ab.a.system, "3D-ResU-Net-F");
    let t2 = ok(&["summary", "--report", s(&reports[1]), "--report", s(&reports[2])]);
    assert_eq!(t2.lines().count(), 3);
    assert!(t2.lines().nth(2).unwrap().starts_with("3D-ResU-Net-E\t"));
    let t4 = ok(&["stratify", "--report", s(&reports[1])]);
    assert!(t4.contains("0-25%") && t4.contains("75-100%") && t4.contains("R^2"));

    // A tampered report fails verification with exit code 1.
    let mut rep = EvaluationReport::load(&reports[1]).unwrap();
    rep.micro_dsc += 0.5;
    let bad = root.join("bad.json");
    rep.save(&bad).unwrap();
    assert_eq!(zoomseg(&["evaluate", "--verify", s(&bad)]).status.code(), Some(1));
}

#[test]
fn training_is_seed_deterministic_and_stages_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--train", "2", "--dev", "1", "--test", "0", "--dim", "16", "--seed", "3"]);
    let manifest = data.join("manifest.csv");
    let cfg = quick_config(root);
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&a), "--seed", "5"]);
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&b), "--seed", "5"]);
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&c), "--seed", "5", "--stage", "zoomin"]);
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&c), "--seed", "5", "--stage", "zoomout"]);
    for f in ["final.lfck", "pre_finetune.lfck", "snapshot_epoch2.lfck", "history.json"] {
        let bytes = std::fs::read(a.join(f)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(f)).unwrap(), "{f} differs between identical runs");
        assert_eq!(bytes, std::fs::read(c.join(f)).unwrap(), "{f} differs between staged and combined runs");
    }
    let d = root.join("d");
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&d), "--seed", "6"]);
    assert_ne!(std::fs::read(a.join("final.lfck")).unwrap(), std::fs::read(d.join("final.lfck")).unwrap());
}

#[test]
fn exit_codes() {
    assert_eq!(zoomseg(&[]).status.code(), Some(2));
    assert_eq!(zoomseg(&["train", "--config", "desk"]).status.code(), Some(2));
    assert_eq!(zoomseg(&["synth", "--out", "x", "--train", "many", "--dev", "1", "--test", "1"]).status.code(), Some(2));
    let o = zoomseg(&["train", "--config", "desk", "--manifest", "/nonexistent.csv", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(zoomseg(&["stratify", "--report", "/nonexistent.json"]).status.code(), Some(1));
}

#[test]
fn paper_config_echoes_its_hyperparameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--train", "1", "--dev", "0", "--test", "0", "--dim", "16", "--seed", "1"]);
    // The 52-layer model on 128³ patches cannot fit a 16³ scan, so the run
    // stops after printing its header.
    let paper = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.json");
    let o = zoomseg(&["train", "--config", s(&paper), "--manifest", s(&data.join("manifest.csv")), "--out", s(&tmp.path().join("run"))]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    for needle in ["1200 epochs", "150 epochs", "1.00E-03", "1.00E-04", "128x128x128", "144x172x168", "snapshots 50,100,150"] {
        assert!(stdout.contains(needle), "{needle} missing:\n{stdout}");
    }
    assert_eq!(o.status.code(), Some(1));
}
