use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ovcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovcd")).args(args).output().expect("spawn ovcd")
}

fn ok(args: &[&str]) -> Output {
    let o = ovcd(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Synthetic dataset plus prototype bank under `root`.
fn prepare(root: &Path, spread: &str) {
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--pairs", "4", "--seed", "3", "--spread", spread]);
    ok(&["build-prototypes", "--support", s(&data.join("support.json")), "--out", s(&root.join("bank.json"))]);
}

#[test]
fn synth_prototypes_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0");
    let out = root.join("run");
    let o = ok(&[
        "pipeline",
        "--manifest",
        s(&root.join("data/manifest.json")),
        "--prototypes",
        s(&root.join("bank.json")),
        "--out",
        s(&out),
    ]);
    assert!(o.stdout.is_empty());
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("Average"), "{table}");
    let report = json_file(&out.join("report.json"));
    assert_eq!(report["miou"], json!(100.0));
    assert_eq!(report["binary"]["iou"], json!(100.0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[4/4]"));
}

#[test]
fn pipeline_reads_a_toml_config_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0.3");
    std::fs::write(
        root.join("run.toml"),
        "manifest = \"data/manifest.json\"\nprototypes = \"bank.json\"\noutput_dir = \"a\"\n\n[retrieval]\nstrategy = \"category_mean\"\n",
    )
    .unwrap();
    let cfg = root.join("run.toml");
    ok(&["pipeline", "--config", s(&cfg)]);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&root.join("b")), "--jobs", "1"]);
    for f in ["report.json", "pairs/pair_000.semantic.json", "pairs/pair_003.proposals.json"] {
        assert_eq!(std::fs::read(root.join("a").join(f)).unwrap(), std::fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(json_file(&root.join("a/run.json"))["retrieval"]["strategy"], json!("category_mean"));
}

#[test]
fn missing_prototype_file_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0");
    let missing = root.join("nowhere/bank.json");
    let o = ovcd(&[
        "pipeline",
        "--manifest",
        s(&root.join("data/manifest.json")),
        "--prototypes",
        s(&missing),
        "--out",
        s(&root.join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn corrupt_feature_file_is_a_data_error_naming_pair_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0");
    let t2 = root.join("data/pairs/pair_002/t2.ovft");
    let mut bytes = std::fs::read(&t2).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&t2, bytes).unwrap();
    let o = ovcd(&["validate", "--manifest", s(&root.join("data/manifest.json"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains("pair_002"), "{err}");
    let o = ovcd(&[
        "pipeline",
        "--manifest",
        s(&root.join("data/manifest.json")),
        "--prototypes",
        s(&root.join("bank.json")),
        "--out",
        s(&root.join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains("pair_002") && err.contains("t2.ovft"), "{err}");
}

#[test]
fn validate_accepts_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0.2");
    let o = ok(&[
        "validate",
        "--manifest",
        s(&root.join("data/manifest.json")),
        "--support",
        s(&root.join("data/support.json")),
        "--prototypes",
        s(&root.join("bank.json")),
    ]);
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains("4 pairs") || err.contains("files ok"), "{err}");
    assert!(err.contains("40 samples ok"), "{err}");
    assert_eq!(ovcd(&["validate"]).status.code(), Some(2));
}

#[test]
fn invalid_settings_exit_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0");
    let base = ["pipeline", "--manifest", "data/manifest.json", "--prototypes", "bank.json", "--out", "run"];
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ovcd")).current_dir(root).args(base).args(extra).output().unwrap()
    };
    let o = run(&["--alpha", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    assert_eq!(run(&["--gamma2", "1.5"]).status.code(), Some(2));
    // synth writes change-region sidecars, so fusion has what it needs
    assert_eq!(run(&["--fuse"]).status.code(), Some(0));

    std::fs::write(root.join("bad.toml"), "bogus_key = 1\n").unwrap();
    let o = ovcd(&["pipeline", "--config", s(&root.join("bad.toml"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_commands_agree_with_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0.3");
    let manifest = root.join("data/manifest.json");
    let bank = root.join("bank.json");
    ok(&["propose", "--manifest", s(&manifest), "--out", s(&root.join("props"))]);
    ok(&["retrieve", "--manifest", s(&manifest), "--prototypes", s(&bank), "--out", s(&root.join("pred"))]);
    ok(&["pipeline", "--manifest", s(&manifest), "--prototypes", s(&bank), "--out", s(&root.join("full"))]);
    assert_eq!(
        std::fs::read(root.join("props/pair_001.proposals.json")).unwrap(),
        std::fs::read(root.join("full/pairs/pair_001.proposals.json")).unwrap()
    );
    ok(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--predictions",
        s(&root.join("pred")),
        "--out",
        s(&root.join("eval")),
    ]);
    assert_eq!(json_file(&root.join("eval/report.json")), json_file(&root.join("full/report.json")));

    let o = ok(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--prototypes",
        s(&bank),
        "--mode",
        "oracle-proposal",
        "--out",
        s(&root.join("oracle")),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Average"));
    assert_eq!(json_file(&root.join("oracle/report.json"))["mode"], json!("oracle_change_proposal"));
}

fn ovft(h: u32, w: u32, d: u32, values: &[f32]) -> Vec<u8> {
    let mut b = b"OVFT".to_vec();
    for v in [1, h, w, d] {
        b.extend(v.to_le_bytes());
    }
    for v in values {
        b.extend(v.to_le_bytes());
    }
    b
}

#[test]
fn refine_and_fuse_on_hand_made_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // CAM peaks on the right half of a 4x4 image
    std::fs::write(root.join("cam.ovft"), ovft(2, 2, 1, &[0.0, 1.0, 0.0, 1.0])).unwrap();
    // a right column, and a left column that misses the CAM entirely
    let masks = json!({"height": 4, "width": 4, "instances": [
        {"runs": [3, 1, 3, 1, 3, 1, 3, 1]},
        {"runs": [0, 1, 3, 1, 3, 1, 3, 1, 3]},
    ]});
    std::fs::write(root.join("masks.json"), masks.to_string()).unwrap();
    ok(&[
        "refine",
        "--cam",
        s(&root.join("cam.ovft")),
        "--masks",
        s(&root.join("masks.json")),
        "--out",
        s(&root.join("label.json")),
    ]);
    let label = json_file(&root.join("label.json"));
    assert_eq!(label["instances"].as_array().unwrap().len(), 1);

    let props = json!({"height": 4, "width": 4, "instances": [
        {"runs": [3, 1, 3, 1, 3, 1, 3, 1], "score": 0.4},
        {"runs": [0, 1, 3, 1, 3, 1, 3, 1, 3], "score": 0.9},
    ]});
    std::fs::write(root.join("props.json"), props.to_string()).unwrap();
    let region = json!({"height": 4, "width": 4, "instances": [{"runs": [2, 2, 2, 2, 2, 2, 2, 2]}]});
    std::fs::write(root.join("region.json"), region.to_string()).unwrap();
    ok(&[
        "fuse",
        "--proposals",
        s(&root.join("props.json")),
        "--region",
        s(&root.join("region.json")),
        "--out",
        s(&root.join("kept.json")),
    ]);
    let kept = json_file(&root.join("kept.json"));
    let inst = kept["instances"].as_array().unwrap();
    assert_eq!(inst.len(), 1);
    assert_eq!(inst[0]["score"], json!(0.4));
}

#[test]
fn oracle_modes_reject_existing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovcd(&[
        "evaluate",
        "--manifest",
        s(&dir.path().join("m.json")),
        "--predictions",
        s(dir.path()),
        "--mode",
        "oracle-id",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn retrieve_from_saved_proposals_matches_fresh_proposals() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0.4");
    let manifest = root.join("data/manifest.json");
    let bank = root.join("bank.json");
    std::fs::write(root.join("p.toml"), "[proposal]\nalpha = -0.3\n\n[retrieval]\nstrategy = \"category_mean\"\n").unwrap();
    let cfg = root.join("p.toml");
    ok(&["propose", "--manifest", s(&manifest), "--out", s(&root.join("props")), "--config", s(&cfg)]);
    ok(&["retrieve", "--manifest", s(&manifest), "--prototypes", s(&bank), "--out", s(&root.join("a")), "--config", s(&cfg)]);
    ok(&[
        "retrieve",
        "--manifest",
        s(&manifest),
        "--prototypes",
        s(&bank),
        "--out",
        s(&root.join("b")),
        "--config",
        s(&cfg),
        "--proposals",
        s(&root.join("props")),
    ]);
    let mut n = 0;
    for i in 0..4 {
        for kind in ["semantic", "proposals"] {
            let f = format!("pair_{i:03}.{kind}.json");
            assert_eq!(std::fs::read(root.join("a").join(&f)).unwrap(), std::fs::read(root.join("b").join(&f)).unwrap(), "{f}");
        }
        n += json_file(&root.join("props").join(format!("pair_{i:03}.proposals.json")))["instances"].as_array().unwrap().len();
    }
    // alpha -0.3 from the config admits more than the default alpha 0 would
    let mut default_n = 0;
    ok(&["propose", "--manifest", s(&manifest), "--out", s(&root.join("d"))]);
    for i in 0..4 {
        default_n += json_file(&root.join("d").join(format!("pair_{i:03}.proposals.json")))["instances"].as_array().unwrap().len();
    }
    assert!(n > default_n, "{n} vs {default_n}");
}

#[test]
fn calibrate_sweeps_alpha_and_marks_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, "0.4");
    let manifest = root.join("data/manifest.json");
    let bank = root.join("bank.json");
    let o = ok(&[
        "calibrate",
        "--manifest",
        s(&manifest),
        "--prototypes",
        s(&bank),
        "--from",
        "-0.5",
        "--to",
        "0.5",
        "--step",
        "0.25",
        "--out",
        s(&root.join("cal")),
    ]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 6, "{table}");
    assert_eq!(table.matches('*').count(), 1, "{table}");
    let cal = json_file(&root.join("cal/calibration.json"));
    let alphas: Vec<f64> = cal["points"].as_array().unwrap().iter().map(|p| p["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, vec![-0.5, -0.25, 0.0, 0.25, 0.5]);

    // the point at alpha 0 is the default pipeline run
    ok(&["pipeline", "--manifest", s(&manifest), "--prototypes", s(&bank), "--out", s(&root.join("run"))]);
    assert_eq!(cal["points"][2]["report"], json_file(&root.join("run/report.json")));

    let o = ovcd(&["calibrate", "--manifest", s(&manifest), "--prototypes", s(&bank), "--alphas", "0,2"]);
    assert_eq!(o.status.code(), Some(2));
}
