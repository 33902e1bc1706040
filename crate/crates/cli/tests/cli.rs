use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atbseg::corpus::{save_corpus, CorpusProfile};
use atbseg::phantom::phantom_corpus;

fn atbseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atbseg"))
        .args(args)
        .env_remove("ATBSEG_CACHE")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 16x16 corpus with subjects S1..S3, four 2-frame videos each, and an
/// experiment config over it.
fn tiny_experiment(dir: &Path) -> PathBuf {
    let profile = CorpusProfile {
        name: "tiny".into(),
        frame_width: 16,
        frame_height: 16,
        pixel_spacing: 1.0,
        frame_rate: 10.0,
        subsample_stride: 1,
    };
    save_corpus(
        &phantom_corpus(profile, 11, "S", 3, &[2; 4]),
        &dir.join("corpus"),
    )
    .unwrap();
    let config = dir.join("exp.json");
    std::fs::write(
        &config,
        r#"{
            "seed": 3,
            "output": "out",
            "pretrain": {
                "corpus": "corpus/manifest.json",
                "groups": [["S1"], ["S1", "S2"]],
                "splits": ["2:1"],
                "architectures": ["unet-style"],
                "model": {"stages": 2, "base_channels": 4},
                "train": {"max_epochs": 2}
            },
            "adapt": {
                "corpus": "corpus/manifest.json",
                "pool": {"kind": "videos", "subjects": ["S3"], "pool_video": 1, "val_video": 2, "test_videos": [3, 4]},
                "frames": [1, 2],
                "rounds": 2,
                "train": {"max_epochs": 2, "learning_rate": 0.0001}
            },
            "matched": {"rule": {"rule": "videos", "train": [1], "val": [2]}, "train": {"max_epochs": 2}}
        }"#,
    )
    .unwrap();
    config
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = atbseg(&["synth", "--out", p(&out), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let stdout = String::from_utf8(o.stdout).unwrap();
        assert_eq!(stdout.lines().count(), 2);
        std::fs::read(out.join("phantomB/manifest.json")).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    let frame = |name: &str| {
        std::fs::read(dir.path().join(name).join("phantomB/Q1/v01/f0001.json")).unwrap()
    };
    assert_eq!(frame("a"), frame("b"));
    assert_ne!(frame("a"), frame("c"));
    let _ = c;
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_experiment(dir.path());
    let cfg = p(&config);

    let o = atbseg(&["grid", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        String::from_utf8_lossy(&o.stdout).contains("trained 2, skipped 0, registry has 2 entries")
    );
    let o = atbseg(&["grid", "--config", cfg, "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("trained 0, skipped 2"));

    let o = atbseg(&["adapt", "--config", cfg, "--frames", "2", "--rounds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout)
        .contains("2 base models, 2 adapted evaluations, 6 metric rows"));
    let adapted = dir.path().join("out/adapted/unet-style/S1_2/k2_r1.bin");
    assert!(adapted.exists());

    let o = atbseg(&["adapt", "--config", cfg, "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = std::fs::read_to_string(dir.path().join("out/records.csv")).unwrap();
    assert!(records.starts_with("model,k,round,mask,pca,dice,n_frames\n"));
    assert_eq!(records.lines().count(), 1 + 2 * 4 * 3);

    let o = atbseg(&["matched", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report = dir.path().join("report");
    let o = atbseg(&[
        "report",
        "--records",
        p(&dir.path().join("out/records.csv")),
        "--matched",
        p(&dir.path().join("out/matched.csv")),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "mask1.svg",
        "mask2.svg",
        "mask3.svg",
        "aggregate.csv",
        "aggregate.json",
        "summary.csv",
    ] {
        assert!(report.join(f).exists(), "{f}");
    }

    let o = atbseg(&[
        "eval",
        "--checkpoint",
        p(&adapted),
        "--corpus",
        p(&dir.path().join("corpus/manifest.json")),
        "--subjects",
        "S3",
        "--videos",
        "3,4",
        "--pooled",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}

#[test]
fn adapt_cache_env_redirects_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_experiment(dir.path());
    assert_eq!(code(&atbseg(&["grid", "--config", p(&config)])), 0);
    let cache = dir.path().join("cache");
    let o = Command::new(env!("CARGO_BIN_EXE_atbseg"))
        .args([
            "adapt",
            "--config",
            p(&config),
            "--frames",
            "1",
            "--rounds",
            "1",
        ])
        .env("ATBSEG_CACHE", &cache)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(cache.join("unet-style/S1_2/k1_r1.bin").exists());
    assert!(!dir.path().join("out/adapted").exists());
}

#[test]
fn config_errors_exit_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(
        &config,
        r#"{"output": "o", "pretrain": {"corpus": "c", "groups": [["F1"]], "splits": ["2:1"], "architectures": ["resnet"]}}"#,
    )
    .unwrap();
    let o = atbseg(&["grid", "--config", p(&config)]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("/pretrain/architectures/0"),
        "{}",
        stderr(&o)
    );

    let o = atbseg(&["grid", "--config", p(&dir.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn adapt_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_experiment(dir.path());
    // No registry yet.
    let o = atbseg(&["adapt", "--config", p(&config)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(code(&atbseg(&["grid", "--config", p(&config)])), 0);
    // Pool of 2 frames cannot supply 5.
    let o = atbseg(&["adapt", "--config", p(&config), "--frames", "5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = atbseg(&["adapt", "--config", p(&config), "--pool", "nonsense"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn report_without_matched_baseline_fails() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("r.csv");
    let matched = dir.path().join("m.csv");
    std::fs::write(
        &records,
        "model,k,round,mask,pca,dice,n_frames\nA_2,15,1,1,0.9,0.8,3\n",
    )
    .unwrap();
    std::fs::write(&matched, "model,k,round,mask,pca,dice,n_frames\n").unwrap();
    let o = atbseg(&[
        "report",
        "--records",
        p(&records),
        "--matched",
        p(&matched),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("matched"), "{}", stderr(&o));
}

#[test]
fn rasterize_writes_three_masks_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    tiny_experiment(dir.path());
    let out = dir.path().join("masks");
    let o = atbseg(&[
        "rasterize",
        "--corpus",
        p(&dir.path().join("corpus/manifest.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rasterized 24 frames"));
    let mask = atbseg::corpus::load_mask_png(&out.join("S1/v01/f0001_m3.png")).unwrap();
    assert_eq!(mask.dims(), (16, 16));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = atbseg(&[
        "rasterize",
        "--corpus",
        p(&dir.path().join("nope.json")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["phantom-same-corpus.json", "phantom-cross-corpus.json"] {
        atbseg::experiment::Experiment::load(&root.join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
