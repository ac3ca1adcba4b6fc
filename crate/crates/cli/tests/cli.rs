use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const HEADER: &str = "step,phase,loss,reward_mean,released_frac,dev_ter,dev_nll";

fn asrtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asrtts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const TINY_GEN: &str = r#"{
  "seed": 3, "vocab": 5, "feature_dim": 4, "frames_per_token": 3, "ood_frames_per_token": 4,
  "noise_sigma": 0.0, "offset_sigma": 0.0, "min_len": 2, "max_len": 3,
  "splits": {"paired": 3, "speech_only": 4, "text_only": 4, "dev": 3, "paired_ood": 3, "dev_ood": 3}
}"#;

const TINY_TRAIN: &str = r#"{
  "batch_size": 3, "total_steps": 4, "eval_interval": 2, "max_decode_len": 4,
  "augment": {"enabled": false},
  "model": {"enc_hidden": 8, "att_dim": 8, "dec_hidden": 12, "asr_embed": 4,
            "tts_embed": 4, "tts_hidden": 8, "lm_embed": 4, "lm_hidden": 8},
  "pretrain": {"asr_steps": 3, "tts_steps": 3, "lm_steps": 3},
  "cycle": {"n_samples": 2, "max_hyp_len": 4, "max_frames": 12}
}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("gen.json"), TINY_GEN).unwrap();
        fs::write(dir.path().join("train.json"), TINY_TRAIN).unwrap();
        let f = Fixture { dir };
        let o = asrtts(&["gen-data", "--config", s(&f.path("gen.json")), "--out", s(&f.path("corpus"))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.path("corpus/manifest.json")
    }

    fn pretrain(&self, which: &str, config: &str) -> PathBuf {
        let o = asrtts(&[
            "pretrain",
            "--which",
            which,
            "--config",
            config,
            "--manifest",
            s(&self.manifest()),
            "--out",
            s(&self.path("pre")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path(&format!("pre/{which}.ckpt"))
    }
}

#[test]
fn gen_data_prints_manifest_and_is_reproducible() {
    let f = Fixture::new();
    assert!(f.manifest().exists());
    let o = asrtts(&["gen-data", "--config", s(&f.path("gen.json")), "--out", s(&f.path("again"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).trim().ends_with("manifest.json"));
    let a = fs::read(f.manifest()).unwrap();
    let b = fs::read(f.path("again/manifest.json")).unwrap();
    assert_eq!(a, b);
    let fa = fs::read(f.path("corpus/feats/paired-00000.eatf"));
    let fb = fs::read(f.path("again/feats/paired-00000.eatf"));
    assert_eq!(fa.unwrap(), fb.unwrap());
}

#[test]
fn seed_flag_changes_the_corpus() {
    let f = Fixture::new();
    let o = asrtts(&[
        "gen-data",
        "--config",
        s(&f.path("gen.json")),
        "--out",
        s(&f.path("other")),
        "--seed",
        "99",
    ]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(f.manifest()).unwrap(), fs::read(f.path("other/manifest.json")).unwrap());
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let o = asrtts(&["gen-data", "--config", s(&missing), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"vocab": 6, "wobble": 1}"#).unwrap();
    let o = asrtts(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("wobble"));
}

#[test]
fn help_lists_flags_for_every_command() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-data", &["--config", "--out", "--seed"]),
        ("pretrain", &["--which", "--config", "--manifest", "--out", "--seed"]),
        ("train", &["--mode", "--config", "--asr", "--tts", "--lm", "--out", "--seed"]),
        ("eval", &["--ckpt", "--split", "--manifest", "--json", "--max-len"]),
        ("plot", &["--metrics", "--out", "--max-points"]),
    ];
    for (cmd, flags) in cases {
        let o = asrtts(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for flag in flags {
            assert!(text.contains(flag), "{cmd} help lacks {flag}");
        }
    }
    let o = asrtts(&["eval", "--help"]);
    assert!(stdout(&o).contains("default: 12"));
}

#[test]
fn pretrain_train_and_eval_pipeline() {
    let f = Fixture::new();
    let cfg = f.path("train.json");
    let asr = f.pretrain("asr", s(&cfg));
    let tts = f.pretrain("tts", s(&cfg));
    let lm = f.pretrain("lm", s(&cfg));
    let metrics = fs::read_to_string(f.path("pre/asr.metrics.csv")).unwrap();
    assert!(metrics.starts_with(HEADER));

    let o = asrtts(&[
        "train",
        "--mode",
        "to",
        "--config",
        s(&cfg),
        "--manifest",
        s(&f.manifest()),
        "--asr",
        s(&asr),
        "--out",
        s(&f.path("to")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--tts"), "{}", stderr(&o));

    let o = asrtts(&[
        "train",
        "--mode",
        "baseline",
        "--config",
        s(&cfg),
        "--manifest",
        s(&f.manifest()),
        "--asr",
        s(&asr),
        "--tts",
        s(&tts),
        "--out",
        s(&f.path("base")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("ignores"), "{}", stderr(&o));
    assert!(f.path("base/final.ckpt").exists());
    let csv = fs::read_to_string(f.path("base/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(HEADER));

    let run_st = |out: &str| {
        let o = asrtts(&[
            "train",
            "--mode",
            "st",
            "--config",
            s(&cfg),
            "--manifest",
            s(&f.manifest()),
            "--asr",
            s(&asr),
            "--tts",
            s(&tts),
            "--lm",
            s(&lm),
            "--out",
            s(&f.path(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            fs::read(f.path(&format!("{out}/metrics.csv"))).unwrap(),
            fs::read(f.path(&format!("{out}/final.ckpt"))).unwrap(),
        )
    };
    assert_eq!(run_st("st1"), run_st("st2"));

    let json = f.path("eval.json");
    let o = asrtts(&[
        "eval",
        "--ckpt",
        s(&f.path("st1/final.ckpt")),
        "--split",
        "dev",
        "--manifest",
        s(&f.manifest()),
        "--json",
        s(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let expect = format!(
        "ter={:.4} nll={:.4}",
        v["ter"].as_f64().unwrap(),
        v["nll"].as_f64().unwrap()
    );
    assert_eq!(line.trim(), expect);

    let o = asrtts(&["eval", "--ckpt", s(&asr), "--split", "nosuch", "--manifest", s(&f.manifest())]);
    assert_eq!(code(&o), 2);

    let o = asrtts(&["eval", "--ckpt", s(&tts), "--split", "dev", "--manifest", s(&f.manifest())]);
    assert_eq!(code(&o), 2, "a TTS-only checkpoint cannot be evaluated");
}

#[test]
fn memorised_model_evaluates_to_zero_ter() {
    let f = Fixture::new();
    let cfg = f.path("memo.json");
    fs::write(
        &cfg,
        r#"{
  "batch_size": 3, "eval_interval": 400, "max_decode_len": 4,
  "augment": {"enabled": false},
  "model": {"enc_hidden": 16, "att_dim": 16, "dec_hidden": 24, "asr_embed": 8},
  "pretrain": {"asr_steps": 400}
}"#,
    )
    .unwrap();
    let asr = f.pretrain("asr", s(&cfg));
    let o = asrtts(&["eval", "--ckpt", s(&asr), "--split", "paired", "--manifest", s(&f.manifest())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ter=0.0000 "), "{}", stdout(&o));
}

fn plot(csv: &str) -> (Output, TempDir) {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), csv).unwrap();
    let o = asrtts(&[
        "plot",
        "--metrics",
        s(&dir.path().join("m.csv")),
        "--out",
        s(&dir.path().join("p.svg")),
    ]);
    (o, dir)
}

fn polylines(svg: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants().filter(|n| n.has_tag_name("polyline")).count()
}

#[test]
fn plot_draws_one_polyline_per_series() {
    let csv = format!("{HEADER}\n10,train,1.5,0.2,0.5,,\n10,eval,,,,0.400000,0.900000\n20,train,1.2,0.1,0.7,,\n20,eval,,,,0.300000,0.800000\n");
    let (o, dir) = plot(&csv);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("p.svg")).unwrap();
    assert_eq!(polylines(&svg), 2);
    let down = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(down.lines().count(), 5);
}

#[test]
fn plot_of_empty_metrics_has_axes_only() {
    let (o, dir) = plot(&format!("{HEADER}\n"));
    assert_eq!(code(&o), 0);
    let svg = fs::read_to_string(dir.path().join("p.svg")).unwrap();
    assert_eq!(polylines(&svg), 0);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("line")).count(), 2);
}

#[test]
fn malformed_metrics_exit_3_with_line_number() {
    let (o, _dir) = plot(&format!("{HEADER}\n1,train,0.5,0,1,,\n2,train,0.4\n"));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn plot_is_idempotent() {
    let csv = format!("{HEADER}\n10,train,1.5,0.2,0.5,,\n10,eval,,,,0.400000,0.900000\n");
    let (_, a) = plot(&csv);
    let (_, b) = plot(&csv);
    assert_eq!(
        fs::read(a.path().join("p.svg")).unwrap(),
        fs::read(b.path().join("p.svg")).unwrap()
    );
}
