use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[data.synthetic]
identities = 4
train_per_identity = 8
eval_repeats = 1

[train]
batch_size = 4
steps = 3
";

fn posegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posegan")).args(args).env_remove("POSEGAN_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn without_time(log: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_ms");
            v
        })
        .collect()
}

fn train_tiny(dir: &Path, cfg: &Path, steps: &str) -> PathBuf {
    let out = dir.join("train");
    let o = posegan(&["train", "--config", s(cfg), "--steps", steps, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = posegan(&["train", "--config", "/nonexistent/run.toml", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cannot read config"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "[eval]\nfolds = 3\n");
    let o = posegan(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(code(&posegan(&["train", "--steps", "many"])), 2);
    assert_eq!(code(&posegan(&["no-such-command"])), 2);
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = train_tiny(dir.path(), &cfg, "0");
    let ckpts: Vec<_> = std::fs::read_dir(out.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(ckpts, vec![std::ffi::OsString::from("step_000000.ckpt")]);
    assert!(out.join("resolved.toml").exists());
    assert!(!out.join(".posegan.lock").exists());
    let log = out.join("log.jsonl");
    assert!(!log.exists() || std::fs::read_to_string(log).unwrap().is_empty());
}

#[test]
fn same_config_and_seed_give_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny_config(a.path(), "");
    let cb = tiny_config(b.path(), "");
    let la = train_tiny(a.path(), &ca, "3").join("log.jsonl");
    let lb = train_tiny(b.path(), &cb, "3").join("log.jsonl");
    let (ra, rb) = (without_time(&la), without_time(&lb));
    assert_eq!(ra.len(), 3);
    assert_eq!(ra, rb);
    let resolved = std::fs::read_to_string(a.path().join("train/resolved.toml")).unwrap();
    assert!(resolved.contains("learning_rate = 0.0002"), "{resolved}");
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let full = without_time(&train_tiny(dir.path(), &cfg, "3").join("log.jsonl"));

    let other = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(other.path(), "");
    let out = other.path().join("train");
    let first = posegan(&["train", "--config", s(&cfg2), "--steps", "0", "--out", s(&out)]);
    assert_eq!(code(&first), 0);
    let ck = out.join("checkpoints/step_000000.ckpt");
    let o = posegan(&["train", "--config", s(&cfg2), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(without_time(&out.join("log.jsonl")), full);
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("train");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".posegan.lock"), "1").unwrap();
    let o = posegan(&["train", "--config", s(&cfg), "--steps", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn synth_grids_have_the_requested_shape_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = train_tiny(dir.path(), &cfg, "2");
    let ck = out.join("checkpoints/step_000002.ckpt");
    let one = dir.path().join("one.png");
    let o = posegan(&["synth", "--checkpoint", s(&ck), "--config", s(&cfg), "--index", "0", "--codes", "0:0", "--grid-steps", "1", "--out", s(&one)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = posegan::data::RgbImage::read(&one).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let mut bytes = Vec::new();
    for name in ["a.ppm", "b.ppm"] {
        let p = dir.path().join(name);
        let o = posegan(&["synth", "--checkpoint", s(&ck), "--config", s(&cfg), "--index", "3", "--out", s(&p)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        bytes.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let grid = posegan::data::RgbImage::read(&dir.path().join("a.ppm")).unwrap();
    assert_eq!((grid.width(), grid.height()), (9 * 32, 32));
}

#[test]
fn bad_checkpoint_reports_the_format() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.ckpt");
    std::fs::write(&p, b"not a checkpoint at all").unwrap();
    let o = posegan(&["synth", "--checkpoint", s(&p), "--index", "0", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn generated_data_reloads_and_feeds_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let data = dir.path().join("data");
    let o = posegan(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = posegan::data::load_split_directory(&data, 32, 17.0).unwrap();
    assert_eq!(ds.num_identities(), 4);
    for smp in &ds.samples {
        assert!(smp.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(smp.pose_code.is_finite() && smp.yaw_degrees.is_some());
    }

    let dcfg = dir.path().join("dir.toml");
    std::fs::write(&dcfg, format!("{TINY}\n[data]\nsource = \"directory\"\ndir = \"data\"\n")).unwrap();
    let ck = train_tiny(dir.path(), &dcfg, "1").join("checkpoints/step_000001.ckpt");

    let fid_out = dir.path().join("fid");
    let o = posegan(&["eval", "fid", "--config", s(&dcfg), "--against", "real", "--out", s(&fid_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fid_out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["result"]["fid"].as_f64().unwrap() < 1e-6);
    assert_eq!(summary["result"]["feature_function"], "pca64-pixels");

    let r1 = dir.path().join("rank1");
    let o = posegan(&["eval", "rank1", "--config", s(&dcfg), "--checkpoint", s(&ck), "--out", s(&r1)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(r1.join("rank1.csv")).unwrap().lines().count(), 7);

    // drop one identity from the gallery
    let gallery = data.join("gallery.txt");
    let text = std::fs::read_to_string(&gallery).unwrap();
    std::fs::write(&gallery, text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    let o = posegan(&["eval", "rank1", "--config", s(&dcfg), "--checkpoint", s(&ck), "--out", s(&dir.path().join("r2"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("no gallery entry"), "{}", stderr(&o));
}

#[test]
fn verify_on_a_separable_fixture_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("emb.csv");
    let mut rows = String::new();
    for n in 0..200 {
        let id = n % 10;
        let v: Vec<String> = (0..10).map(|k| if k == id { "1" } else { "0" }.to_string()).collect();
        rows.push_str(&format!("{id},{}\n", v.join(",")));
    }
    std::fs::write(&emb, rows).unwrap();
    let out = dir.path().join("v");
    let o = posegan(&["eval", "verify", "--embeddings", s(&emb), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["mean"], 1.0);
    assert_eq!(summary["result"]["std"], 0.0);
    assert_eq!(std::fs::read_to_string(out.join("verification.csv")).unwrap().lines().count(), 11);
}

#[test]
fn shape_model_fitting() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = posegan(&["fit-shapemodel", "--manifest", s(&empty), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let cfg = tiny_config(dir.path(), "");
    let data = dir.path().join("data");
    assert_eq!(code(&posegan(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let mut files = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let p = dir.path().join(name);
        let o = posegan(&["fit-shapemodel", "--manifest", s(&data.join("train.txt")), "--out", s(&p)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        files.push(std::fs::read(p).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
