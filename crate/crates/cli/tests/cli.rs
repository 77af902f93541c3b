use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn velocorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_velocorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A short run keeps these tests quick: few iterations, tiny model.
const SMALL: &str = "\
[correction]
hidden = 4

[train]
iterations = 6
batch_size = 2
validate_every = 3
";

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn gen(dir: &Path) -> PathBuf {
    let out = velocorr(&["gen-synth", "--out", s(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.toml")
}

/// Relative path -> sha256 of every file under `dir`.
fn digests(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let hash = Sha256::digest(fs::read(&path).unwrap()).to_vec();
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), hash));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a);
    gen(&b);
    let da = digests(&a);
    assert_eq!(da, digests(&b));
    let midis = da.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "mid")).count();
    assert_eq!(midis, 12);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[item]]").count(), 12);
}

#[test]
fn gen_synth_unwritable_output_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = velocorr(&["gen-synth", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn extract_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let manifest = gen(&tmp.path().join("corpus"));
    let cache = tmp.path().join("cache");
    let first = velocorr(&["extract", "--manifest", s(&manifest), "--out", s(&cache)]);
    assert_eq!(code(&first), 0);
    assert!(String::from_utf8_lossy(&first.stdout).contains("extracted 12, up to date 0"));
    let before = digests(&cache);
    let second = velocorr(&["extract", "--manifest", s(&manifest), "--out", s(&cache)]);
    assert_eq!(code(&second), 0);
    assert!(String::from_utf8_lossy(&second.stdout).contains("extracted 0, up to date 12"));
    assert_eq!(before, digests(&cache));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let manifest = gen(&tmp.path().join("corpus"));
    let out = velocorr(&["train", "--manifest", s(&manifest), "--model", "transformer", "--out", "x"]);
    assert_eq!(code(&out), 2);
    let out = velocorr(&["train", "--manifest", s(&tmp.path().join("missing.toml")), "--out", "x"]);
    assert_eq!(code(&out), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = velocorr(&["train", "--config", s(&bad), "--manifest", s(&manifest), "--out", s(&tmp.path().join("c"))]);
    assert_ne!(code(&out), 0);
}

#[test]
fn train_infer_eval_round() {
    let tmp = TempDir::new().unwrap();
    let manifest = gen(&tmp.path().join("corpus"));
    let cfg = write_small_config(tmp.path());
    let ckpt_dir = tmp.path().join("new").join("ckpt");
    let out = velocorr(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--features", "onset,frame_ex", "--out", s(&ckpt_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("best validation MAE: "));
    for f in ["best.ckpt", "last.ckpt", "train.log"] {
        assert!(ckpt_dir.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(ckpt_dir.join("train.log")).unwrap();
    assert!(log.starts_with("iteration\tlr\tloss\tval_mae\n"));
    assert_eq!(log.lines().count(), 7);

    // Inference keeps every score note and writes a grid and a MIDI file.
    let best = ckpt_dir.join("best.ckpt");
    let refined = tmp.path().join("refined");
    let out = velocorr(&[
        "infer", "--config", s(&cfg), "--manifest", s(&manifest), "--id", "synth-0010", "--checkpoint", s(&best),
        "--features", "onset,frame_ex", "--out", s(&refined),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(refined.join("synth-0010.vgrd").is_file());
    let score = velocorr::midi::parse_smf(&fs::read(tmp.path().join("corpus/midi/synth-0010.mid")).unwrap()).unwrap();
    let fixed = velocorr::midi::parse_smf(&fs::read(refined.join("synth-0010.mid")).unwrap()).unwrap();
    assert_eq!(score.notes.len(), fixed.notes.len());

    // Wrong features mean a different input width: checkpoint mismatch.
    let out = velocorr(&[
        "infer", "--config", s(&cfg), "--manifest", s(&manifest), "--checkpoint", s(&best), "--features", "onset",
        "--out", s(&refined),
    ]);
    assert_eq!(code(&out), 4);

    let out = velocorr(&[
        "eval", "--config", s(&cfg), "--manifest", s(&manifest), "--source", "refined", "--checkpoint", s(&best),
        "--features", "onset,frame_ex",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("source=refined\n"));
}

#[test]
fn corrupt_checkpoint_is_a_checkpoint_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = gen(&tmp.path().join("corpus"));
    let bogus = tmp.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = velocorr(&["infer", "--manifest", s(&manifest), "--checkpoint", s(&bogus), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 4);
}

#[test]
fn eval_on_an_empty_split_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = gen(&tmp.path().join("corpus"));
    let text = fs::read_to_string(&manifest).unwrap().replace("split = \"test\"", "split = \"train\"");
    fs::write(&manifest, text).unwrap();
    let out = velocorr(&["eval", "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn perfect_grids_score_perfectly() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let cfg = tmp.path().join("identity.toml");
    fs::write(&cfg, "[synth.degradation]\nnoise_sigma = 0.0\ngain = 1.0\ncompress = 1.0\n").unwrap();
    let out = velocorr(&["gen-synth", "--config", s(&cfg), "--out", s(&corpus)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = velocorr(&["eval", "--config", s(&cfg), "--manifest", s(&corpus.join("manifest.toml"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("mae=0.000000\n") && text.contains("recall=1.000000\n"), "{text}");
}
