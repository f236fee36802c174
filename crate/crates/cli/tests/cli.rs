use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tkit(args);
    assert!(
        out.status.success(),
        "tkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
[synth]
count = 120
vocab_size = 30
feature_dim = 8
seed = 3

[model]
hidden = 12

[train]
epochs = 2
batch_size = 6
seed = 11
dev_fraction = 0.2
";

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data.jsonl");
        let f = Fixture { dir, data };
        let cfg = f.config("base", "");
        ok(&["--config", s(&cfg), "gen-data", "--out", s(&f.data)]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.path(&format!("{name}.cfg"));
        std::fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
        p
    }

    fn train(&self, cfg: &Path, ckpt: &str) -> (String, PathBuf) {
        let out = self.path(ckpt);
        let log = ok(&["--config", s(cfg), "train", "--data", s(&self.data), "--out", s(&out)]);
        (log, out)
    }

    fn eval(&self, cfg: &Path, ckpt: &Path, name: &str) -> (String, String) {
        let outputs = self.path(name);
        let summary = ok(&[
            "--config", s(cfg), "eval", "--checkpoint", s(ckpt), "--data", s(&self.data), "--out", s(&outputs),
        ]);
        (summary, std::fs::read_to_string(outputs).unwrap())
    }
}

fn csv(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn gen_data_is_reproducible() {
    let f = Fixture::new();
    let again = f.path("again.jsonl");
    let cfg = f.config("base", "");
    ok(&["--config", s(&cfg), "gen-data", "--out", s(&again)]);
    assert_eq!(std::fs::read(&f.data).unwrap(), std::fs::read(&again).unwrap());
    let header = std::fs::read_to_string(&f.data).unwrap();
    assert!(header.starts_with("{\"format\":\"tkit-dataset\""));
}

#[test]
fn same_seed_training_is_byte_identical() {
    let f = Fixture::new();
    let cfg = f.config(
        "sampled",
        "[sampling]\nstrategy = example-wise\ndistribution = joint-ctc\ntotal_size = 10\n",
    );
    let (log_a, ckpt_a) = f.train(&cfg, "a.ckpt");
    let (log_b, ckpt_b) = f.train(&cfg, "b.ckpt");
    assert_eq!(log_a, log_b);
    assert_eq!(std::fs::read(ckpt_a).unwrap(), std::fs::read(ckpt_b).unwrap());
    assert!(log_a.lines().any(|l| l.starts_with("epoch=2 ")), "{log_a}");
    assert!(log_a.lines().last().unwrap().starts_with("final dev_ter="));
}

#[test]
fn different_seed_changes_the_run() {
    let f = Fixture::new();
    let cfg = f.config("base", "");
    let (a, _) = f.train(&cfg, "a.ckpt");
    let out = f.path("b.ckpt");
    let b = ok(&["--config", s(&cfg), "--seed", "12", "train", "--data", s(&f.data), "--out", s(&out)]);
    assert_ne!(a, b);
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let f = Fixture::new();
    let cfg = f.config("zero", "").to_owned();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 0");
    std::fs::write(&cfg, text).unwrap();
    let (log, ckpt) = f.train(&cfg, "zero.ckpt");
    assert!(!log.lines().any(|l| l.starts_with("epoch=")));
    let again = f.train(&cfg, "zero2.ckpt").1;
    assert_eq!(std::fs::read(ckpt).unwrap(), std::fs::read(again).unwrap());
}

fn losses(log: &str) -> Vec<f64> {
    log.lines()
        .filter(|l| l.starts_with("epoch="))
        .map(|l| {
            let field = l.split_whitespace().find(|w| w.starts_with("loss_transducer=")).unwrap();
            field["loss_transducer=".len()..].parse().unwrap()
        })
        .collect()
}

#[test]
fn sampling_the_whole_vocabulary_matches_full_softmax() {
    let f = Fixture::new();
    let full = f.config("full", "");
    let whole = f.config("whole", "[sampling]\nstrategy = example-wise\ntotal_size = 30\n");
    let (a, _) = f.train(&full, "full.ckpt");
    let (b, _) = f.train(&whole, "whole.ckpt");
    let (a, b) = (losses(&a), losses(&b));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn decoding_identities_hold_through_eval() {
    let f = Fixture::new();
    let cfg = f.config("base", "");
    let (_, ckpt) = f.train(&cfg, "m.ckpt");
    let (_, greedy) = f.eval(&cfg, &ckpt, "greedy.jsonl");

    let beam1 = f.config("beam1", "[decode]\nmode = beam\nbeam = 1\n");
    assert_eq!(greedy, f.eval(&beam1, &ckpt, "beam1.jsonl").1);

    let all = f.config("all", "[decode]\nctc_top_k = 29\n");
    assert_eq!(greedy, f.eval(&all, &ckpt, "all.jsonl").1);

    for line in greedy.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_string() && v["reference"].is_array() && v["hypothesis"].is_array());
    }
}

#[test]
fn eval_summary_reports_ter() {
    let f = Fixture::new();
    let cfg = f.config("base", "");
    let (_, ckpt) = f.train(&cfg, "m.ckpt");
    let (summary, outputs) = f.eval(&cfg, &ckpt, "o.jsonl");
    assert_eq!(outputs.lines().count(), 120);
    assert!(summary.starts_with("eval utterances=120 ter="), "{summary}");
}

#[test]
fn memplot_default_rows() {
    let rows = csv(&ok(&["memplot"]));
    assert_eq!(rows[0].join(","), "label,vocab_size,sampled_size,component,bytes");
    assert!(rows.iter().any(|r| r[0] == "full" && r[3] == "logit_tensor" && r[4] == "404000000"));
    let full: Vec<_> = rows.iter().filter(|r| r[0] == "full").map(|r| r[4].clone()).collect();
    let whole: Vec<_> = rows.iter().filter(|r| r[0] == "sampled" && r[2] == "2000").map(|r| r[4].clone()).collect();
    assert_eq!(full, whole);
    for r in &rows[1..] {
        r[4].parse::<u64>().unwrap();
    }
}

#[test]
fn bench_peak_matches_formula_and_ratio() {
    let f = Fixture::new();
    let out = f.path("bench.csv");
    ok(&["bench", "--out", s(&out)]);
    let rows = csv(&std::fs::read_to_string(out).unwrap());
    assert_eq!(rows.len(), 3);
    let col = |r: &Vec<String>, i: usize| r[i].parse::<u64>().unwrap();
    for r in &rows[1..] {
        assert_eq!(col(r, 6), col(r, 7));
    }
    let (full, sampled) = (&rows[1], &rows[2]);
    assert_eq!(col(full, 5), col(full, 4));
    assert_eq!(col(full, 6) * col(sampled, 5), col(sampled, 6) * col(full, 4));
}

#[test]
fn selftest_passes_and_detects_injected_fault() {
    let clean = tkit(&["selftest"]);
    assert!(clean.status.success(), "{}", String::from_utf8_lossy(&clean.stdout));
    let faulty = tkit(&["selftest", "--inject-sign-flip"]);
    assert!(!faulty.status.success());
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL"));
}

#[test]
fn malformed_config_names_the_field() {
    let f = Fixture::new();
    let cfg = f.config("bad", "[sampling]\ntotal_size = many\n");
    let out = tkit(&["--config", s(&cfg), "memplot"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("sampling.total_size"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let f = Fixture::new();
    let cfg = f.config("bad", "[train]\nepochz = 3\n");
    let out = tkit(&["--config", s(&cfg), "memplot"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochz"));
}

#[test]
fn corrupted_dataset_is_reported_with_path() {
    let f = Fixture::new();
    let bad = f.path("bad.jsonl");
    std::fs::write(&bad, "{\"format\":\"nope\"}\n").unwrap();
    let out = tkit(&["train", "--data", s(&bad), "--out", s(&f.path("x.ckpt"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl"), "{err}");
}
