use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
n_docs = 30

[data]
max_len = 48

[lda]
iters = 30

[model]
d_model = 16
ff_dim = 32
latent_dim = 4

[train]
epochs = 2
batch_size = 8

[eval]
max_tokens = 30
n_samples = 4

[probe]
epochs = 5
"#;

fn storyvae(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyvae"))
        .current_dir(dir)
        .env_clear()
        .env("RUST_LOG", "warn")
        .envs(env.iter().copied())
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--config", "small.toml"];
    full.extend_from_slice(args);
    let o = storyvae(dir, &full, &[]);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every non-manifest file in `dir`, by name.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = storyvae(dir.path(), &["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(storyvae(dir.path(), &["train", "--injection", "sideways"], &[]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_one_with_the_field_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    let o = storyvae(dir.path(), &["--config", "bad.toml", "synth"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.toml"), "[model]\nn_heads = 3\n").unwrap();
    let o = storyvae(dir.path(), &["--config", "bad.toml", "synth"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.d_model"), "{}", stderr(&o));

    let o = storyvae(dir.path(), &["synth"], &[("STORYVAE_EVAL_P", "1.5")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("eval.p"), "{}", stderr(&o));

    let o = storyvae(dir.path(), &["--config", "missing.toml", "synth"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_inputs_name_their_path_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = storyvae(dir.path(), &["--out", "empty", "lda"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths.train"), "{}", stderr(&o));
    let o = storyvae(dir.path(), &["--out", "empty", "eval"], &[]);
    assert!(stderr(&o).contains("paths.checkpoint"), "{}", stderr(&o));
}

#[test]
fn flag_beats_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 1\njobs = 2\n[synth]\nn_docs = 10\n").unwrap();
    let env = [("STORYVAE_SEED", "2"), ("STORYVAE_SYNTH_N_DOCS", "12")];
    let o = storyvae(dir.path(), &["--config", "c.toml", "--seed", "3", "synth"], &env);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("run/synth.manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["jobs"], 2);
    assert_eq!(m["config"]["synth"]["n_docs"], 12);
    assert_eq!(m["status"], "ok");
    assert!(m["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["versions"]["storyvae"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn pipeline_runs_end_to_end_and_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for out in ["a", "b"] {
        for cmd in ["synth", "lda", "negatives", "train", "generate", "sweep", "probe"] {
            run_ok(dir.path(), &["--out", out, cmd]);
        }
        run_ok(dir.path(), &["--out", out, "eval", "--k", "5"]);
    }
    let (a, b) = (artifacts(&dir.path().join("a")), artifacts(&dir.path().join("b")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(b[name] == *bytes, "{name} differs between runs");
    }

    let out = dir.path().join("a");
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "p,corpus_bleu,neg_corpus_bleu,self_bleu,seq_rep_4,n,config_hash,seed");
    assert_eq!(lines.len(), 32);

    let manifest = json(&out.join("sweep.manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(lines[1..].iter().all(|l| l.ends_with(&format!(",{hash},0"))));
    assert!(manifest["artifacts"][0]["sha256"].as_str().unwrap().len() == 64);

    for (file, manifest) in [
        ("train.jsonl", "synth"),
        ("topics.json", "lda"),
        ("negatives.jsonl", "negatives"),
        ("vocab.tsv", "train"),
        ("model.json", "train"),
        ("train_log.csv", "train"),
        ("generated.jsonl", "generate"),
        ("eval.json", "eval"),
        ("au.csv", "eval"),
        ("probe.json", "probe"),
    ] {
        let hash = json(&out.join(format!("{manifest}.manifest.json")))["config_hash"].as_str().unwrap().to_string();
        let text = fs::read_to_string(out.join(file)).unwrap();
        assert!(text.contains(&hash), "{file} does not embed {hash}");
    }
}

#[test]
fn eval_emits_perplexity_active_units_and_repetition() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for cmd in ["synth", "lda", "train"] {
        run_ok(dir.path(), &[cmd]);
    }
    let o = run_ok(dir.path(), &["eval", "--k", "500", "--n-samples", "3"]);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let report = json(&dir.path().join("run/eval.json"));
    assert_eq!(printed["iw_ppl"], report["iw_ppl"]);
    assert_eq!(report["iw_ppl"]["k"], 500);
    assert!(report["iw_ppl"]["ppl"].as_f64().unwrap() > 1.0);
    assert_eq!(report["active_units"]["latent_dim"], 4);
    assert!(report["seq_rep"]["values"]["seq_rep_4"]["generated"].is_number());
    assert_eq!(report["seq_rep"]["n_samples"], 3);
    let au = fs::read_to_string(dir.path().join("run/au.csv")).unwrap();
    assert_eq!(au.lines().count(), 5);
}

#[test]
fn grad_check_exit_code_follows_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = storyvae(dir.path(), &["grad-check"], &[("STORYVAE_GRAD_CHECK_SEEDS", "2")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&dir.path().join("run/grad_check.json"));
    assert_eq!(report["passed"], true);
    assert!(report["ops"]["matmul"].as_f64().unwrap() < 1e-4);

    let o = storyvae(dir.path(), &["grad-check"], &[("STORYVAE_GRAD_CHECK_EPS", "0.5")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grad_check.eps"));

    let o = storyvae(dir.path(), &["grad-check"], &[("STORYVAE_GRAD_CHECK_SEEDS", "1"), ("STORYVAE_GRAD_CHECK_TOLERANCE", "1e-30")]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(json(&dir.path().join("run/grad_check.json"))["passed"], false);
    assert!(json(&dir.path().join("run/grad-check.manifest.json"))["status"].as_str().unwrap().starts_with("failed"));
}
