use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = "\
# small models so the suite stays quick
encoder.d = 16
encoder.d_emb = 8
encoder.epochs = 3
gnn.d = 16
gnn.heads = 2
gnn.k = 4
gnn.epochs = 1
window.c = 1
knn.k = 4
";

fn gnnsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnsl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = gnnsl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s<P: AsRef<Path> + ?Sized>(p: &P) -> &str {
    p.as_ref().to_str().unwrap()
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn p(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }
}

/// Corpus, encoder, datastore and GNN, built once through the binary.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.cfg");
        std::fs::write(&config, SMALL).unwrap();
        let p = Pipeline { _dir: dir, root, config };
        let cfg = s(&p.config);
        let (data, train, dev) = (p.p("data"), p.p("data/train.conll"), p.p("data/dev.conll"));
        let (enc, store, gnn) = (p.p("enc.bin"), p.p("store.gsld"), p.p("gnn.bin"));
        ok(&["gen-data", "--seed", "2", "--n", "150", "--out", &data, "--config", cfg]);
        ok(&["train-vanilla", "--train", &train, "--dev", &dev, "--out", &enc, "--config", cfg]);
        ok(&["build-datastore", "--model", &enc, "--train", &train, "--out", &store, "--config", cfg]);
        ok(&["train-gnn", "--model", &enc, "--datastore", &store, "--train", &train, "--out", &gnn, "--config", cfg]);
        p
    })
}

fn tag(mode: &str, extra: &[&str]) -> Vec<u8> {
    let p = pipeline();
    let (enc, store, gnn, input) = (p.p("enc.bin"), p.p("store.gsld"), p.p("gnn.bin"), p.p("data/test.conll"));
    let mut args = vec![
        "tag", "--mode", mode, "--model", &enc, "--datastore", &store, "--gnn", &gnn, "--input", &input, "--config", s(&p.config),
    ];
    args.extend_from_slice(extra);
    ok(&args).stdout
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        ok(&["gen-data", "--seed", "1", "--n", "60", "--out", s(&dir.path().join(sub))]);
    }
    for f in ["train.conll", "dev.conll", "test.conll"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn knn_with_lambda_one_matches_vanilla() {
    assert_eq!(tag("vanilla", &[]), tag("knn", &["--lambda", "1.0"]));
}

#[test]
fn every_mode_is_repeatable_and_thread_independent() {
    for mode in ["vanilla", "knn", "gnn", "gnn+knn"] {
        let a = tag(mode, &[]);
        assert!(!a.is_empty());
        assert_eq!(a, tag(mode, &[]), "{mode}");
        assert_eq!(a, tag(mode, &["--threads", "3"]), "{mode}");
    }
}

#[test]
fn tagged_output_keeps_the_token_column() {
    let p = pipeline();
    let input = p.p("odd.conll");
    std::fs::write(&input, "Ünïcode\tB-PER\n\"quoted\" O extra\n\n\n3.14\n").unwrap();
    let out = ok(&[
        "tag", "--mode", "vanilla", "--model", &p.p("enc.bin"), "--input", s(&input), "--config", s(&p.config),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("Ünïcode "));
    assert!(lines[1].starts_with("\"quoted\" "));
    assert_eq!(lines[2], "");
    assert!(lines[3].starts_with("3.14 "));
    assert!(lines.iter().filter(|l| !l.is_empty()).all(|l| l.split(' ').count() == 2));
}

#[test]
fn evaluate_self_is_perfect() {
    let p = pipeline();
    let gold = p.p("data/test.conll");
    let out = ok(&["evaluate", "--gold", &gold, "--pred", &gold]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("f1=100.00\n"), "{text}");

    let tagged = p.p("tagged.conll");
    std::fs::write(&tagged, tag("knn", &[])).unwrap();
    let out = ok(&[
        "evaluate", "--gold", &gold, "--pred", &tagged, "--train", &p.p("data/train.conll"),
        "--json", &p.p("report.json"),
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("long_tail_f1="));
    assert!(std::fs::read_to_string(p.p("report.json")).unwrap().contains("\"token_accuracy\""));
}

#[test]
fn evaluate_rejects_misaligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&a, "x O\ny B-PER\n").unwrap();
    std::fs::write(&b, "x O\nz B-PER\n").unwrap();
    assert_eq!(gnnsl(&["evaluate", "--gold", s(&a), "--pred", s(&b)]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let p = pipeline();
    let (model, input, store) = (p.p("enc.bin"), p.p("data/test.conll"), p.p("store.gsld"));
    let (model, input) = (model.as_str(), input.as_str());
    for args in [
        vec!["tag", "--mode", "knn", "--model", model, "--input", input],
        vec!["tag", "--mode", "gnn", "--model", model, "--datastore", &store, "--input", input],
        vec!["tag", "--mode", "sideways", "--model", model, "--input", input],
        vec!["tag", "--model", model, "--input", input],
        vec!["tag", "--mode", "vanilla", "--model", model, "--input", input, "--set", "knn.bogus=1"],
        vec!["tag", "--mode", "vanilla", "--model", model, "--input", input, "--set", "knn.lambda=2"],
        vec!["frobnicate"],
    ] {
        let out = gnnsl(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(gnnsl(&["tag", "--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    // a datastore built by a different encoder
    let other = dir.path().join("other.bin");
    ok(&[
        "train-vanilla", "--train", &p.p("data/train.conll"), "--out", s(&other), "--seed", "9", "--config", s(&p.config),
    ]);
    let out = gnnsl(&[
        "tag", "--mode", "knn", "--model", s(&other), "--datastore", &p.p("store.gsld"), "--input",
        &p.p("data/test.conll"), "--config", s(&p.config),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("consistency"));

    let bytes = std::fs::read(p.p("enc.bin")).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = gnnsl(&["tag", "--mode", "vanilla", "--model", s(&cut), "--input", &p.p("data/test.conll")]);
    assert_eq!(out.status.code(), Some(2));
    let out = gnnsl(&["tag", "--mode", "vanilla", "--model", s(&dir.path().join("missing")), "--input", s(&cut)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_identical_tables_on_rerun() {
    let p = pipeline();
    let out_dir = p.p("ablate");
    let (train, dev, test) = (p.p("data/train.conll"), p.p("data/dev.conll"), p.p("data/test.conll"));
    let args = [
        "ablate", "--train", &train, "--dev", &dev, "--test", &test, "--out-dir", &out_dir, "--config", s(&p.config),
        "--setups", "vanilla,vanilla+knn", "--k-sweep", "1,2", "--seeds", "1,2",
    ];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("seed=")).count(), 2 * (1 + 3));
    assert_eq!(text.lines().filter(|l| l.starts_with("best_k")).count(), 2);
    let tables: Vec<_> = std::fs::read_dir(&out_dir).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_str().unwrap().starts_with("results-")).collect();
    assert_eq!(tables.len(), 1);
    assert!(String::from_utf8_lossy(&b.stderr).contains("trained 0 encoders, 0 datastores, 0 GNNs"));
}

/// Value of `key` in the resolved configuration logged by a cheap command.
fn resolved(key: &str, file: Option<&str>, flags: &[&str]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("g.conll");
    std::fs::write(&gold, "a O\n").unwrap();
    let cfg = dir.path().join("c.cfg");
    let mut args = vec!["evaluate", "--gold", s(&gold), "--pred", s(&gold)];
    if let Some(text) = file {
        std::fs::write(&cfg, text).unwrap();
        args.extend(["--config", s(&cfg)]);
    }
    args.extend_from_slice(flags);
    let out = ok(&args);
    let err = String::from_utf8(out.stderr).unwrap();
    let prefix = format!("{key}=");
    err.lines().find_map(|l| l.trim_start().strip_prefix(&prefix)).unwrap_or_else(|| panic!("{key} not logged:\n{err}")).to_string()
}

fn check_precedence(key: &str, default: &str, from_file: &str, from_flag: &str) {
    assert_eq!(resolved(key, None, &[]), default);
    let file = format!("{key}={from_file}\n");
    assert_eq!(resolved(key, Some(&file), &[]), from_file);
    let set = format!("{key}={from_flag}");
    assert_eq!(resolved(key, Some(&file), &["--set", &set]), from_flag);
}

#[test]
fn precedence_encoder_keys() {
    check_precedence("encoder.lr", "0.05", "0.1", "0.2");
}

#[test]
fn precedence_gnn_keys() {
    check_precedence("gnn.heads", "8", "4", "2");
}

#[test]
fn precedence_window_keys() {
    check_precedence("window.include_labels", "true", "false", "true");
}

#[test]
fn precedence_knn_keys() {
    check_precedence("knn.temperature", "1", "10", "100");
}

#[test]
fn precedence_plan_keys() {
    check_precedence("plan.k_sweep", "", "1,4", "16,32");
}

#[test]
fn precedence_data_keys() {
    check_precedence("data.scheme", "bio", "plain", "bio");
    check_precedence("synthetic.n", "2000", "100", "50");
}

#[test]
fn named_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "synthetic.seed=5\nsynthetic.n=40\n").unwrap();
    let out = ok(&["gen-data", "--out", s(&dir.path().join("d")), "--config", s(&cfg), "--seed", "7"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().any(|l| l.trim() == "synthetic.seed=7"));
    assert!(err.lines().any(|l| l.trim() == "synthetic.n=40"));
}

#[test]
fn config_file_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    for text in ["encoder.width=3\n", "no equals sign\n"] {
        std::fs::write(&cfg, text).unwrap();
        let out = gnnsl(&["gen-data", "--out", s(dir.path()), "--config", s(&cfg)]);
        assert_eq!(out.status.code(), Some(1), "{text}");
    }
}
