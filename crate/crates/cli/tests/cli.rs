use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const TINY: &str = r#"
seed = 4

[cvae]
depth = 1
latent_dim = 4
hidden = 32
epochs = 2
batch = 128
lr = 0.001

[selest]
orderings = 1
depth = 1
hidden = 16
epochs = 1
batch = 256
walks = 64

[engine]
n_samples = 200

[eval]
count = 2
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("aqp.toml"), format!("{TINY}\n{extra}")).unwrap();
        let f = Fixture { dir };
        let out = f.run(&["synth", "--preset", "rare-group", "--rows", "3000", "--out", f.csv().to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        f
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn csv(&self) -> PathBuf {
        self.path().join("data.csv")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_aqp"));
        c.current_dir(self.path())
            .args(["--config", "aqp.toml", "--table", "data.csv", "--schema", "data.schema.toml", "--output", "out"])
            .args(args);
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn train(&self) -> String {
        let out = self.run(&["train"]);
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out)
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn checksum(train_output: &str) -> String {
    train_output.lines().find_map(|l| l.strip_prefix("checksum: ")).unwrap().to_owned()
}

#[test]
fn ingest_profiles_and_writes_schema() {
    let f = Fixture::new("");
    let out = f.run(&["ingest"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rows: 3000"));
    assert!(text.contains("price"));
    assert!(f.path().join("out/schema.toml").exists());
    assert!(f.path().join("out/profile.json").exists());
}

#[test]
fn train_is_reproducible_and_queries_answer() {
    let f = Fixture::new("");
    let first = f.train();
    assert!(first.contains("masking: stratified"));
    assert!(first.contains("selectivity ordering 0"));
    assert!(f.path().join("out/model.elct").exists());
    assert!(f.path().join("out/train_summary.json").exists());
    assert!(f.path().join("out/config.toml").exists());
    let second = f.train();
    assert_eq!(checksum(&first), checksum(&second));

    let out = f.run(&["query", "SELECT COUNT(*) FROM t"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("COUNT: 3000"), "{}", stdout(&out));

    let out = f.run(&["query", "SELECT c0, AVG(price) FROM t WHERE c1 = 'x' OR c2 = 't' GROUP BY c0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("c0 | AVG"), "{}", stdout(&out));

    let a = stdout(&f.run(&["query", "--json", "SELECT AVG(load) FROM t WHERE c4 = 'a'"]));
    let b = stdout(&f.run(&["query", "--json", "SELECT AVG(load) FROM t WHERE c4 = 'a'"]));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["aggregate"], "AVG");

    let out = f.run(&["query", "--plan", "SELECT COUNT(*) FROM t WHERE c0 = 'a' OR c1 = 'x'"]);
    let plan = stdout(&out);
    assert!(plan.contains("SignedSum") && plan.contains("-1"), "{plan}");

    let out = f.run(&["query", "SELECT AVG(price) FROM t JOIN u ON t.c0 = u.c0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not supported"), "{}", stderr(&out));

    let out = f.run(&["query", "SELECT AVG(nope) FROM t"]);
    assert_eq!(out.status.code(), Some(1));

    let mut child = f.cmd(&["repl"]).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"\n\\plan SELECT COUNT(*) FROM t WHERE c0 = 'a' OR c1 = 'x'\nSELECT bad\n\\exact SELECT AVG(price) FROM t WHERE c0 = 'a'\n\\q\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("rule SignedSum"), "{text}");
    assert!(text.contains("error:"), "{text}");
    assert!(text.contains("exact:") && text.contains("approximate:") && text.contains("AVG: "), "{text}");

    let out = f.run(&["eval"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let k1 = text.lines().find(|l| l.trim_start().starts_with("1 ")).unwrap();
    assert!(k1.contains("100.0%"), "{text}");
    for file in ["report.jsonl", "summary.json", "summary.txt", "config.toml"] {
        assert!(f.path().join("out/eval").join(file).exists(), "{file}");
    }

    let out = f.run(&["eval", "--samples-sweep", "100,400"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("samples"));
    assert!(f.path().join("out/eval/samples-400/summary.json").exists());
}

#[test]
fn random_masking_is_recorded() {
    let f = Fixture::new("[mask]\nkind = \"random\"\nfactor = 0.3");
    let text = f.train();
    assert!(text.contains("masking: random (factor 0.3)"), "{text}");
    let summary = std::fs::read_to_string(f.path().join("out/train_summary.json")).unwrap();
    assert!(summary.contains("\"mask\": \"random\""));
}

#[test]
fn holdout_trains_on_the_remaining_rows() {
    let f = Fixture::new("[data]\nholdout = 0.2");
    f.train();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path().join("out/train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"], 2400);
    let out = f.run(&["eval"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let first = std::fs::read_to_string(f.path().join("out/eval/report.jsonl")).unwrap();
    assert!(first.lines().count() > 0);
    let out = f.run(&["query", "SELECT COUNT(*) FROM t"]);
    assert!(stdout(&out).starts_with("COUNT: 2400"), "{}", stdout(&out));
}

#[test]
fn seed_flag_changes_the_model() {
    let f = Fixture::new("");
    let a = checksum(&f.train());
    let out = f.run(&["--seed", "99", "train"]);
    assert!(out.status.success());
    assert_ne!(a, checksum(&stdout(&out)));
}

#[test]
fn masking_ablation_compares_three_policies() {
    let f = Fixture::new("");
    let out = f.run(&["eval", "--masking-ablation"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for kind in ["stratified", "random", "none"] {
        assert!(text.contains(kind), "{text}");
        assert!(f.path().join(format!("out/eval/ablation-{kind}/summary.json")).exists());
    }
}

#[test]
fn user_errors_exit_with_one() {
    let f = Fixture::new("");
    std::fs::write(f.path().join("bad.toml"), "[cvae]\nwidth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_aqp")).current_dir(f.path()).args(["--config", "bad.toml", "ingest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = f.run(&["train", "--mask-factor", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let out = f.run(&["query", "--model", "missing.elct", "SELECT COUNT(*) FROM t"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(f.path().join("junk.elct"), b"ELCT\x01\x00").unwrap();
    let out = f.run(&["query", "--model", "junk.elct", "SELECT COUNT(*) FROM t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corrupt"));
    let out = Command::new(env!("CARGO_BIN_EXE_aqp")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_aqp")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn synth_spec_files_work() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        r#"
        rows = 50
        seed = 1
        [[categorical]]
        name = "g"
        values = ["1", "2"]
        weights = [0.5, 0.5]
        [[numerical]]
        name = "v"
        mixture = [{ weight = 1.0, mean = 10.0, std = 1.0 }]
        "#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_aqp"))
        .current_dir(dir.path())
        .args(["synth", "--spec", "spec.toml", "--out", "s.csv"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(dir.path().join("s.schema.toml").exists());
}
