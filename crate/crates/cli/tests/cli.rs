use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffora_cli::{compare_csv, exit, CHECKPOINT_FILE, GAMMA_BAR_FILE, GAMMA_BIN_FILE, LOSS_FILE, REPORT_FILE};
use diffora_core::pipeline::{RunConfig, RunReport, SEED_ENV};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diffora"));
    c.env_remove(SEED_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TOY: &str = r#"
seed = 3
eta = 0.01
eta_dam = 5.0
eta_finetune = 0.0005
v_outer = 2
t_inner = 3
t_finetune = 5
rho = 0.5
r_l = 2
r_s = 1

[model]
layers = 2
dim = 4
seq_len = 2

[data]
source = "planted"
planted_k = 3
n = 24
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), exit::SUCCESS);
    let out = run(&["relax"]);
    assert_eq!(code(&out), exit::USAGE);
    assert!(stderr(&out).contains("--config"));
    let out = run(&["run-all", "--config", "c.json", "--frobnicate"]);
    assert_eq!(code(&out), exit::USAGE);
    assert!(stderr(&out).contains("--frobnicate"));
    assert_eq!(code(&run(&[])), exit::USAGE);
}

#[test]
fn run_all_writes_five_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&["run-all", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&res), exit::SUCCESS, "{}", stderr(&res));
    }
    for f in [REPORT_FILE, LOSS_FILE, GAMMA_BAR_FILE, GAMMA_BIN_FILE, CHECKPOINT_FILE] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
    let bin_csv = std::fs::read_to_string(a.join(GAMMA_BIN_FILE)).unwrap();
    assert_eq!(bin_csv.lines().next(), Some("Q,K,V,I,O,D"));
    let losses = std::fs::read_to_string(a.join(LOSS_FILE)).unwrap();
    assert_eq!(losses.lines().next(), Some("step,train_loss,valid_loss"));
    assert_eq!(losses.lines().count(), 1 + 2 * 3 + 5);
    // No temporaries are left behind.
    assert_eq!(std::fs::read_dir(&a).unwrap().count(), 5);
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(TOY).unwrap();
    let path = write_config(dir.path(), "toy.json", &serde_json::to_string(&cfg).unwrap());
    let out = run(&["run-all", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), exit::SUCCESS, "{}", stderr(&out));
}

#[test]
fn empty_budget_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TOY.replace("rho = 0.5", "rho = 0.1"));
    let out = run(&["run-all", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), exit::USAGE);
    assert!(!dir.path().join("o").join(REPORT_FILE).exists());
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = TOY.replace("eta = 0.01", "eta = 1e6").replace("eta_finetune = 0.0005", "eta_finetune = 1e6");
    let cfg = write_config(dir.path(), "hot.toml", &text);
    let out = run(&["run-all", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), exit::DIVERGENCE, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn missing_files_exit_four() {
    let out = run(&["run-all", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code(&out), exit::IO);
    let dir = tempfile::tempdir().unwrap();
    let junk = write_config(dir.path(), "junk.dfra", "not a checkpoint");
    assert_eq!(code(&run(&["dump-dam", "--checkpoint", s(&junk)])), exit::IO);
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let o = dir.path().join("o");
    let out = bin()
        .args(["run-all", "--config", s(&cfg), "--out", s(&o)])
        .env(SEED_ENV, "11")
        .output()
        .unwrap();
    assert_eq!(code(&out), exit::SUCCESS);
    let report: RunReport = toml::from_str(&std::fs::read_to_string(o.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.seed, 11);
}

#[test]
fn staged_commands_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let p = |n: &str| dir.path().join(n);
    assert_eq!(code(&run(&["run-all", "--config", s(&cfg), "--out", s(&p("all"))])), 0);
    assert_eq!(code(&run(&["relax", "--config", s(&cfg), "--out", s(&p("s1"))])), 0);
    assert_eq!(
        code(&run(&["discretize", "--checkpoint", s(&p("s1").join(CHECKPOINT_FILE)), "--out", s(&p("d"))])),
        0
    );
    assert_eq!(
        code(&run(&["finetune", "--checkpoint", s(&p("d").join(CHECKPOINT_FILE)), "--out", s(&p("s2"))])),
        0
    );
    let read = |d: &str, f: &str| std::fs::read(p(d).join(f)).unwrap();
    assert_eq!(read("all", GAMMA_BAR_FILE), read("s1", GAMMA_BAR_FILE));
    assert_eq!(read("all", GAMMA_BIN_FILE), read("d", GAMMA_BIN_FILE));
    assert_eq!(read("all", CHECKPOINT_FILE), read("s2", CHECKPOINT_FILE));

    let dumped = run(&["dump-dam", "--checkpoint", s(&p("s2").join(CHECKPOINT_FILE)), "--binary"]);
    assert_eq!(code(&dumped), 0);
    assert_eq!(dumped.stdout, read("all", GAMMA_BIN_FILE));
    // A relaxed checkpoint has no binary selection yet.
    let relaxed = run(&["dump-dam", "--checkpoint", s(&p("s1").join(CHECKPOINT_FILE)), "--binary"]);
    assert_eq!(code(&relaxed), exit::USAGE);
}

#[test]
fn discretize_with_rho_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let s1 = dir.path().join("s1");
    assert_eq!(code(&run(&["relax", "--config", s(&cfg), "--out", s(&s1)])), 0);
    let d = dir.path().join("d");
    let ck = s1.join(CHECKPOINT_FILE);
    assert_eq!(code(&run(&["discretize", "--checkpoint", s(&ck), "--rho", "0.9", "--out", s(&d)])), 0);
    let csv = std::fs::read_to_string(d.join(GAMMA_BIN_FILE)).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').filter(|v| *v == "1").count(), 5);
    }
    assert_eq!(code(&run(&["discretize", "--checkpoint", s(&ck), "--rho", "0.1", "--out", s(&d)])), exit::USAGE);
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let data = dir.path().join("data.csv");
    assert_eq!(code(&run(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let ds = diffora_core::data::ingest_csv(&data, "y", false).unwrap();
    assert_eq!((ds.len(), ds.dim()), (24, 8));
}

#[test]
fn compare_table_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("cmp");
    let res = run(&["compare", "--config", s(&cfg), "--strategies", "diffora,random", "--seeds", "0,1,2,3,4", "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[3], "5");
        assert!(!cols[7].is_empty(), "recovery column populated");
    }

    let rows = diffora_cli::cmd_compare(&cfg, &["diffora".into()], &[0], &[0.2, 0.4, 0.5, 0.7, 0.9], None).unwrap();
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    assert_eq!(ks, [1, 2, 3, 4, 5]);
    assert_eq!(compare_csv(&rows).lines().count(), 6);

    let bad = run(&["compare", "--config", s(&cfg), "--strategies", "diffora,oracle"]);
    assert_eq!(code(&bad), exit::USAGE);
}

const THEORY_SMALL: &str = r#"
seed = 2

[theory]
n = 6
d = 4
m = 256
samples = 20000
steps = 400
"#;

#[test]
fn verify_theory_all_ones_gate_reports_equal_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{THEORY_SMALL}\n[theory.gamma]\nkind = \"all_ones\"\n");
    let cfg = write_config(dir.path(), "t.toml", &text);
    let report = match diffora_cli::cmd_verify_theory(&cfg, Some(dir.path())) {
        Ok(r) => r,
        Err(e) => panic!("{e}"),
    };
    assert_eq!(report.eigen.lambda_gamma, report.eigen.lambda_0);
    assert!(dir.path().join("theory_report.toml").exists());
}

#[test]
fn verify_theory_tiny_width_fails_with_margins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", "seed = 1\n[theory]\nm = 8\n");
    let out = run(&["verify-theory", "--config", s(&cfg)]);
    assert_eq!(code(&out), exit::ASSERTION);
    assert!(stderr(&out).contains("failed checks"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("need"));
}
