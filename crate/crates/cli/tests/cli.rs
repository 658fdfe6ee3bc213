use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn budgetface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budgetface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
[data]
num_identities = 20
test_identities = 6
samples_per_id = 6
sets_per_identity = 3
max_frames = 6

[loss]
loss = "arcface"

[schedule]
warmup_iters = 5
total_iters = 40
batch_size = 32
quality_iters = 20

[eval]
fpr_targets = [0.1]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn flops_of_bundled_network() {
    let o = budgetface(&["flops", "r100"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("stage3"));
    assert!(text.lines().last().unwrap().contains("24.22G"));
}

#[test]
fn search_lists_widened_candidates() {
    let o = budgetface(&[
        "search",
        "r100",
        "--budget",
        "40e9",
        "--depth-grid",
        "1",
        "--width-grid",
        "1,1.125",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[72, 144, 288, 576]"));
}

#[test]
fn search_with_no_fitting_candidate_is_invalid() {
    let o = budgetface(&["search", "r100", "--budget", "1e6"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nnum_identities = 0\n");
    let o = budgetface(&["--config", &cfg, "gen"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), "[schedule]\nno_such_field = 1\n");
    assert_eq!(
        budgetface(&["--config", &cfg, "gen"]).status.code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n").replace(
        "warmup_iters = 5",
        "warmup_iters = 5\nbase_lr = 1e6\npeak_lr = 1e12",
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    let o = budgetface(&["--config", &cfg, "--out", out.to_str().unwrap(), "train"]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_train_aggregate_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    assert!(budgetface(&["--config", &cfg, "--out", out_s, "gen"])
        .status
        .success());
    assert!(out.join("train_inputs.csv").exists());
    assert!(out.join("test_frames.csv").exists());

    let o = budgetface(&["--config", &cfg, "--out", out_s, "--seed", "5", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("arcface");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("iter,lr,loss"));
    assert_eq!(metrics.lines().count(), 41);
    assert!(run.join("checkpoint.json").exists());

    let frames = run.join("test_framesets.csv");
    let o = budgetface(&[
        "--out",
        out_s,
        "aggregate",
        frames.to_str().unwrap(),
        "--policy",
        "qan_pp",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(out.join("aggregated_qan_pp.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 6 * 3);

    let emb = run.join("test_embeddings.csv");
    let o = budgetface(&[
        "--out",
        out_s,
        "eval",
        emb.to_str().unwrap(),
        "--fpr",
        "0.01",
        "--fpr",
        "0.1",
        "--roc",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().next(), Some("fpr_target,threshold,tpr"));
    assert_eq!(eval.lines().count(), 3);
    assert!(out.join("roc.csv").exists());
}

#[test]
fn aggregate_rejects_unknown_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    fs::write(&path, "set_id,frame_idx,quality,dim0,dim1\na,0,,1,0\n").unwrap();
    let o = budgetface(&["aggregate", path.to_str().unwrap(), "--policy", "median"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = budgetface(&["--config", &cfg, "--out", out.to_str().unwrap(), "report"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("report.csv")).unwrap();
    assert!(ra == fs::read(b.join("report.csv")).unwrap());
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 1 + 5);
    // compared as bools to keep multi-megabyte byte dumps out of failure output
    assert!(
        fs::read(a.join("arcface/checkpoint.json")).unwrap()
            == fs::read(b.join("arcface/checkpoint.json")).unwrap()
    );
}
