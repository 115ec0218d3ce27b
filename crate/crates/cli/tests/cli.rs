use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
# small enough for a few seconds per command
n_train_morphs = 3
n_test_morphs = 2
n_pd_morphs = 3, 6
transitions_per_morph = 16
repeats = 2
epochs = 2
ablation_epochs = 2
minibatch = 16
n_eval_states = 8
teacher_fit.n_states = 32
teacher_fit.epochs = 2
teacher_fit.minibatch = 16
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperdistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

/// Relative path and bytes of every file below `root`, sorted.
fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn analyze_costs_reproduces_the_table() {
    let (dir, _) = setup();
    let out = dir.path().join("costs");
    ok(&[
        "analyze-costs",
        "--specs",
        s(&workspace_file("configs/table2_ft.cfg")),
        "--limbs",
        "10",
        "--out-dir",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("costs.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,params_abs,params_rel,flops_abs,flops_rel,compile_flops");
    assert_eq!(lines.len(), 6);
    let hd = lines.iter().find(|l| l.starts_with("hyperdistill,")).unwrap();
    assert!(hd.starts_with("hyperdistill,104202,1,202752,1,"));

    ok(&[
        "analyze-costs",
        "--specs",
        s(&workspace_file("configs/table2_vt.cfg")),
        "--out-dir",
        s(&out),
        "--format",
        "json-lines",
    ]);
    let jsonl = fs::read_to_string(out.join("costs.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!(first["flops_rel"].as_f64().unwrap() > 50.0);
}

#[test]
fn shipped_configs_match_the_library_table() {
    let (dir, _) = setup();
    for env in ["ft", "vt", "obstacle"] {
        let out = dir.path().join(env);
        ok(&[
            "analyze-costs",
            "--specs",
            s(&workspace_file(&format!("configs/table2_{env}.cfg"))),
            "--out-dir",
            s(&out),
        ]);
        let specs = hyperdistill::analysis::table2_specs(env).unwrap();
        let expected = hyperdistill::analysis::emit_report(&specs, 10).unwrap().to_csv();
        assert_eq!(fs::read_to_string(out.join("costs.csv")).unwrap(), expected, "{env}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "n_train_morph = 3\n").unwrap();
    let out = run(&["generate-morphs", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_train_morph"));

    let out = run(&[
        "compile-policy",
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--morph",
        "x.morph",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let out = run(&["ablate", "--which", "nothing", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_stay_inside_the_out_dir() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    ok(&["make-oracle", "--config", s(&cfg), "--out-dir", s(&out)]);
    ok(&["generate-morphs", "--config", s(&cfg), "--out-dir", s(&out)]);
    let morph = out.join("test/test-0.morph");
    let r = run(&[
        "compile-policy",
        "--checkpoint",
        s(&out.join("oracle.ckpt")),
        "--morph",
        s(&morph),
        "--out",
        "../escape.ckpt",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!dir.path().join("escape.ckpt").exists());
}

#[test]
fn full_pipeline_with_deployment_and_manifest() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let step = |name: &str, extra: &[&str]| {
        let out = root.join(name);
        let mut args = vec![name, "--config", s(&cfg), "--out-dir", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let morphs = step("generate-morphs", &[]);
    let index = fs::read_to_string(morphs.join("morphologies.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 3 + 6 + 2);
    let oracle = step("make-oracle", &[]).join("oracle.ckpt");
    let train = morphs.join("train");
    let data = step("collect", &["--morphs", s(&train), "--oracle", s(&oracle)]).join("dataset.hdd");
    let distilled = step("distill", &["--data", s(&data), "--morphs", s(&train)]);
    let losses = fs::read_to_string(distilled.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2);

    let robot = morphs.join("test/test-1.morph");
    let compiled = step(
        "compile-policy",
        &["--checkpoint", s(&distilled.join("student.ckpt")), "--morph", s(&robot), "--out", "robot.ckpt"],
    );
    let policy = compiled.join("robot.ckpt");

    // the compiled policy is evaluated without the hypernetwork
    let ev = step("evaluate", &["--student", s(&policy), "--morph", s(&robot), "--oracle", s(&oracle)]);
    let by_compiled = fs::read_to_string(ev.join("evaluation.csv")).unwrap();
    let full = root.join("evaluate-full");
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&full),
        "--student",
        s(&distilled.join("student.ckpt")),
        "--morph",
        s(&robot),
        "--oracle",
        s(&oracle),
    ]);
    let by_model = fs::read_to_string(full.join("evaluation.csv")).unwrap();
    let kl = |t: &str| -> f64 { t.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap() };
    assert!((kl(&by_compiled) - kl(&by_model)).abs() < 1e-9);

    let teachers = step("fit-teachers", &["--morphs", s(&train)]);
    assert_eq!(fs::read_dir(teachers.join("teachers")).unwrap().count(), 3);
    let from_teachers = step("collect", &["--morphs", s(&train), "--teachers", s(&teachers.join("teachers"))]);
    assert!(from_teachers.join("dataset.hdd").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(distilled.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "distill");
    let outputs = manifest["outputs"].as_array().unwrap();
    let listed: Vec<&str> = outputs.iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(listed, ["distill_summary.csv", "losses.csv", "student.ckpt"]);
    for o in outputs {
        let bytes = fs::read(distilled.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
        assert_ne!(bytes.len(), 0);
    }
    assert!(manifest["inputs"].as_array().unwrap().len() >= 4);
}

#[test]
fn commands_are_idempotent() {
    let (dir, cfg) = setup();
    for cmd in ["generate-morphs", "make-oracle"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        ok(&[cmd, "--config", s(&cfg), "--seed", "5", "--out-dir", s(&a)]);
        ok(&[cmd, "--config", s(&cfg), "--seed", "5", "--out-dir", s(&b)]);
        assert_eq!(snapshot(&a), snapshot(&b));
    }
    let a = dir.path().join("ablate-a");
    let b = dir.path().join("ablate-b");
    for out in [&a, &b] {
        ok(&["ablate", "--which", "pd_count", "--seed", "7", "--config", s(&cfg), "--out-dir", s(out)]);
    }
    let snap = snapshot(&a);
    assert_eq!(snap, snapshot(&b));
    let names: Vec<&str> = snap.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["ablation_pd_count.csv", "ablation_pd_count_curves.svg", "ablation_pd_count_test.svg", "run_manifest.json"]
    );
    let seeds = fs::read_to_string(a.join("ablation_pd_count.csv")).unwrap();
    assert!(seeds.lines().any(|l| l.starts_with("pd_count,pd_3,7,test,")));
    assert!(seeds.lines().any(|l| l.starts_with("pd_count,pd_6,median,test,")));
}

#[test]
fn numerical_failures_exit_with_three() {
    let (dir, cfg) = setup();
    let morphs = dir.path().join("m");
    ok(&["generate-morphs", "--config", s(&cfg), "--out-dir", s(&morphs)]);
    let col = dir.path().join("c");
    ok(&["collect", "--config", s(&cfg), "--morphs", s(&morphs.join("train")), "--out-dir", s(&col)]);
    let mut bytes = fs::read(col.join("dataset.hdd")).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    let poisoned = dir.path().join("nan.hdd");
    fs::write(&poisoned, bytes).unwrap();
    let out = run(&[
        "distill",
        "--config",
        s(&cfg),
        "--data",
        s(&poisoned),
        "--morphs",
        s(&morphs.join("train")),
        "--out-dir",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
