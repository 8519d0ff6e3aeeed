use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pinnx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pinnx")).args(args).current_dir(cwd).env("PINNX_WORKERS", "1").output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    stdout
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(format!("{name}.toml"));
    fs::write(&p, body).unwrap();
    p
}

const TINY: &str = r#"
name = "tiny"
equation = "ac"
profile = "desk"
seeds = 2
output = "runs"
[activation]
family = "lctanh"
n = 2
[initial]
collocation_points = 200
[initial.lbfgs]
max_iters = 15
[transfer]
method = "l2"
pool_size = 400
epochs = 10
fisher_points = 40
[grid]
nx_internal = 256
"#;

#[test]
fn missing_reference_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny", TINY);
    let out = pinnx(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pinnx reference"));
}

#[test]
fn bad_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a", &format!("{TINY}\n[extra]\nkey = 1\n"));
    let bad_eq = write_config(dir.path(), "b", &TINY.replace("\"ac\"", "\"heat\""));
    let zero_k = write_config(dir.path(), "c", &TINY.replace("pool_size = 400", "pool_size = 400\nk = 0"));
    for cfg in [unknown, bad_eq, zero_k] {
        let out = pinnx(&["train", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(pinnx(&["reference", "--equation", "heat"], dir.path()).status.code(), Some(1));
    assert_eq!(pinnx(&["train"], dir.path()).status.code(), Some(1));
    assert_eq!(pinnx(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "tiny", TINY);
    let c = cfg.to_str().unwrap();

    let out = ok(&pinnx(&["reference", "--config", c, "--no-convergence", "--csv"], root));
    assert!(out.contains("201 x 400 grid"), "{out}");
    assert!(root.join("runs/reference/ac.grid").exists() && root.join("runs/reference/ac.grid.json").exists());
    assert!(root.join("runs/reference/ac.csv").exists());

    ok(&pinnx(&["train", "--config", c], root));
    let run = root.join("runs/tiny");
    for seed in ["seed-000", "seed-001"] {
        let s = run.join(seed);
        for f in ["config.toml", "report.json", "metrics.csv", "model_initial.pinnx", "trace_initial.csv"] {
            assert!(s.join(f).exists(), "{seed}/{f}");
        }
    }
    let before = fs::read(run.join("seed-000/model_initial.pinnx")).unwrap();
    ok(&pinnx(&["train", "--config", c, "--resume"], root));
    assert_eq!(before, fs::read(run.join("seed-000/model_initial.pinnx")).unwrap());

    let out = ok(&pinnx(&["transfer", "--config", c, "--method", "vanilla,l2,ewc"], root));
    assert!(out.contains("after ewc (freeze ok)"), "{out}");
    let selected = fs::read_to_string(run.join("seed-000/selected.csv")).unwrap();
    assert_eq!(selected.lines().count(), 1 + 80);
    for m in ["vanilla", "l2", "ewc"] {
        assert!(run.join(format!("seed-001/model_transfer_{m}.pinnx")).exists());
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    // 2 seeds x (initial + 3 methods) x 3 reported regions
    assert_eq!(metrics.lines().count(), 1 + 2 * 4 * 3);
    assert!(run.join("summary.json").exists());

    let tables = root.join("tables");
    ok(&pinnx(&["table", "--out", tables.to_str().unwrap(), run.to_str().unwrap()], root));
    let md = fs::read_to_string(tables.join("tables.md")).unwrap();
    assert!(md.contains("| AF | L2 without TL | L2 with TL | MAE without TL | MAE with TL |"), "{md}");
    assert!(md.contains("| TL method |"), "{md}");
    assert!(tables.join("ac_activations.csv").exists() && tables.join("ac_benchmark.csv").exists());

    let seed = run.join("seed-000");
    let s = seed.to_str().unwrap();
    let svg = |kind: &str, extra: &[&str]| {
        let out = root.join(format!("{kind}.svg"));
        let mut args = vec!["plot", kind, "--run", s, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&pinnx(&args, root));
        fs::read_to_string(out).unwrap()
    };
    assert!(svg("slice", &["--method", "l2"]).starts_with("<svg"));
    assert_eq!(svg("scatter", &[]).matches(r#"class="point""#).count(), 80);
    assert_eq!(svg("gradnorm", &[]).matches(r#"class="bar"#).count(), 7);

    let timing = root.join("timing");
    let out = ok(&pinnx(&["timing", "--config", c, "--out", timing.to_str().unwrap()], root));
    for row in ["tanh w/o TL", "lctanh w/o TL", "tanh w/ TL", "lctanh w/ TL"] {
        assert!(out.contains(row), "{out}");
    }
    assert!(timing.join("timing.json").exists());
}
