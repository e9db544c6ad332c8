use std::path::Path;
use std::process::{Command, Output};

fn recdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recdet"))
        .args(args)
        .env_remove("RECDET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn decoder_total(o: &Output) -> u64 {
    let text = stdout(o);
    let line = text
        .lines()
        .find(|l| l.starts_with("decoder parameters:"))
        .unwrap_or_else(|| panic!("no total in\n{text}"));
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

const TINY: &str = r#"
c = 16
d = 4
n_heads = 2
ffn_dim = 32
num_proposals = 8
n_stages = 3
image_size = 64
iterations = 4
batch_size = 1
lr_decay_at = [3]
checkpoint_every = 2
sharing = "shared_all"
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn paper_scale_shared_audit_is_a_sixth_of_cascade() {
    let shared = recdet(&["audit", "--paper-scale", "--sharing", "shared_all"]);
    let cascade = recdet(&["audit", "--paper-scale", "--sharing", "cascade"]);
    assert!(shared.status.success() && cascade.status.success());
    assert_eq!(decoder_total(&shared) * 6, decoder_total(&cascade));
    assert!(stdout(&shared).contains("8421376"));
    assert!(stdout(&shared).contains("3211520"));
}

#[test]
fn audit_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = recdet(&["audit", "--paper-scale", "--box-pe", "--csv", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("layer,group,params_exact,params_millions\n"));
}

#[test]
fn in_stage_depth_changes_flops_only() {
    let one = recdet(&["audit", "--depth", "1"]);
    let two = recdet(&["audit", "--depth", "2"]);
    assert_eq!(decoder_total(&one), decoder_total(&two));
    let macs = |o: &Output| -> u64 {
        let text = stdout(o);
        let line = text.lines().find(|l| l.trim_start().starts_with("decoder ")).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(macs(&two) > macs(&one));
}

#[test]
fn gradcheck_is_deterministic_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let reports: Vec<String> = (0..2)
        .map(|i| {
            let path = dir.path().join(format!("r{i}.json"));
            let o = recdet(&["gradcheck", "--seed", "7", "--report", path.to_str().unwrap()]);
            assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
            std::fs::read_to_string(path).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn failed_gradcheck_exits_with_numerical_status() {
    // A tolerance no finite-difference estimate can meet.
    let o = recdet(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("gradient check failed"));
}

#[test]
fn missing_config_is_a_validation_failure() {
    let o = recdet(&["train", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("no such file"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ffn_width = 3\n");
    let o = recdet(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ffn_width"), "{}", stderr(&o));
    std::fs::write(dir.path().join("t.toml"), "n_heads = \"two\"\n").unwrap();
    let o = recdet(&["train", "--config", dir.path().join("t.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`n_heads`"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_status_one() {
    let unknown_command = recdet(&["fit"]);
    assert_eq!(unknown_command.status.code(), Some(1));
    assert!(stderr(&unknown_command).contains("Usage"));
    let unknown_flag = recdet(&["audit", "--fast"]);
    assert_eq!(unknown_flag.status.code(), Some(1));
    let help = recdet(&["--help"]);
    assert!(help.status.success());
    for cmd in ["train", "eval", "audit", "gradcheck", "curves", "synth-preview"] {
        assert!(stdout(&help).contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn train_eval_and_curves_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), "");
    let o = recdet(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--log-every", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "final.ckpt", "checkpoint_000002.ckpt", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    let ckpt = run.join("final.ckpt");
    let o = recdet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--stages", "2", "--images", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("stages 2: AP"), "{}", stdout(&o));

    let sweep_dir = dir.path().join("sweep");
    let o = recdet(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sweep",
        "--images",
        "3",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = std::fs::read_to_string(sweep_dir.join("stage_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("stage_count,AP,AP50,AP75"));
    assert_eq!(curve.lines().count(), 4);

    let o = recdet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--stages", "4"]);
    assert_eq!(o.status.code(), Some(2), "depth beyond the trained stages");

    let o = recdet(&["curves", "--run", run.to_str().unwrap(), "--images", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let conv = std::fs::read_to_string(run.join("convergence.csv")).unwrap();
    let iterations: Vec<&str> = conv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iterations, ["2", "4"]);
    assert!(run.join("stage_curve.csv").exists());

    let resumed = dir.path().join("resumed");
    let o = recdet(&[
        "train",
        "--config",
        &cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        run.join("checkpoint_000002.ckpt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(resumed.join("final.ckpt")).unwrap(), std::fs::read(&ckpt).unwrap());
}

#[test]
fn diverging_training_exits_with_numerical_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = 1e30\n");
    let o = recdet(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at iteration"), "{}", stderr(&o));
}

#[test]
fn output_directory_defaults_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_recdet"))
        .args(["synth-preview", "--count", "2", "--size", "64"])
        .env("RECDET_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..2 {
        let img = image::open(dir.path().join(format!("scene_{i:03}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
}
