//! End-to-end CLI tests: exit codes, artifact layout, determinism of the
//! emitted CSVs, and the eval command's measured-vs-analytic agreement.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn antidote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_antidote"))
        .args(args)
        .output()
        .expect("spawn antidote")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn missing_model_flag_is_usage_error() {
    let out = antidote(&["train", "--data", "synthetic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("--model"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_model_is_usage_error() {
    let out = antidote(&["flops", "--model", "vgg99"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("vgg99"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, "[experiment]\nmodle = \"toy-vgg\"\n").unwrap();
    let out = antidote(&["flops", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("modle"));
}

#[test]
fn config_file_supplies_values_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        format!(
            "[experiment]\nmodel = \"vgg16-cifar\"\nout = \"{}\"\n\n\
             [prune]\nratios_ch = [0.2, 0.2, 0.6, 0.9, 0.9]\n",
            dir.path().join("a").display()
        ),
    )
    .unwrap();
    let out = antidote(&["flops", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let json: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("a").join("flops.json"))).unwrap();
    let reduction = json["reduction_pct"].as_f64().unwrap();
    assert!((reduction - 53.5).abs() <= 3.0, "reduction {reduction}");

    // flag overrides the file's ratios
    let out = antidote(&[
        "flops",
        "--config",
        config.to_str().unwrap(),
        "--ratios-ch",
        "0,0,0,0,0",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("b").join("flops.json"))).unwrap();
    assert_eq!(json["reduction_pct"].as_f64().unwrap(), 0.0);
}

#[test]
fn flops_without_ratios_reports_zero_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let out = antidote(&["flops", "--model", "toy-vgg", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = read(&dir.path().join("flops.csv"));
    assert!(csv.starts_with("layer,dense,dynamic\n"));
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("flops.json"))).unwrap();
    assert_eq!(json["reduction_pct"].as_f64().unwrap(), 0.0);
    assert_eq!(json["dense_total"], json["dynamic_total"]);
}

#[test]
fn custom_model_spec_file_works() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("small.toml");
    fs::write(
        &spec,
        r#"
name = "small"
input = [1, 8, 8]
classes = 4
layers = [
  "conv 4 3 1 1",
  "relu",
  "dynprune",
  "maxpool",
  "gap",
  "dense 4",
  "softmax",
]
blocks = [[0, 4]]
"#,
    )
    .unwrap();
    let out = antidote(&[
        "flops",
        "--model",
        spec.to_str().unwrap(),
        "--ratios-ch",
        "0.5",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let csv = read(&dir.path().join("o").join("flops.csv"));
    assert!(csv.contains("conv01,"));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = antidote(&[
        "train",
        "--model",
        "toy-vgg",
        "--data",
        "synthetic",
        "--seed",
        "3",
        "--epochs",
        "2",
        "--train-n",
        "60",
        "--test-n",
        "30",
        "--lr",
        "1e9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("non-finite"));
}

#[test]
fn eval_without_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = antidote(&[
        "eval",
        "--model",
        "toy-vgg",
        "--data",
        "synthetic",
        "--test-n",
        "40",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    let sweep = antidote(&[
        "sweep",
        "--model",
        "toy-vgg",
        "--data",
        "synthetic",
        "--test-n",
        "40",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(sweep.status.code(), Some(3));
}

/// One small training run feeding the whole command family; checks the eval
/// command's invariants and the sweep/compare artifact shapes.
#[test]
fn train_eval_sweep_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("run1");
    let run = |args: Vec<String>| {
        let out = Command::new(env!("CARGO_BIN_EXE_antidote"))
            .args(&args)
            .output()
            .expect("spawn antidote");
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    run(vec![
        "train".to_string(),
        "--model".into(),
        "toy-vgg".into(),
        "--data".into(),
        "synthetic".into(),
        "--seed".into(),
        "7".into(),
        "--epochs".into(),
        "2".into(),
        "--train-n".into(),
        "120".into(),
        "--test-n".into(),
        "60".into(),
        "--ratios-ch".into(),
        "0.3,0.3".into(),
        "--out".into(),
        out1.to_str().unwrap().into(),
    ]);
    assert!(out1.join("history.csv").exists());
    assert!(out1.join("model.manifest").exists());

    // with zero targets the ratio columns are all zero
    let zero_out = dir.path().join("zero");
    run(vec![
        "train".into(),
        "--model".into(),
        "toy-vgg".into(),
        "--data".into(),
        "synthetic".into(),
        "--seed".into(),
        "3".into(),
        "--epochs".into(),
        "1".into(),
        "--train-n".into(),
        "60".into(),
        "--test-n".into(),
        "30".into(),
        "--out".into(),
        zero_out.to_str().unwrap().into(),
    ]);
    let history = read(&zero_out.join("history.csv"));
    let row = history.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(&cols[4..8], &["0.0000", "0.0000", "0.0000", "0.0000"]);

    // eval: zero ratios match unpruned exactly; measured == analytic
    let eval = |args: &[&str]| -> serde_json::Value {
        let mut full = vec![
            "eval",
            "--model",
            "toy-vgg",
            "--data",
            "synthetic",
            "--seed",
            "7",
            "--test-n",
            "60",
            "--out",
            out1.to_str().unwrap(),
        ];
        full.extend_from_slice(args);
        let out = antidote(&full);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        serde_json::from_str(&read(&out1.join("eval.json"))).unwrap()
    };
    let plain = eval(&[]);
    assert_eq!(plain["unpruned_accuracy"], plain["pruned_accuracy"]);
    let pruned = eval(&["--ratios-ch", "0.3,0.3", "--ratios-sp", "0.25,0"]);
    assert_eq!(
        pruned["measured_macs_total"], pruned["measured_analytic_total"],
        "measured MACs must equal the per-mask analytic count exactly"
    );
    assert!(pruned["planned_dense_total"].as_u64().unwrap() > 0);
    assert!(
        pruned["planned_dynamic_total"].as_u64().unwrap()
            < pruned["planned_dense_total"].as_u64().unwrap()
    );

    // sweep: grid rows per block
    let sweep_args = |out_dir: &Path| {
        vec![
            "sweep".to_string(),
            "--model".into(),
            "toy-vgg".into(),
            "--data".into(),
            "synthetic".into(),
            "--seed".into(),
            "7".into(),
            "--test-n".into(),
            "60".into(),
            "--grid".into(),
            "0,0.25,0.5".into(),
            "--out".into(),
            out_dir.to_str().unwrap().into(),
        ]
    };
    run(sweep_args(&out1));
    let sweep1 = read(&out1.join("sweep.csv"));
    // header + 3 grid rows x 2 blocks
    assert_eq!(sweep1.lines().count(), 7);
    assert!(sweep1.lines().nth(1).unwrap().starts_with("0,0.0000,"));

    // compare: criteria coincide at ratio zero
    let compare_args = vec![
        "compare".to_string(),
        "--model".into(),
        "toy-vgg".into(),
        "--data".into(),
        "synthetic".into(),
        "--seed".into(),
        "7".into(),
        "--test-n".into(),
        "60".into(),
        "--grid".into(),
        "0,0.5".into(),
        "--random-seeds".into(),
        "3".into(),
        "--out".into(),
        out1.to_str().unwrap().into(),
    ];
    run(compare_args);
    let cmp1 = read(&out1.join("compare.csv"));
    assert_eq!(cmp1.lines().next().unwrap(), "ratio,attention,random_s0,random_s1,random_s2,random_mean,inverse");
    let zero_row: Vec<&str> = cmp1.lines().nth(1).unwrap().split(',').collect();
    // all criteria equal at ratio 0
    assert!(zero_row[1..].iter().all(|v| v == &zero_row[1]), "{zero_row:?}");
}
