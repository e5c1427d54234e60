//! End-to-end tests of the `coldstart` binary: the full
//! generate/train/evaluate/diagnose/report pipeline on a small experiment,
//! plus the documented exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use coldstart::experiment::{DatasetSource, ExperimentSpec, Report, Technique, TechniqueSubset};
use coldstart::synthdata::GenSpec;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coldstart"));
    // keep CI deterministic on any machine
    cmd.env("COLDSTART_THREADS", "2");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn coldstart");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_genspec() -> GenSpec {
    GenSpec {
        num_queries: 40,
        items_per_query: 6,
        ..Default::default()
    }
}

fn small_experiment(dir: &Path) -> ExperimentSpec {
    ExperimentSpec {
        dataset: DatasetSource::Gen(small_genspec()),
        model_config: Default::default(),
        train_config: coldstart::objectives::TrainConfig {
            batch_size: 64,
            max_steps: Some(8),
            ..Default::default()
        },
        eval_config: Default::default(),
        technique_matrix: vec![
            TechniqueSubset {
                name: "baseline".into(),
                techniques: vec![],
            },
            TechniqueSubset {
                name: "all_three".into(),
                techniques: vec![Technique::Residual, Technique::Scorereg, Technique::Mixup],
            },
        ],
        seeds: vec![1, 2],
        output_dir: dir.join("runs"),
    }
}

fn write_spec(dir: &Path, spec: &ExperimentSpec) -> std::path::PathBuf {
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path
}

#[test]
fn generate_writes_parseable_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("genspec.json");
    std::fs::write(&spec_path, serde_json::to_string(&small_genspec()).unwrap()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = run_ok(
            bin()
                .args(["generate", "--spec"])
                .arg(&spec_path)
                .arg("--out")
                .arg(out),
        );
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(stdout.contains("train.jsonl"), "stdout: {stdout}");
        assert!(stdout.contains("instances"), "stdout: {stdout}");
    }
    for file in ["train.jsonl", "eval.jsonl"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical-seed runs");
        // metadata line parses
        let first = String::from_utf8(a)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        let meta: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(meta["m"], 3);
    }
}

#[test]
fn generate_rejects_zero_cold_fraction_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_genspec();
    spec.cold_fraction = 0.0;
    let spec_path = dir.path().join("genspec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = bin()
        .args(["generate", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cold_fraction"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_train_evaluate_diagnose_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_experiment(dir.path());
    let spec_path = write_spec(dir.path(), &spec);

    run_ok(bin().args(["train", "--spec"]).arg(&spec_path));
    // 2 subsets x 2 seeds -> 4 run directories
    for subset in ["baseline", "all_three"] {
        for seed in ["1", "2"] {
            let run = spec.output_dir.join(subset).join(seed);
            assert!(run.join("params.json").exists(), "{run:?} params");
            assert!(run.join("diagnostics.csv").exists(), "{run:?} diagnostics");
        }
    }

    // baseline diagnostics: the debias column is all zero
    let csv = std::fs::read_to_string(spec.output_dir.join("baseline/1/diagnostics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let mmd: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(mmd, 0.0, "baseline mmd column must be zero: {line}");
    }

    run_ok(bin().args(["evaluate", "--spec"]).arg(&spec_path));
    assert!(spec.output_dir.join("baseline/1/metrics.json").exists());

    run_ok(bin().args(["diagnose", "--spec"]).arg(&spec_path));
    for file in [
        "ablation_deltas.csv",
        "grad_ratio.csv",
        "score_gaps.csv",
        "pca_spectrum.csv",
    ] {
        assert!(
            spec.output_dir.join("all_three/2").join(file).exists(),
            "missing {file}"
        );
    }

    run_ok(bin().args(["report", "--spec"]).arg(&spec_path));
    let report: Report = serde_json::from_str(
        &std::fs::read_to_string(spec.output_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.baseline_subset, "baseline");
    assert!(report.missing.is_empty());
    let baseline = report
        .subsets
        .iter()
        .find(|s| s.name == "baseline")
        .unwrap();
    assert_eq!(baseline.lifts_vs_baseline.hits_at_k_cold_pct, Some(0.0));
    assert!(spec.output_dir.join("report.csv").exists());
}

#[test]
fn train_with_unknown_subset_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_experiment(dir.path());
    let spec_path = write_spec(dir.path(), &spec);
    let out = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .args(["--subset", "warmup"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
}

#[test]
fn unknown_technique_in_spec_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_experiment(dir.path());
    let mut value: serde_json::Value = serde_json::to_value(&spec).unwrap();
    value["technique_matrix"][1]["techniques"][0] = "warmup".into();
    let spec_path = dir.path().join("experiment.json");
    std::fs::write(&spec_path, serde_json::to_string(&value).unwrap()).unwrap();
    let out = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warmup"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_experiment(dir.path());
    let mut value: serde_json::Value = serde_json::to_value(&spec).unwrap();
    value["train_config"]["lambda_mixx"] = 0.5.into();
    let spec_path = dir.path().join("experiment.json");
    std::fs::write(&spec_path, serde_json::to_string(&value).unwrap()).unwrap();
    let out = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda_mixx"), "stderr: {stderr}");
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_experiment(dir.path());
    spec.train_config.learning_rate = 1e160;
    spec.train_config.max_steps = Some(60);
    spec.seeds = vec![1];
    spec.technique_matrix.truncate(1);
    let spec_path = write_spec(dir.path(), &spec);
    let out = bin()
        .args(["train", "--spec"])
        .arg(&spec_path)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn report_with_missing_runs_is_partial_with_explicit_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_experiment(dir.path());
    let spec_path = write_spec(dir.path(), &spec);
    run_ok(
        bin()
            .args(["train", "--spec"])
            .arg(&spec_path)
            .args(["--subset", "baseline"]),
    );
    run_ok(bin().args(["report", "--spec"]).arg(&spec_path));
    let report: Report = serde_json::from_str(
        &std::fs::read_to_string(spec.output_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.missing.len(), 2);
    assert!(report.missing.iter().all(|m| m.subset == "all_three"));
}

#[test]
fn shipped_experiment_config_matches_code_defaults() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let configs = manifest.parent().unwrap().parent().unwrap().join("configs");
    let text = std::fs::read_to_string(configs.join("experiment.json")).unwrap();
    let parsed: ExperimentSpec = serde_json::from_str(&text).unwrap();
    let expected = coldstart::experiment::default_experiment("runs/default".into());
    assert_eq!(parsed, expected);
    assert_eq!(parsed.technique_matrix.len(), 9);
    assert_eq!(parsed.seeds.len(), 5);

    let gen_text = std::fs::read_to_string(configs.join("genspec.json")).unwrap();
    let gen: GenSpec = serde_json::from_str(&gen_text).unwrap();
    assert_eq!(gen, GenSpec::default());
}
