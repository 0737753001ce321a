use std::path::Path;
use std::process::{Command, Output};

use secos_core::adapter_net::checkpoint;
use secos_core::experiment::{run_synthetic, ExperimentConfig};

const TINY: &str = r#"seed = 3

[data]
classes = 4
samples_per_class = 24
ratio_labeled = 0.25

[encoder]
dim = 12
backbone_width = 10
backbone_mlp_hidden = 16
reference_fit_samples = 256

[adapter]
rank = 3

[train]
epochs = 2
batch_size = 8
"#;

fn secos(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_secos"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env_remove("SECOS_OUT")
        .output()
        .expect("spawn secos")
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "secos failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn err(o: Output) -> String {
    assert!(!o.status.success(), "secos unexpectedly succeeded");
    String::from_utf8(o.stderr).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const ARTIFACTS: [&str; 13] = [
    "config.toml",
    "manifest.json",
    "split.json",
    "prompts.json",
    "class_embeddings.bin",
    "dn.jsonl",
    "dn_diagnostics.json",
    "bwsr_debug.jsonl",
    "checkpoint.bin",
    "train_log.jsonl",
    "eval_report.json",
    "report.md",
    "summary.csv",
];

#[test]
fn staged_pipeline_writes_every_artifact_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    for stage in ["split", "pseudo-global", "pseudo-batch", "train", "eval", "report"] {
        ok(secos(tmp.path(), &["--out", o, stage]));
    }
    for f in ARTIFACTS {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let first: Vec<Vec<u8>> = ARTIFACTS.iter().map(|f| read(out.join(f))).collect();
    ok(secos(tmp.path(), &["--out", o, "run"]));
    for (f, bytes) in ARTIFACTS.iter().zip(&first) {
        assert_eq!(&read(out.join(f)), bytes, "{f} changed on rerun");
    }
}

#[test]
fn missing_upstream_artifacts_name_the_producing_command() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("out");
    let o = o.to_str().unwrap();
    let e = err(secos(tmp.path(), &["--out", o, "eval"]));
    assert!(e.contains("secos train"), "{e}");
    let e = err(secos(tmp.path(), &["--out", o, "train"]));
    assert!(e.contains("secos split"), "{e}");
    let e = err(secos(tmp.path(), &["--out", o, "report"]));
    assert!(e.contains("secos eval"), "{e}");
    ok(secos(tmp.path(), &["--out", o, "split"]));
    let e = err(secos(tmp.path(), &["--out", o, "train"]));
    assert!(e.contains("secos pseudo-global"), "{e}");
}

#[test]
fn stale_split_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("out");
    let o = o.to_str().unwrap();
    ok(secos(tmp.path(), &["--out", o, "split"]));
    let e = err(secos(tmp.path(), &["--out", o, "--seed", "4", "pseudo-global"]));
    assert!(e.contains("re-run `secos split`"), "{e}");
}

#[test]
fn config_errors_point_at_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[train]\nepochs = \"ten\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_secos")).arg("--config").arg(&bad).arg("config").output().unwrap();
    let e = err(o);
    assert!(e.contains("line 3"), "{e}");

    let e = err(secos(tmp.path(), &["--override", "train.phi=0", "config"]));
    assert!(e.contains("phi"), "{e}");
    let e = err(secos(tmp.path(), &["--preset", "nope", "config"]));
    assert!(e.contains("nope"), "{e}");
}

#[test]
fn overrides_and_seed_reach_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(secos(tmp.path(), &["--seed", "9", "--override", "train.phi=25", "config"]));
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.phi, 25.0);
    assert_eq!(cfg.data.classes, 4);
}

#[test]
fn phi_sweep_reports_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(secos(tmp.path(), &["--out", out.to_str().unwrap(), "--preset", "phi-sweep", "run"]));
    let md = String::from_utf8(read(out.join("report.md"))).unwrap();
    for phi in ["10", "25", "50", "75", "90"] {
        assert!(md.contains(&format!("\n| {phi} |")), "no row for phi {phi}:\n{md}");
    }
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let svg = String::from_utf8(read(out.join("accuracy_vs_phi.svg"))).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    assert!(out.join("precision_vs_phi.svg").is_file());
    // Larger phi keeps more global pseudo labels.
    let sizes: Vec<usize> = ["10", "50", "90"]
        .iter()
        .map(|p| String::from_utf8(read(out.join("runs").join(format!("phi-{p}")).join("dn.jsonl"))).unwrap().lines().count())
        .collect();
    assert!(sizes[0] < sizes[1] && sizes[1] < sizes[2], "{sizes:?}");
}

#[test]
fn ablation_report_has_a_row_per_stage_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(secos(tmp.path(), &["--out", out.to_str().unwrap(), "--preset", "ablation", "run"]));
    let md = String::from_utf8(read(out.join("report.md"))).unwrap();
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| N |")).collect();
    assert_eq!(rows.len(), 4, "{md}");
    assert!(rows[0].starts_with("|  |  |"), "{}", rows[0]);
    assert!(rows[3].starts_with("| ✓ | ✓ |"), "{}", rows[3]);
}

#[test]
fn cli_checkpoint_matches_library_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(secos(tmp.path(), &["--out", out.to_str().unwrap(), "run"]));
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let lib = run_synthetic(&cfg).unwrap();
    assert_eq!(read(out.join("checkpoint.bin")), checkpoint::to_bytes(&lib.outcome.params).unwrap());
}
