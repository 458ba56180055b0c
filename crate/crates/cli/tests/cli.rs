use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsf"))
        .args(args)
        .env_remove("GSF_JOBS")
        .env_remove("RUST_LOG")
        .output()
        .expect("run gsf")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("ds");
    let o = gsf(&[
        "synth",
        "--out",
        s(&out),
        "--set",
        "scenes=8",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.csv")
}

#[test]
fn synth_then_evaluate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    let o = gsf(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--spectrum",
        "both",
        "--set",
        "k=3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("laplacian: AUROC") && stdout.contains("raw: AUROC"),
        "{stdout}"
    );
    for kind in ["raw", "laplacian"] {
        for f in ["scores", "scorecard", "roc", "pr"] {
            assert!(run.join(format!("{f}_{kind}.csv")).is_file(), "{f}_{kind}");
        }
        assert!(run.join(format!("metrics_{kind}.json")).is_file());
    }
    let scores = std::fs::read_to_string(run.join("scores_laplacian.csv")).unwrap();
    assert!(
        scores.starts_with("image_id,label,split,fused_score,decision_at_1pct,decision_at_5pct\n")
    );
    assert_eq!(scores.lines().count(), 17);
    let roc = std::fs::read_to_string(run.join("roc_raw.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n"));
    let pr = std::fs::read_to_string(run.join("pr_raw.csv")).unwrap();
    assert!(pr.starts_with("recall,precision\n"));
}

#[test]
fn empty_manifest_is_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m.csv");
    std::fs::write(&m, "image_id,label,split,path\n").unwrap();
    let o = gsf(&[
        "spectra",
        "--manifest",
        s(&m),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn corrupt_file_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let victim = tmp.path().join("ds/images/a0003/a0003__g8x8.b4.gsf");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&victim, bytes).unwrap();
    let o = gsf(&[
        "spectra",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("a0003__g8x8.b4.gsf"), "{err}");
    assert!(err.contains("spectra"), "{err}");

    // Skipping the bad image lets the rest through.
    let o = gsf(&[
        "spectra",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("o2")),
        "--continue-on-error",
    ]);
    assert!(o.status.success());
}

#[test]
fn oversized_k_fails_before_any_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let out = tmp.path().join("o");
    let o = gsf(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--set",
        "k=7",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k = 7"));
    assert!(!out.join("spectra").exists());
}

#[test]
fn bad_config_key_is_a_parameter_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "kk = 3\n").unwrap();
    let o = gsf(&["spectra", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spectra_are_resumed_from_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let out = tmp.path().join("o");
    let args = [
        "spectra",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "-v",
    ];
    let first = gsf(&args);
    assert!(String::from_utf8_lossy(&first.stderr).contains("96 computed, 0 reused"));
    let eig = out.join("spectra/f0001/g16x16.b4_lap_eigs.csv");
    let before = std::fs::read(&eig).unwrap();
    let second = gsf(&args);
    assert!(String::from_utf8_lossy(&second.stderr).contains("0 computed, 96 reused"));
    assert_eq!(before, std::fs::read(&eig).unwrap());

    // Deleting an artifact recomputes just that entry, byte for byte.
    std::fs::remove_file(&eig).unwrap();
    let third = gsf(&args);
    assert!(String::from_utf8_lossy(&third.stderr).contains("1 computed, 95 reused"));
    assert_eq!(before, std::fs::read(&eig).unwrap());
}

#[test]
fn reports_do_not_depend_on_job_count() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = tmp.path().join(format!("o{jobs}"));
        let o = Command::new(env!("CARGO_BIN_EXE_gsf"))
            .args(["evaluate", "--manifest", s(&manifest), "--out", s(&out)])
            .env("GSF_JOBS", jobs)
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(out);
    }
    for f in [
        "detection_laplacian.json",
        "metrics_laplacian.json",
        "scorecard_laplacian.csv",
        "reference.json",
        "features.csv",
    ] {
        assert_eq!(
            std::fs::read(outputs[0].join(f)).unwrap(),
            std::fs::read(outputs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ablation_grid_records_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let cfg = tmp.path().join("grid.cfg");
    std::fs::write(
        &cfg,
        "k = 1,9\nz_mode = robust,plain\nB = 20\nn_perm = 20\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = gsf(&[
        "ablate",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with(
        "spectrum,bundle,z_mode,k,weighting,auroc,ci_lo,ci_hi,auprc,tpr_at_1pct,tpr_at_5pct,mcc"
    ));
    assert!(lines[2].contains(",9,") && lines[2].contains("NA"));
    assert!(out.join("ablation_best.json").is_file());
}
