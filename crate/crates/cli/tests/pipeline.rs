use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use propscale::datapipe::Split;
use propscale::harness::MetricsReport;
use propscale::model::{GraphContext, Mode, Model, Variant};
use propscale_cli::*;

fn micro_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.json")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_propscale"))
}

fn run_ok(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// Runs the binary expecting failure; returns the exit code and parsed error line.
fn run_err(cmd: &mut Command) -> (i32, serde_json::Value) {
    let out = cmd.output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap_or(serde_json::Value::Null))
}

fn prepared(dir: &Path) -> PathBuf {
    let cfg = resolve(Some(&micro_config()), &[], &Overrides::default()).unwrap();
    let data = dir.join("data");
    cmd_simulate(&cfg, &data).unwrap();
    cmd_prepare(&data, &cfg, &data).unwrap();
    data
}

#[test]
fn micro_pipeline_end_to_end() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = micro_config();
    let data = d.join("data");
    let sim = run_ok(bin().args(["simulate", "--out"]).arg(&data).arg("--config").arg(&cfg));
    assert!(sim["orders"].as_u64().unwrap() > 0);
    run_ok(bin().args(["prepare", "--data"]).arg(&data).arg("--config").arg(&cfg));
    let oracle = run_ok(bin().args(["oracle-check", "--data"]).arg(&data));
    assert_eq!(oracle["max_deviation"], 0.0);
    let train = d.join("train");
    let t = run_ok(bin().args(["train", "--data"]).arg(&data).arg("--config").arg(&cfg).arg("--out").arg(&train));
    assert_eq!(t["model"], "s2p+gcn");
    for f in [CHECKPOINT, HISTORY, REPORT, RESOLVED, "predictions_test.csv"] {
        assert!(train.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(train.join(HISTORY)).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);
    let eval = d.join("eval");
    let e = run_ok(
        bin()
            .args(["evaluate", "--checkpoint"])
            .arg(train.join(CHECKPOINT))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval),
    );
    let trained = MetricsReport::read(&train.join(REPORT)).unwrap();
    assert_eq!(e["splits"]["test"]["msle"].as_f64(), trained.split(Split::Test).map(|s| s.msle));
    let ablate = d.join("ablate");
    run_ok(bin().args(["ablate", "--data"]).arg(&data).arg("--config").arg(&cfg).arg("--out").arg(&ablate));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ablate.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    assert!(std::fs::read_to_string(ablate.join("ablation.md")).unwrap().contains("| s2p |"));
    assert!(t0.elapsed().as_secs() < 60, "pipeline took {:?}", t0.elapsed());
}

#[test]
fn outputs_carry_a_replayable_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let sets = vec!["train.epochs=2".to_string()];
    let flags = Overrides { mode: Some(Mode::P2P), no_gcn: true, ..Overrides::default() };
    let cfg = resolve(Some(&micro_config()), &sets, &flags).unwrap();
    let out = dir.path().join("run");
    let first = cmd_train(&data, &cfg, &out).unwrap();
    let replay = resolve(Some(&out.join(RESOLVED)), &[], &Overrides::default()).unwrap();
    assert_eq!(replay.train.mode, Mode::P2P);
    assert!(!replay.train.gcn_enabled);
    let again = cmd_train(&data, &replay, &dir.path().join("replay")).unwrap();
    assert_eq!(first.report.splits, again.report.splits);
    assert_eq!(
        std::fs::read(out.join(CHECKPOINT)).unwrap(),
        std::fs::read(dir.path().join("replay").join(CHECKPOINT)).unwrap()
    );
}

#[test]
fn untrained_checkpoint_scores_finitely() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = resolve(Some(&micro_config()), &[], &Overrides::default()).unwrap();
    let ds = propscale::datapipe::load_dataset(&data).unwrap();
    let ctx = GraphContext::from_dataset(&ds).unwrap();
    let model = Model::new(cfg.model, Variant { mode: Mode::S2P, gcn: true }, ctx.n_promoters, ctx.n_items).unwrap();
    let ckpt = dir.path().join("random.ckpt");
    model.save(&ckpt).unwrap();
    let r = cmd_evaluate(&ckpt, &data, None, &dir.path().join("eval")).unwrap();
    assert_eq!(r.splits.len(), 3);
    assert!(r.splits.iter().all(|s| s.msle.is_finite() && s.mape.is_none_or(f64::is_finite)));
    assert_eq!(r.filter.as_ref().unwrap().violations, 0);
}

#[test]
fn failures_have_distinct_codes_and_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = prepared(d);

    let (code, e) = run_err(bin().args(["train", "--data"]).arg(d.join("absent")).arg("--out").arg(d.join("o")));
    assert_eq!((code, e["error"].as_str()), (3, Some("missing_file")));

    let manifest = data.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken = d.join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("manifest.json"), text.replacen("\"schema_version\": ", "\"schema_version\": 9", 1))
        .unwrap();
    let (code, e) = run_err(bin().args(["train", "--data"]).arg(&broken).arg("--out").arg(d.join("o")));
    assert_eq!((code, e["error"].as_str()), (4, Some("schema_mismatch")));

    let (code, e) = run_err(
        bin()
            .args(["train", "--data"])
            .arg(&data)
            .args(["--set", "train.learning_rate=1e300", "--out"])
            .arg(d.join("o")),
    );
    assert_eq!((code, e["error"].as_str()), (5, Some("divergence")));

    let (code, e) =
        run_err(bin().args(["train", "--data"]).arg(&data).args(["--set", "train.nope=1", "--out"]).arg(d.join("o")));
    assert_eq!((code, e["error"].as_str()), (6, Some("invalid_config")));

    let (code, _) =
        run_err(bin().args(["train", "--data"]).arg(&data).args(["--window", "9", "--out"]).arg(d.join("o")));
    assert_eq!(code, 6);

    let orders = std::fs::read_to_string(data.join(ORDERS)).unwrap();
    let tampered = d.join("tampered");
    std::fs::create_dir_all(&tampered).unwrap();
    std::fs::copy(data.join(TRACE), tampered.join(TRACE)).unwrap();
    let mut lines: Vec<String> = orders.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["sales"] = serde_json::json!(-1.0);
    lines[0] = v.to_string();
    std::fs::write(tampered.join(ORDERS), lines.join("\n")).unwrap();
    let (code, e) = run_err(bin().args(["oracle-check", "--data"]).arg(&tampered));
    assert_eq!((code, e["error"].as_str()), (8, Some("corrupt_data")));

    // The identity holds exactly on valid logs, so only a negative tolerance trips it.
    let (code, e) = run_err(bin().args(["oracle-check", "--tol=-1", "--data"]).arg(&data));
    assert_eq!((code, e["error"].as_str()), (7, Some("oracle_violation")));

    let out = bin().args(["train", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
