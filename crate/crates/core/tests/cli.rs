use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclemorph::cli::{eval_report, load_trained, RunManifest, MANIFEST_FILE};
use cyclemorph::metrics::{dice, evaluate, nmse, ssim, tre, EvalReport, GroundTruth};
use cyclemorph::synthbench::{load_pair, BenchManifest};
use cyclemorph::trainer::{CycleModel, StepRecord};
use cyclemorph::warp::{DisplacementField, Image};

const TINY_NET: &str = r#""net": {"enc": [4, 4], "dec": [4, 4, 4], "kernel": 3}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclemorph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run cyclemorph")
}

fn ok(args: &[&str]) {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn synth(dir: &Path, body: &str) -> PathBuf {
    let cfg = write(dir, "synth.json", body);
    let out = dir.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn small_bench(dir: &Path) -> PathBuf {
    synth(dir, r#"{"lattice": [16, 16], "pairs": 2, "amplitude": 1.5, "sigma": 4.0, "seed": 3}"#)
}

fn train_cfg(dir: &Path, name: &str, extra: &str) -> PathBuf {
    write(dir, name, &format!(r#"{{"train": {{"epochs": 1, {TINY_NET}{extra}}}}}"#))
}

fn read_log(path: &Path) -> Vec<StepRecord> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"lattice": [16, 16], "pairs": 2, "seed": 9, "amplitude": 1.0, "sigma": 4.0}"#);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert!(a.join("pairs/0000/moving.dtf").exists());
    assert!(a.join("pairs/0001/fixed.dtf").exists());
    assert!(!a.join("pairs/0002").exists());
    let ma = RunManifest::load(&a.join(MANIFEST_FILE)).unwrap();
    let mb = RunManifest::load(&b.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.command, "synth");
    assert_eq!(ma.seeds, vec![9]);
    let bench: BenchManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(bench.config.pairs, 2);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"lattice": [16, 16], "pairs": 1, "amplitude": 1.0, "sigma": 4.0}"#);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a), "--seed", "1"]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b), "--seed", "2"]);
    let ma = RunManifest::load(&a.join(MANIFEST_FILE)).unwrap();
    let mb = RunManifest::load(&b.join(MANIFEST_FILE)).unwrap();
    assert_ne!(ma.artifacts["pairs/0000/moving.dtf"], mb.artifacts["pairs/0000/moving.dtf"]);
}

#[test]
fn impossible_amplitude_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"lattice": [16, 16], "pairs": 1, "amplitude": 40.0, "sigma": 1.0, "max_retries": 2}"#,
    );
    let out = bin(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("amplitude"));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    for (body, field) in [
        (r#"{"pairs": 0}"#, "pairs"),
        (r#"{"sigma": -1}"#, "sigma"),
        (r#"{"amplitud": 3}"#, "amplitud"),
        (r#"{"lattice": "big"}"#, "lattice"),
    ] {
        let cfg = write(tmp.path(), "c.json", body);
        let out = bin(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
        assert_eq!(out.status.code(), Some(1), "{body}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(field), "{body}: {err}");
    }
    let cfg = write(tmp.path(), "t.json", r#"{"train": {"lr": -1}}"#);
    let out = bin(&["train", "--config", s(&cfg), "--data", "x", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(bin(&["synth"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_cyclemorph"))
        .args(["synth", "--config", "/nonexistent.json", "--out", "/tmp/x"])
        .env("CYCLEMORPH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CYCLEMORPH_THREADS"));
}

#[test]
fn train_smoke_writes_checkpoint_log_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let cfg = train_cfg(tmp.path(), "t.json", "");
    let out = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(out.join("global.cmk").exists());
    let log = read_log(&out.join("train_log.jsonl"));
    assert_eq!(log.len(), 2);
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert!(m.artifacts.contains_key("global.cmk"));
    assert_eq!(m.input_checksums.len(), 4);
    assert!(load_trained(&out).unwrap().local.is_none());
}

#[test]
fn alpha_zero_records_cycle_but_weights_it_out() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let cfg = train_cfg(tmp.path(), "t.json", r#", "hp": {"alpha": 0.0, "beta": 0.5}"#);
    let out = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let text = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert!(text.contains("\"L_cycle\""));
    for r in read_log(&out.join("train_log.jsonl")) {
        let l = r.losses;
        assert!(l.cycle > 0.0);
        let expect = l.regist_xy + l.regist_yx + 0.5 * l.identity;
        assert!((l.total - expect).abs() < 1e-5 * expect.abs().max(1.0), "{l:?}");
    }
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let two = write(tmp.path(), "two.json", &format!(r#"{{"train": {{"epochs": 2, "seed": 4, {TINY_NET}}}}}"#));
    let one = write(tmp.path(), "one.json", &format!(r#"{{"train": {{"epochs": 1, "seed": 4, {TINY_NET}}}}}"#));
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    ok(&["train", "--config", s(&two), "--data", s(&data), "--out", s(&full)]);
    ok(&["train", "--config", s(&one), "--data", s(&data), "--out", s(&part)]);
    let ckpt = part.join("global.cmk");
    let saved = tmp.path().join("after_one.cmk");
    fs::copy(&ckpt, &saved).unwrap();
    ok(&["train", "--config", s(&two), "--data", s(&data), "--out", s(&part), "--resume", s(&saved)]);
    assert_eq!(fs::read(full.join("global.cmk")).unwrap(), fs::read(part.join("global.cmk")).unwrap());
    let a = fs::read_to_string(full.join("train_log.jsonl")).unwrap();
    let b = fs::read_to_string(part.join("train_log.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incompatible_lattice_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), r#"{"lattice": [18, 18], "pairs": 1, "amplitude": 1.0, "sigma": 4.0}"#);
    let cfg = train_cfg(tmp.path(), "t.json", "");
    let out = tmp.path().join("model");
    let res = bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("divisible"));
    assert!(!out.join("global.cmk").exists());
}

fn zero_flow_model(dir: &Path) -> PathBuf {
    let data = small_bench(dir);
    let cfg = train_cfg(dir, "t.json", r#", "lr": 0.0"#);
    let out = dir.join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let models = load_trained(&out).unwrap();
    let net = models.run.train.train.net.clone();
    let entries = models
        .global
        .to_entries()
        .into_iter()
        .map(|(k, t)| {
            let t = if k.contains("flow.") { t.map(|_| 0.0) } else { t };
            (k, t)
        })
        .collect();
    CycleModel::from_entries(&net, entries).unwrap().save(out.join("global.cmk")).unwrap();
    out
}

#[test]
fn zero_field_checkpoint_returns_moving_image() {
    let tmp = tempfile::tempdir().unwrap();
    let model = zero_flow_model(tmp.path());
    let pair = tmp.path().join("data/pairs/0000");
    let reg = tmp.path().join("reg");
    ok(&[
        "register", "--checkpoints", s(&model), "--moving", s(&pair.join("moving.dtf")),
        "--fixed", s(&pair.join("fixed.dtf")), "--out", s(&reg),
    ]);
    let moving = Image::load(pair.join("moving.dtf")).unwrap();
    let deformed = Image::load(reg.join("deformed.dtf")).unwrap();
    let phi = DisplacementField::load(reg.join("phi_final.dtf")).unwrap();
    assert_eq!(phi.lattice(), moving.lattice());
    assert_eq!(phi.mean_magnitude(), 0.0);
    for (a, b) in deformed.channel(0).iter().zip(moving.channel(0)) {
        assert!((a - b).abs() <= 1e-6);
    }

    // a zero-field registration scores exactly the pair's initial baselines
    let (m, f, truth) = load_pair(&pair).unwrap();
    let report = eval_report(&reg, &pair, None).unwrap();
    let g = truth.as_ground_truth();
    assert!((report.nmse - nmse(&m, &f).unwrap()).abs() <= 1e-9);
    assert!((report.ssim - ssim(&m, &f).unwrap()).abs() <= 1e-9);
    let d0 = dice(g.labels_moving.unwrap(), g.labels_fixed.unwrap(), None).unwrap();
    assert_eq!(report.dice_mean, d0.mean);
    let t0 = tre(g.landmarks_fixed.unwrap(), g.landmarks_moving.unwrap(), &[1.0, 1.0]).unwrap();
    assert!((report.tre.unwrap() - t0).abs() <= 1e-9);
    assert!((report.endpoint_error.unwrap() - g.phi_true.unwrap().mean_magnitude()).abs() <= 1e-6);
    assert_eq!(report.folding_pct, 0.0);
}

#[test]
fn register_rejects_mismatched_lattices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let other = tmp.path().join("other");
    fs::create_dir(&other).unwrap();
    let other_data = synth(&other, r#"{"lattice": [32, 32], "pairs": 1, "amplitude": 1.0, "sigma": 4.0}"#);
    let cfg = train_cfg(tmp.path(), "t.json", "");
    let model = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    let out = bin(&[
        "register", "--checkpoints", s(&model),
        "--moving", s(&data.join("pairs/0000/moving.dtf")),
        "--fixed", s(&other_data.join("pairs/0000/fixed.dtf")),
        "--out", s(&tmp.path().join("reg")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lattice"));
}

#[test]
fn eval_of_perfect_registration_and_missing_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let pair = data.join("pairs/0001");
    let reg = tmp.path().join("reg");
    fs::create_dir(&reg).unwrap();
    fs::copy(pair.join("fixed.dtf"), reg.join("deformed.dtf")).unwrap();
    DisplacementField::zeros(&[16, 16]).save(reg.join("phi_final.dtf")).unwrap();
    let out = tmp.path().join("eval");
    ok(&["eval", "--registration", s(&reg), "--data", s(&pair), "--out", s(&out), "--plots"]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report.nmse, 0.0);
    assert!((report.ssim - 1.0).abs() < 1e-12);
    assert!(report.reverse_nmse.is_none());
    assert!(out.join("difference.png").exists());
    assert!(out.join("field.png").exists());
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert!(!m.artifacts.contains_key("difference.png"));

    fs::remove_file(pair.join("phi_true.dtf")).unwrap();
    for f in fs::read_dir(&pair).unwrap() {
        let p = f.unwrap().path();
        if p.file_name().unwrap().to_string_lossy().starts_with("landmarks_") {
            fs::remove_file(p).unwrap();
        }
    }
    let report = eval_report(&reg, &pair, None).unwrap();
    assert!(report.endpoint_error.is_none());
    assert!(report.tre.is_none());
    assert!(report.dice_mean.is_some());
}

#[test]
fn eval_report_matches_direct_metric_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    let cfg = train_cfg(tmp.path(), "t.json", r#", "lr": 0.01"#);
    let model = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    let pair = data.join("pairs/0000");
    let reg = tmp.path().join("reg");
    ok(&[
        "register", "--checkpoints", s(&model), "--moving", s(&pair.join("moving.dtf")),
        "--fixed", s(&pair.join("fixed.dtf")), "--out", s(&reg),
    ]);
    let out = tmp.path().join("eval");
    ok(&["eval", "--registration", s(&reg), "--data", s(&pair), "--out", s(&out), "--checkpoints", s(&model)]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();

    let (m, f, truth) = load_pair(&pair).unwrap();
    let deformed = Image::load(reg.join("deformed.dtf")).unwrap();
    let phi = DisplacementField::load(reg.join("phi_final.dtf")).unwrap();
    let direct = evaluate(&m, &f, &deformed, &phi, &truth.as_ground_truth()).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    assert!(close(report.nmse, direct.nmse));
    assert!(close(report.ssim, direct.ssim));
    assert!(close(report.folding_pct, direct.folding_pct));
    assert!(close(report.tre.unwrap(), direct.tre.unwrap()));
    assert!(close(report.dice_mean.unwrap(), direct.dice_mean.unwrap()));
    assert!(close(report.endpoint_error.unwrap(), direct.endpoint_error.unwrap()));
    assert!(close(report.mean_displacement, direct.mean_displacement));
    let models = load_trained(&model).unwrap();
    let (rn, rs) = cyclemorph::metrics::reverse_consistency(&models.global.gx, &models.global.gy, &m, &f).unwrap();
    assert!(close(report.reverse_nmse.unwrap(), rn));
    assert!(close(report.reverse_ssim.unwrap(), rs));
    assert!(report.runtime_seconds.unwrap() >= 0.0);
    let _ = GroundTruth::default();
}

#[test]
fn multiscale_train_and_register() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), r#"{"lattice": [32, 32], "pairs": 2, "amplitude": 2.0, "sigma": 6.0, "seed": 8}"#);
    let cfg = write(
        tmp.path(),
        "t.json",
        &format!(
            r#"{{"train": {{"epochs": 1, {TINY_NET}}}, "multiscale": {{"factors": [2, 2], "patch": 16}}, "patches_per_pair": 2}}"#
        ),
    );
    let model = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model), "--multiscale"]);
    assert!(model.join("global.cmk").exists());
    assert!(model.join("local.cmk").exists());
    assert!(model.join("train_log_local.jsonl").exists());
    let pair = data.join("pairs/0000");
    let (mv, fx) = (pair.join("moving.dtf"), pair.join("fixed.dtf"));
    for (dir, extra) in [("ms", None), ("ms_sum", Some("--plain-sum-fusion"))] {
        let reg = tmp.path().join(dir);
        let mut args = vec![
            "register", "--checkpoints", s(&model), "--moving", s(&mv),
            "--fixed", s(&fx), "--out", s(&reg), "--multiscale",
        ];
        args.extend(extra);
        ok(&args);
        for f in ["deformed.dtf", "phi_final.dtf", "phi_global.dtf", "phi_local.dtf"] {
            assert!(reg.join(f).exists(), "{f}");
        }
        let phi = DisplacementField::load(reg.join("phi_final.dtf")).unwrap();
        assert_eq!(phi.lattice(), &[32, 32]);
    }
    let out = bin(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model), "--multiscale",
        "--resume", s(&model.join("global.cmk")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replay_reproduces_synth_and_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_bench(tmp.path());
    ok(&["replay", "--manifest", s(&data.join(MANIFEST_FILE))]);
    let cfg = train_cfg(tmp.path(), "t.json", "");
    let model = tmp.path().join("model");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model), "--seed", "77"]);
    let before = RunManifest::load(&model.join(MANIFEST_FILE)).unwrap();
    // the config file changing afterwards must not matter
    fs::write(&cfg, "{}").unwrap();
    ok(&["replay", "--manifest", s(&model.join(MANIFEST_FILE))]);
    let after = RunManifest::load(&model.join(MANIFEST_FILE)).unwrap();
    assert_eq!(before.artifacts, after.artifacts);
    assert_eq!(after.seeds, vec![77]);
}
