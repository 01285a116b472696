use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctask_core::metrics::MetricsReport;
use ctask_core::network::{ModelBundle, ModelConfig, Variant};
use ctask_core::synth::generate_scene;
use ctask_core::{cttn, imageio, Task, TaskPalette};

fn ctask(args: &[&str], home: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctask"))
        .args(args)
        .env("CT_HOME", home)
        .output()
        .expect("spawn ctask")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tiny_checkpoint(dir: &Path, variant: Variant) -> PathBuf {
    let path = dir.join(format!("{variant:?}.ctta"));
    ModelBundle::init(ModelConfig::tiny(variant, 5), 3).unwrap().save(&path).unwrap();
    path
}

fn scene_png(dir: &Path) -> PathBuf {
    let s = generate_scene(11, 32, 32).unwrap();
    let path = dir.join("image.png");
    std::fs::write(&path, imageio::encode_rgb(32, 32, &imageio::tensor_to_rgb(&s.image)).unwrap()).unwrap();
    path
}

#[test]
fn params_are_ordered_ctn_mhn_stn() {
    let home = tempfile::tempdir().unwrap();
    let out = ok(&ctask(&["params", "--k", "5", "--json"], home.path()));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    let total = |name: &str| {
        rows.iter()
            .find(|r| r["variant"] == name)
            .unwrap_or_else(|| panic!("{name} missing"))["total"]
            .as_u64()
            .unwrap()
    };
    assert!(total("ctn") < total("mhn"));
    assert!(total("mhn") < total("stn"));
    let text = ok(&ctask(&["params", "--k", "5"], home.path()));
    assert!(text.lines().next().unwrap().starts_with("variant"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn palette_s_is_constant() {
    let home = tempfile::tempdir().unwrap();
    let o = ctask(&["palette", "--rule", "s", "--task", "3", "--size", "64"], home.path());
    assert!(o.status.success());
    let p = TaskPalette::from_png(&o.stdout).unwrap();
    assert_eq!((p.h, p.w), (64, 64));
    assert!(p.cells.iter().all(|&c| c == 3));
}

#[test]
fn palette_generate_and_validate() {
    let home = tempfile::tempdir().unwrap();
    let file = home.path().join("r2.png");
    let f = file.to_str().unwrap();
    ok(&ctask(&["palette", "generate", "--rule", "r2", "--scene-seed", "4", "--size", "32", "--out", f], home.path()));
    let report: serde_json::Value = serde_json::from_str(&ok(&ctask(&["palette", "validate", f], home.path()))).unwrap();
    let counted: u64 = report["histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counted, 32 * 32);

    let bad = home.path().join("bad.png");
    std::fs::write(&bad, TaskPalette::from_cells(4, 4, vec![7; 16]).unwrap().to_png().unwrap()).unwrap();
    let o = ctask(&["palette", "validate", bad.to_str().unwrap()], home.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("16 cells"));
}

#[test]
fn exit_codes() {
    let home = tempfile::tempdir().unwrap();
    assert_eq!(ctask(&["--help"], home.path()).status.code(), Some(0));
    assert_eq!(ctask(&["bogus"], home.path()).status.code(), Some(2));
    assert_eq!(ctask(&["palette", "--task", "9"], home.path()).status.code(), Some(2));
    assert_eq!(ctask(&["palette", "--rule", "r2"], home.path()).status.code(), Some(2));
    assert_eq!(ctask(&["train", "--variant", "palette_predictor", "--rule", "r1r"], home.path()).status.code(), Some(2));
    let o = ctask(&["eval", "--checkpoint", "missing.ctta"], home.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ctta"));
}

#[test]
fn train_then_eval_under_ct_home() {
    let home = tempfile::tempdir().unwrap();
    let cfg = home.path().join("cfg.json");
    let model = serde_json::to_value(ModelConfig::tiny(Variant::Ctn, 5)).unwrap();
    std::fs::write(&cfg, serde_json::json!({ "model": model, "train": { "batch_size": 2 } }).to_string()).unwrap();
    let out = ok(&ctask(
        &["train", "--config", cfg.to_str().unwrap(), "--rule", "r1r", "--epochs", "2", "--scenes", "2"],
        home.path(),
    ));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert!(home.path().join("checkpoints/ctn.ctta").exists());

    let report_path = home.path().join("report.json");
    let rp = report_path.to_str().unwrap();
    ok(&ctask(&["eval", "--checkpoint", "ctn.ctta", "--scenes", "2", "--out", rp], home.path()));
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.tasks.len(), 5);
    let mut base = MetricsReport::default();
    for t in Task::ALL {
        base.insert(t, 0.5);
    }
    let base_path = home.path().join("base.json");
    std::fs::write(&base_path, base.to_json()).unwrap();
    let again = ok(&ctask(
        &["eval", "--checkpoint", "ctn.ctta", "--scenes", "2", "--baseline", base_path.to_str().unwrap()],
        home.path(),
    ));
    let with_delta: MetricsReport = serde_json::from_str(&again).unwrap();
    let expected = report.delta_vs(&base).unwrap();
    assert!((with_delta.delta_m_pct.unwrap() - expected).abs() < 1e-9);

    let resumed = ok(&ctask(&["train", "--resume", "ctn.ctta", "--epochs", "3"], home.path()));
    let summary: serde_json::Value = serde_json::from_str(&resumed).unwrap();
    assert_eq!(summary["epochs"], 3);
}

#[test]
fn finetune_reports_before_and_after() {
    let home = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(home.path(), Variant::Ctn);
    let out = ok(&ctask(
        &["finetune", "--checkpoint", ckpt.to_str().unwrap(), "--rule", "r3", "--epochs", "1", "--scenes", "2", "--eval-scenes", "2"],
        home.path(),
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["before_loss"].as_f64().unwrap().is_finite());
    assert!(v["after_loss"].as_f64().unwrap().is_finite());
    assert!(ckpt.with_extension("ft.ctta").exists());
}

#[test]
fn predict_writes_renders() {
    let home = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(home.path(), Variant::Ctn);
    let image = scene_png(home.path());
    let out_dir = home.path().join("pred");
    ok(&ctask(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--task",
            "normals",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        home.path(),
    ));
    let raw = std::fs::read(out_dir.join("raw.cttn")).unwrap();
    let (dims, data) = cttn::read_raw(&mut &raw[..]).unwrap();
    assert_eq!(dims, vec![3, 32, 32]);
    assert!(data.iter().all(|v| v.is_finite()));
    let palette = TaskPalette::from_png(&std::fs::read(out_dir.join("palette.png")).unwrap()).unwrap();
    assert_eq!(palette, TaskPalette::uniform(32, 32, Task::Normals.id()));
    for t in ["semseg", "normals", "edges", "saliency", "parts"] {
        assert!(out_dir.join(format!("overlay_{t}.png")).exists(), "{t}");
    }

    let o = ctask(
        &["predict", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--auto"],
        home.path(),
    );
    assert_eq!(o.status.code(), Some(2), "--auto without --predictor is a usage error");
}

#[test]
fn data_writes_manifest() {
    let home = tempfile::tempdir().unwrap();
    ok(&ctask(&["data", "--count", "2", "--size", "32"], home.path()));
    let dir = home.path().join("data");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let scenes = m["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 2);
    for f in scenes.iter().flat_map(|s| s.as_array().unwrap()) {
        assert!(dir.join(f.as_str().unwrap()).exists());
    }
    let (w, h, _) = imageio::decode_gray(&std::fs::read(dir.join("scene0000_semseg.png")).unwrap()).unwrap();
    assert_eq!((w, h), (32, 32));
    for kind in ["edges", "saliency"] {
        let (_, _, v) = imageio::decode_gray(&std::fs::read(dir.join(format!("scene0001_{kind}.png"))).unwrap()).unwrap();
        assert!(v.iter().all(|&x| x <= 1 || x == m["ignore"]), "{kind}: binary labels are 0/1, 255 is ignore");
        assert!(v.contains(&1), "{kind}");
    }
}
