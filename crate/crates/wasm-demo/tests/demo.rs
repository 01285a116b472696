use ctask_core::network::{ModelBundle, ModelConfig, Variant};
use ctask_wasm_demo::{task_legend, Demo};

const S: usize = 64;

fn demo() -> Demo {
    Demo::new(3, S).unwrap()
}

#[test]
fn renders_have_one_rgba_pixel_per_cell() {
    let mut d = demo();
    assert!(d.prediction_rgba().is_empty());
    d.predict().unwrap();
    for img in [d.image_rgba(), d.palette_rgba(), d.target_rgba(), d.prediction_rgba()] {
        assert_eq!(img.len(), S * S * 4);
        assert!(img.chunks_exact(4).all(|p| p[3] == 255));
    }
}

#[test]
fn every_rule_yields_a_valid_palette() {
    let mut d = demo();
    for rule in ["s:normals", "r1r", "r2", "r3", "rnd"] {
        d.set_rule(rule, 5).unwrap();
        d.predict().unwrap();
    }
    assert!(d.set_rule("r9", 0).is_err());
}

#[test]
fn painting_changes_only_the_brush_disc() {
    let mut d = demo();
    d.set_rule("s:edges", 0).unwrap();
    let before = d.palette_rgba();
    d.paint(10.0, 10.0, 3.0, "saliency").unwrap();
    let after = d.palette_rgba();
    for y in 0..S {
        for x in 0..S {
            let i = (y * S + x) * 4;
            let (dx, dy) = (x as f64 + 0.5 - 10.0, y as f64 + 0.5 - 10.0);
            let inside = dx * dx + dy * dy <= 9.0;
            assert_eq!(before[i..i + 4] != after[i..i + 4], inside, "({x}, {y})");
        }
    }
    let probe: serde_json::Value = serde_json::from_str(&d.probe(10, 10).unwrap()).unwrap();
    assert_eq!(probe["task"], "saliency");
    assert!(probe["predicted"].is_null());
    assert!(d.paint(0.0, 0.0, 1.0, "depth").is_err());
}

#[test]
fn probe_reports_prediction_after_run() {
    let mut d = demo();
    d.set_rule("s:semseg", 0).unwrap();
    d.predict().unwrap();
    let v: serde_json::Value = serde_json::from_str(&d.probe(5, 7).unwrap()).unwrap();
    assert_eq!((v["x"].as_u64(), v["y"].as_u64()), (Some(5), Some(7)));
    assert!(v["predicted"].is_string());
    assert!(d.probe(S, 0).is_err());
}

#[test]
fn prediction_is_deterministic_and_scene_dependent() {
    let mut d = demo();
    d.set_rule("r1r", 2).unwrap();
    d.predict().unwrap();
    let first = d.prediction_rgba();
    d.predict().unwrap();
    assert_eq!(d.prediction_rgba(), first);
    d.set_scene(4).unwrap();
    assert!(d.prediction_rgba().is_empty(), "a new scene clears the stale prediction");
    d.predict().unwrap();
    assert_ne!(d.prediction_rgba(), first);
}

#[test]
fn checkpoint_loading_restricts_tasks() {
    let mut d = demo();
    d.set_rule("rnd", 1).unwrap();
    let mut cfg = ModelConfig::tiny(Variant::Ctn, 2);
    cfg.height = S;
    cfg.width = S;
    let b = ModelBundle::init(cfg, 9).unwrap();
    d.load_checkpoint(&b.sidecar_json(), &b.to_archive_bytes().unwrap()).unwrap();
    assert_eq!(d.tasks(), 2);
    d.predict().unwrap();
    assert!(d.paint(1.0, 1.0, 2.0, "normals").is_err());

    let p = ModelBundle::init(ModelConfig::tiny(Variant::PalettePredictor, 5), 0).unwrap();
    assert!(d.load_checkpoint(&p.sidecar_json(), &p.to_archive_bytes().unwrap()).is_err());
    assert!(d.load_checkpoint("{}", b"").is_err());
}

#[test]
fn legend_lists_all_tasks() {
    let v: Vec<serde_json::Value> = serde_json::from_str(&task_legend()).unwrap();
    assert_eq!(v.len(), 5);
    assert_eq!(v[1]["name"], "semseg");
}

#[test]
fn sizes_must_be_multiples_of_32() {
    assert!(Demo::new(0, 48).is_err());
}
