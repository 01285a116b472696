//! In-page composite prediction: a synthetic scene, an editable task palette
//! and a small conditioned network, all driven from JavaScript.

use wasm_bindgen::prelude::*;

use ctask_core::heads::{decode_class, normal_vector, AnchorTable};
use ctask_core::network::{ModelBundle, ModelConfig, Variant};
use ctask_core::palette::{gen_palette_seeded, validate_palette, Rule};
use ctask_core::render::{self, TASK_COLORS};
use ctask_core::synth::{generate_scene, SyntheticScene};
use ctask_core::{heads, Task, TaskPalette, Tensor};

/// Pixels without a label for their task.
const UNLABELLED: [u8; 3] = [40, 40, 40];

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn parse_task(name: &str) -> Result<Task, String> {
    name.parse::<Task>().map_err(msg)
}

#[wasm_bindgen]
pub struct Demo {
    size: usize,
    scene_seed: u32,
    scene: SyntheticScene,
    palette: TaskPalette,
    bundle: ModelBundle,
    output: Option<Tensor<f32>>,
}

#[wasm_bindgen]
impl Demo {
    /// A `size`×`size` scene with a freshly initialized tiny network.
    #[wasm_bindgen(constructor)]
    pub fn new(scene_seed: u32, size: usize) -> Result<Demo, String> {
        let scene = generate_scene(scene_seed as u64, size, size).map_err(msg)?;
        let mut config = ModelConfig::tiny(Variant::Ctn, Task::ALL.len());
        config.height = size;
        config.width = size;
        let bundle = ModelBundle::init(config, 0).map_err(msg)?;
        Ok(Demo {
            size,
            scene_seed,
            palette: TaskPalette::uniform(size, size, Task::SemSeg.id()),
            scene,
            bundle,
            output: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of tasks the loaded network was trained for.
    pub fn tasks(&self) -> usize {
        self.bundle.config.k
    }

    pub fn set_scene(&mut self, seed: u32) -> Result<(), String> {
        self.scene = generate_scene(seed as u64, self.size, self.size).map_err(msg)?;
        self.scene_seed = seed;
        self.output = None;
        Ok(())
    }

    /// Regenerates the palette with a rule name (`s:<task>`, `r1r`, `r2`, `r3`, `rnd`).
    pub fn set_rule(&mut self, rule: &str, seed: u32) -> Result<(), String> {
        let rule = Rule::parse(rule, None).map_err(msg)?;
        let semantics = rule.needs_semantics().then_some(&self.scene.semantic[..]);
        self.palette = gen_palette_seeded(&rule, self.size, self.size, semantics, self.tasks(), seed as u64).map_err(msg)?;
        self.output = None;
        Ok(())
    }

    /// Sets every palette cell within `radius` of `(x, y)` to `task`.
    pub fn paint(&mut self, x: f64, y: f64, radius: f64, task: &str) -> Result<(), String> {
        let id = parse_task(task)?.id();
        if id.index() >= self.tasks() {
            return Err(format!("the network predicts only {} tasks", self.tasks()));
        }
        let r2 = radius * radius;
        for py in 0..self.size {
            for px in 0..self.size {
                let (dx, dy) = (px as f64 + 0.5 - x, py as f64 + 0.5 - y);
                if dx * dx + dy * dy <= r2 {
                    self.palette.set(py, px, id);
                }
            }
        }
        self.output = None;
        Ok(())
    }

    /// Replaces the network with a checkpoint written by `ctask train`.
    pub fn load_checkpoint(&mut self, sidecar: &str, archive: &[u8]) -> Result<(), String> {
        let bundle = ModelBundle::from_parts(sidecar, archive).map_err(msg)?;
        if bundle.config.variant != Variant::Ctn {
            return Err(format!("expected a ctn checkpoint, got {:?}", bundle.config.variant));
        }
        self.bundle = bundle;
        let k = self.tasks();
        for c in &mut self.palette.cells {
            if *c as usize >= k {
                *c = Task::SemSeg.id().0.min(k as u8 - 1);
            }
        }
        self.output = None;
        Ok(())
    }

    /// Runs the network once for the current scene and palette.
    pub fn predict(&mut self) -> Result<(), String> {
        validate_palette(&self.palette, self.tasks()).map_err(msg)?;
        let o = self.bundle.predict(&self.scene.image, std::slice::from_ref(&self.palette)).map_err(msg)?;
        self.output = Some(o);
        Ok(())
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&ctask_core::imageio::tensor_to_rgb(&self.scene.image))
    }

    pub fn palette_rgba(&self) -> Vec<u8> {
        rgba(&render::palette_rgb(&self.palette))
    }

    /// Ground truth stitched with the same per-pixel task choice.
    pub fn target_rgba(&self) -> Vec<u8> {
        let rgb: Vec<u8> = (0..self.size * self.size)
            .flat_map(|p| {
                let task = Task::ALL[self.palette.cells[p] as usize];
                target_pixel(&self.scene, task, p)
            })
            .collect();
        rgba(&rgb)
    }

    /// Composite render of the last prediction; empty before [`Demo::predict`].
    pub fn prediction_rgba(&self) -> Vec<u8> {
        self.output.as_ref().map(|o| rgba(&render::composite_rgb(o, 0, &self.palette))).unwrap_or_default()
    }

    /// JSON description of pixel `(x, y)`: its task, label and prediction.
    pub fn probe(&self, x: usize, y: usize) -> Result<String, String> {
        if x >= self.size || y >= self.size {
            return Err(format!("pixel ({x}, {y}) outside {0}×{0}", self.size));
        }
        let p = y * self.size + x;
        let task = Task::ALL[self.palette.cells[p] as usize];
        let target = self.scene.valid[task.id().index()][p].then(|| describe_target(&self.scene, task, p));
        let predicted = self.output.as_ref().map(|o| {
            let plane = self.size * self.size;
            describe_output(task, [0, 1, 2].map(|c| o.data()[c * plane + p] as f64))
        });
        Ok(serde_json::json!({ "x": x, "y": y, "task": task.name(), "target": target, "predicted": predicted }).to_string())
    }
}

/// Task names with their palette colors, as JSON.
#[wasm_bindgen]
pub fn task_legend() -> String {
    let rows: Vec<_> = Task::ALL
        .iter()
        .map(|t| serde_json::json!({ "name": t.name(), "color": TASK_COLORS[t.id().index()] }))
        .collect();
    serde_json::Value::Array(rows).to_string()
}

fn target_pixel(scene: &SyntheticScene, task: Task, p: usize) -> [u8; 3] {
    if !scene.valid[task.id().index()][p] {
        return UNLABELLED;
    }
    let gray = |on: bool| if on { [255; 3] } else { [0; 3] };
    match task {
        Task::SemSeg => AnchorTable::semseg().rgb(scene.semantic[p] as usize),
        Task::Parts => AnchorTable::parts().rgb(scene.parts[p] as usize),
        Task::Edges => gray(scene.edges[p] != 0),
        Task::Saliency => gray(scene.saliency[p] != 0),
        Task::Normals => scene.normals[p].map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    }
}

fn describe_target(scene: &SyntheticScene, task: Task, p: usize) -> String {
    match task {
        Task::SemSeg => AnchorTable::semseg().names[scene.semantic[p] as usize].clone(),
        Task::Parts => AnchorTable::parts().names[scene.parts[p] as usize].clone(),
        Task::Edges => scene.edges[p].min(1).to_string(),
        Task::Saliency => scene.saliency[p].min(1).to_string(),
        Task::Normals => {
            let n = scene.normals[p];
            format!("({:.2}, {:.2}, {:.2})", n[0], n[1], n[2])
        }
    }
}

fn describe_output(task: Task, o: [f64; 3]) -> String {
    match task {
        Task::SemSeg => AnchorTable::semseg().names[decode_class(o, AnchorTable::semseg())].clone(),
        Task::Parts => AnchorTable::parts().names[decode_class(o, AnchorTable::parts())].clone(),
        Task::Edges | Task::Saliency => format!("{:.2}", heads::binary_prob(o)),
        Task::Normals => {
            let n = normal_vector(o);
            format!("({:.2}, {:.2}, {:.2})", n[0], n[1], n[2])
        }
    }
}
