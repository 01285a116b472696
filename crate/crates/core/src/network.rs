//! Encoder-decoder models: the composite-tasking network, the single-task and
//! multi-head baselines, and the palette predictor.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioning::{composition_block, embed_tasks, init_weight, plain_block, BlockSpec, Conditioner, EmbeddingConfig, Forward, ParamSet};
use crate::cttn;
use crate::error::{shape_err, CtError, Result};
use crate::palette::{TaskId, TaskPalette, MAX_TASKS};
use crate::tensor::{Real, Shape, Tensor};

pub const LEVELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ctn,
    Stn,
    Mhn,
    PalettePredictor,
}

impl std::str::FromStr for Variant {
    type Err = CtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ctn" => Ok(Variant::Ctn),
            "stn" => Ok(Variant::Stn),
            "mhn" => Ok(Variant::Mhn),
            "palette_predictor" | "palette" => Ok(Variant::PalettePredictor),
            _ => Err(CtError::Variant(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder block widths B1..B5.
    pub widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    /// Output width of the full-resolution skip over the raw image.
    pub image_skip: usize,
    pub k: usize,
    pub n_w: usize,
    pub embed_layers: usize,
    pub embed_hidden: usize,
    pub height: usize,
    pub width: usize,
    pub slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ctn,
            widths: vec![16, 32, 64, 96, 128],
            dec_widths: vec![96, 64, 48, 32, 16],
            image_skip: 8,
            k: MAX_TASKS,
            n_w: 128,
            embed_layers: 6,
            embed_hidden: 128,
            height: 64,
            width: 64,
            slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    /// Small configuration for gradient checks and quick tests.
    pub fn tiny(variant: Variant, k: usize) -> Self {
        Self {
            variant,
            widths: vec![4, 4, 6, 6, 8],
            dec_widths: vec![6, 6, 4, 4, 4],
            image_skip: 2,
            k,
            n_w: 6,
            embed_layers: 6,
            embed_hidden: 8,
            height: 32,
            width: 32,
            ..Self::default()
        }
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            layers: self.embed_layers,
            hidden: self.embed_hidden,
            n_w: self.n_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CtError::InvalidArgument(m.to_string()));
        if self.widths.len() != 5 || self.dec_widths.len() != 5 {
            return bad("five encoder and five decoder widths are required");
        }
        if self.widths.iter().chain(&self.dec_widths).any(|&w| w == 0) || self.image_skip == 0 {
            return bad("widths must be positive");
        }
        if self.k == 0 || self.k > MAX_TASKS {
            return bad("K must be in 1..=5");
        }
        if self.variant == Variant::Ctn && (self.n_w == 0 || self.embed_layers == 0 || self.embed_hidden == 0) {
            return bad("embedding widths must be positive");
        }
        self.check_size(self.height, self.width)
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(CtError::InvalidArgument(format!("input size {h}×{w} must be a positive multiple of 32")));
        }
        Ok(())
    }

    /// Output channels of the final block.
    pub fn out_channels(&self) -> usize {
        match self.variant {
            Variant::PalettePredictor => self.k,
            _ => 3,
        }
    }
}

/// Decoder layout shared by all variants, in execution order.
#[derive(Clone, Debug)]
pub struct DecoderPlan {
    pub start: BlockSpec,
    /// `(skip on f_{5-j}, fusion block)` for `j = 1..=4`.
    pub stages: Vec<(BlockSpec, BlockSpec)>,
    pub image_skip: BlockSpec,
    pub full: BlockSpec,
    pub last: BlockSpec,
}

impl DecoderPlan {
    pub fn new(cfg: &ModelConfig, prefix: &str) -> Self {
        let e = &cfg.widths;
        let d = &cfg.dec_widths;
        let mut idx = 0;
        let mut spec = |kernel, in_c, out_c, level, activation| {
            let s = BlockSpec {
                name: format!("{prefix}block{idx}"),
                kernel,
                in_c,
                out_c,
                level,
                activation,
            };
            idx += 1;
            s
        };
        let start = spec(1, e[4], d[0], 5, true);
        let mut stages = Vec::new();
        for j in 1..=4 {
            let f = 4 - j; // encoder index of f_{5-j}
            let skip = spec(1, e[f], e[f], 5 - j, true);
            let main = spec(3, d[j - 1] + e[f], d[j], 5 - j, true);
            stages.push((skip, main));
        }
        let image_skip = spec(1, 3, cfg.image_skip, 0, true);
        let full = spec(3, d[4] + cfg.image_skip, d[4], 0, true);
        let last = spec(3, d[4], cfg.out_channels(), 0, false);
        Self {
            start,
            stages,
            image_skip,
            full,
            last,
        }
    }

    pub fn blocks(&self) -> Vec<&BlockSpec> {
        let mut v = vec![&self.start];
        for (s, m) in &self.stages {
            v.push(s);
            v.push(m);
        }
        v.extend([&self.image_skip, &self.full, &self.last]);
        v
    }
}

fn init_encoder<T: Real>(cfg: &ModelConfig, prefix: &str, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) {
    let mut cin = 3;
    for (i, &c) in cfg.widths.iter().enumerate() {
        for (a, ci) in [(0, cin), (1, c)] {
            let base = format!("{prefix}enc{}", i + 1);
            params.insert(format!("{base}.conv{a}.w"), init_weight(Shape::new(c, ci, 3, 3), ci * 9, rng));
            params.insert(format!("{base}.conv{a}.b"), Tensor::zeros(Shape::matrix(c, 1)));
            params.insert(format!("{base}.bn{a}.gamma"), Tensor::full(Shape::matrix(c, 1), T::one()));
            params.insert(format!("{base}.bn{a}.beta"), Tensor::zeros(Shape::matrix(c, 1)));
            params.insert(format!("{base}.bn{a}.running_mu"), Tensor::zeros(Shape::matrix(c, 1)));
            params.insert(format!("{base}.bn{a}.running_var"), Tensor::full(Shape::matrix(c, 1), T::one()));
        }
        cin = c;
    }
}

/// Initial per-channel offset of the 3-channel output. The background
/// anchor sits at the origin, and an output starting on an anchor receives a
/// repulsive gradient that pushes object pixels out of the anchor cube.
pub const OUTPUT_CENTER: f64 = 0.3;
/// Initial per-channel spread of the 3-channel output.
pub const OUTPUT_SCALE: f64 = 0.1;

fn init_decoder<T: Real>(cfg: &ModelConfig, prefix: &str, conditioned: bool, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) {
    let plan = DecoderPlan::new(cfg, prefix);
    for b in plan.blocks() {
        if conditioned {
            b.init_conditioned(cfg.n_w, params, rng);
        } else {
            b.init_plain(params, rng);
        }
    }
    if cfg.variant != Variant::PalettePredictor {
        let n = &plan.last.name;
        let (g, b) = if conditioned { ("gamma.b", "beta.b") } else { ("bn.gamma", "bn.beta") };
        let c = plan.last.out_c;
        params.insert(format!("{n}.{g}"), Tensor::full(Shape::matrix(c, 1), T::of(OUTPUT_SCALE)));
        params.insert(format!("{n}.{b}"), Tensor::full(Shape::matrix(c, 1), T::of(OUTPUT_CENTER)));
    }
}

/// Freshly initialized parameters for `cfg`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::default();
    match cfg.variant {
        Variant::Ctn => {
            init_encoder(cfg, "", &mut p, &mut rng);
            cfg.embedding().init(cfg.k, &mut p, &mut rng);
            init_decoder(cfg, "", true, &mut p, &mut rng);
        }
        Variant::Mhn => {
            init_encoder(cfg, "", &mut p, &mut rng);
            for t in 0..cfg.k {
                init_decoder(cfg, &format!("dec{t}."), false, &mut p, &mut rng);
            }
        }
        Variant::Stn => {
            for t in 0..cfg.k {
                init_encoder(cfg, &format!("net{t}."), &mut p, &mut rng);
                init_decoder(cfg, &format!("net{t}."), false, &mut p, &mut rng);
            }
        }
        Variant::PalettePredictor => {
            init_encoder(cfg, "", &mut p, &mut rng);
            init_decoder(cfg, "", false, &mut p, &mut rng);
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub embedding: usize,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    let p = init_params::<f32>(cfg, 0)?;
    let total = p.total();
    let embedding = p.count(&["embednet."]);
    let encoder: usize = p
        .trainable()
        .filter(|(k, _)| k.split('.').any(|s| s.starts_with("enc")))
        .map(|(_, v)| v.numel())
        .sum();
    Ok(ParamCounts {
        total,
        encoder,
        decoder: total - encoder - embedding,
        embedding,
    })
}

fn check_image<T: Real>(f: &Forward<T>, cfg: &ModelConfig, image: Var) -> Result<Shape> {
    let s = f.g.shape(image);
    if s.c != 3 {
        return Err(CtError::InvalidArgument(format!("expected 3 input channels, got {}", s.c)));
    }
    cfg.check_size(s.h, s.w)?;
    Ok(s)
}

fn check_palettes(s: Shape, palettes: &[TaskPalette], k: usize) -> Result<()> {
    if palettes.len() != s.n {
        return Err(CtError::InvalidArgument(format!("{} palettes for a batch of {}", palettes.len(), s.n)));
    }
    for p in palettes {
        if (p.h, p.w) != (s.h, s.w) {
            return Err(shape_err("palette vs image", (p.h, p.w), (s.h, s.w)));
        }
        if let Some(&bad) = p.cells.iter().find(|&&c| c as usize >= k) {
            return Err(CtError::Palette(format!("task id {bad} with K={k}")));
        }
    }
    Ok(())
}

/// Features B1..B5; feature `i` has spatial size `H/2^i`.
pub fn encoder_forward<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, prefix: &str, image: Var) -> Result<Vec<Var>> {
    check_image(f, cfg, image)?;
    let mut x = image;
    let mut feats = Vec::with_capacity(5);
    for i in 1..=cfg.widths.len() {
        for a in 0..2 {
            let base = format!("{prefix}enc{i}");
            x = f.conv(&format!("{base}.conv{a}"), x, if a == 0 { 2 } else { 1 })?;
            x = f.norm(&format!("{base}.bn{a}"), x)?;
            let g = f.param(&format!("{base}.bn{a}.gamma"))?;
            let b = f.param(&format!("{base}.bn{a}.beta"))?;
            x = f.g.channel_affine(x, g, b)?;
            x = f.lrelu(x)?;
        }
        feats.push(x);
    }
    Ok(feats)
}

fn decoder_forward<T: Real>(
    f: &mut Forward<T>,
    plan: &DecoderPlan,
    feats: &[Var],
    image: Var,
    block: &mut dyn FnMut(&mut Forward<T>, &BlockSpec, Var) -> Result<Var>,
) -> Result<Var> {
    let mut x = block(f, &plan.start, feats[4])?;
    for (j, (skip, main)) in plan.stages.iter().enumerate() {
        let fi = feats[3 - j];
        let s = f.g.shape(fi);
        let up = f.g.resize_bilinear(x, s.h, s.w)?;
        let sk = block(f, skip, fi)?;
        let cat = f.g.concat(&[up, sk])?;
        x = block(f, main, cat)?;
    }
    let s = f.g.shape(image);
    let up = f.g.resize_bilinear(x, s.h, s.w)?;
    let sk = block(f, &plan.image_skip, image)?;
    let cat = f.g.concat(&[up, sk])?;
    x = block(f, &plan.full, cat)?;
    block(f, &plan.last, x)
}

fn require(cfg: &ModelConfig, v: &[Variant]) -> Result<()> {
    if v.contains(&cfg.variant) {
        Ok(())
    } else {
        Err(CtError::Variant(format!("{:?} cannot run this forward", cfg.variant)))
    }
}

/// Composite output `O` (`N×3×H×W`) of the composite-tasking network.
pub fn ctn_forward<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, image: Var, palettes: &[TaskPalette]) -> Result<Var> {
    require(cfg, &[Variant::Ctn])?;
    let s = check_image(f, cfg, image)?;
    check_palettes(s, palettes, cfg.k)?;
    let feats = encoder_forward(f, cfg, "", image)?;
    let e = embed_tasks(f, &cfg.embedding(), cfg.k)?;
    let mut cond = Conditioner::factored(e, palettes, cfg.k, LEVELS)?;
    let plan = DecoderPlan::new(cfg, "");
    decoder_forward(f, &plan, &feats, image, &mut |f, spec, x| composition_block(f, spec, x, &mut cond))
}

/// Scale and shift maps produced by composition block `block` for `palettes`.
pub fn block_maps<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, palettes: &[TaskPalette], block: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    require(cfg, &[Variant::Ctn])?;
    let plan = DecoderPlan::new(cfg, "");
    let spec = *plan
        .blocks()
        .get(block)
        .ok_or_else(|| CtError::InvalidArgument(format!("no block {block}")))?;
    let e = embed_tasks(f, &cfg.embedding(), cfg.k)?;
    let mut cond = Conditioner::factored(e, palettes, cfg.k, LEVELS)?;
    let (g, b) = cond.maps(f, &spec.name, spec.level)?;
    Ok((f.g.value(g).clone(), f.g.value(b).clone()))
}

/// Output of one task's decoder (MHN) or network (STN).
pub fn baseline_forward<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, image: Var, task: TaskId) -> Result<Var> {
    let feats = match cfg.variant {
        Variant::Mhn => encoder_forward(f, cfg, "", image)?,
        Variant::Stn => encoder_forward(f, cfg, &format!("net{}.", task.0), image)?,
        _ => return Err(CtError::Variant(format!("{:?} is not a baseline", cfg.variant))),
    };
    baseline_decode(f, cfg, &feats, image, task)
}

fn baseline_decode<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, feats: &[Var], image: Var, task: TaskId) -> Result<Var> {
    if task.index() >= cfg.k {
        return Err(CtError::InvalidArgument(format!("task {} with K={}", task.0, cfg.k)));
    }
    let prefix = match cfg.variant {
        Variant::Mhn => format!("dec{}.", task.0),
        _ => format!("net{}.", task.0),
    };
    let plan = DecoderPlan::new(cfg, &prefix);
    decoder_forward(f, &plan, feats, image, &mut |f, spec, x| plain_block(f, spec, x))
}

/// Composite output of a baseline: every requested task's output picked per pixel.
/// Only the tasks present in the batch are evaluated; MHN shares one encoder pass.
pub fn baseline_composite<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, image: Var, palettes: &[TaskPalette]) -> Result<Var> {
    require(cfg, &[Variant::Stn, Variant::Mhn])?;
    let s = check_image(f, cfg, image)?;
    check_palettes(s, palettes, cfg.k)?;
    let mut present = [false; MAX_TASKS];
    palettes.iter().flat_map(|p| &p.cells).for_each(|&c| present[c as usize] = true);
    let tasks: Vec<usize> = (0..cfg.k).filter(|&t| present[t]).collect();
    let mut slot = [0u8; MAX_TASKS];
    for (i, &t) in tasks.iter().enumerate() {
        slot[t] = i as u8;
    }
    let shared = if cfg.variant == Variant::Mhn { Some(encoder_forward(f, cfg, "", image)?) } else { None };
    let mut outs = Vec::with_capacity(tasks.len());
    for &t in &tasks {
        let o = match &shared {
            Some(feats) => baseline_decode(f, cfg, feats, image, TaskId(t as u8))?,
            None => baseline_forward(f, cfg, image, TaskId(t as u8))?,
        };
        outs.push(o);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    let choice: Arc<[u8]> = palettes.iter().flat_map(|p| p.cells.iter().map(|&c| slot[c as usize])).collect();
    f.g.select(&outs, choice)
}

/// Palette logits `N×K×H×W`.
pub fn palette_logits<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, image: Var) -> Result<Var> {
    require(cfg, &[Variant::PalettePredictor])?;
    let feats = encoder_forward(f, cfg, "", image)?;
    let plan = DecoderPlan::new(cfg, "");
    decoder_forward(f, &plan, &feats, image, &mut |f, spec, x| plain_block(f, spec, x))
}

/// Composite output for any task-producing variant.
pub fn composite_forward<T: Real>(f: &mut Forward<T>, cfg: &ModelConfig, image: Var, palettes: &[TaskPalette]) -> Result<Var> {
    match cfg.variant {
        Variant::Ctn => ctn_forward(f, cfg, image, palettes),
        Variant::Stn | Variant::Mhn => baseline_composite(f, cfg, image, palettes),
        Variant::PalettePredictor => Err(CtError::Variant("the palette predictor has no composite output".into())),
    }
}

/// Configuration, parameters and the seed they were initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    config: ModelConfig,
    seed: u64,
}

/// Path of the JSON config written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params, seed })
    }

    /// Composite prediction in evaluation mode.
    pub fn predict(&self, image: &Tensor<f32>, palettes: &[TaskPalette]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &self.params, false);
        f.slope = self.config.slope as f32;
        f.bn_eps = self.config.bn_eps as f32;
        let x = f.g.input(image.clone());
        let o = composite_forward(&mut f, &self.config, x, palettes)?;
        Ok(g.value(o).clone())
    }

    /// Argmax palette of a palette-predictor bundle.
    pub fn predict_palettes(&self, image: &Tensor<f32>) -> Result<Vec<TaskPalette>> {
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &self.params, false);
        f.slope = self.config.slope as f32;
        f.bn_eps = self.config.bn_eps as f32;
        let x = f.g.input(image.clone());
        let o = palette_logits(&mut f, &self.config, x)?;
        Ok(argmax_palettes(g.value(o)))
    }

    pub fn to_archive_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        cttn::write_archive(&mut buf, self.params.map.iter().map(|(k, v)| (k.as_str(), v)))?;
        Ok(buf)
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            config: self.config.clone(),
            seed: self.seed,
        })
        .expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_archive_bytes()?)?;
        std::fs::write(sidecar_path(path), self.sidecar_json())?;
        Ok(())
    }

    pub fn from_parts(sidecar: &str, archive: &[u8]) -> Result<Self> {
        let sc: Sidecar = serde_json::from_str(sidecar)?;
        sc.config.validate()?;
        let expected = init_params::<f32>(&sc.config, 0)?;
        let mut params = ParamSet::default();
        for (name, t) in cttn::read_archive(&mut &archive[..])? {
            let want = expected.get(&name).map_err(|_| CtError::Format(format!("unexpected record `{name}`")))?;
            if want.shape() != t.shape() {
                return Err(CtError::Format(format!("record `{name}` has shape {:?}, expected {:?}", t.shape(), want.shape())));
            }
            params.insert(name, t);
        }
        if let Some(missing) = expected.map.keys().find(|k| !params.map.contains_key(*k)) {
            return Err(CtError::MissingParam(missing.clone()));
        }
        Ok(Self {
            config: sc.config,
            params,
            seed: sc.seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = std::fs::read_to_string(sidecar_path(path))?;
        let archive = std::fs::read(path)?;
        Self::from_parts(&sidecar, &archive)
    }
}

pub fn argmax_palettes<T: Real>(logits: &Tensor<T>) -> Vec<TaskPalette> {
    let s = logits.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let cells = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if logits.data()[(n * s.c + c) * plane + p] > logits.data()[(n * s.c + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            TaskPalette { h: s.h, w: s.w, cells }
        })
        .collect()
}
