//! Optimization loop, plateau schedule, fine-tuning and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::conditioning::{Forward, ParamSet};
use crate::cttn;
use crate::error::{CtError, Result};
use crate::heads::{composite_loss, composite_loss_raw, LossTerms, LossWeights};
use crate::metrics::{Confusion, Evaluator, MetricsReport};
use crate::network::{composite_forward, palette_logits, ModelBundle, ModelConfig, Variant};
use crate::palette::{Rule, TaskId, TaskPalette};
use crate::synth::{batch_iter, derive_seed, make_batch, DataSpec, SyntheticScene};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rule: Rule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub data: DataSpec,
    /// Scenes for evaluations reported by fine-tuning; the training data when absent.
    pub eval_data: Option<DataSpec>,
    pub flip: bool,
    pub loss: LossWeights,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Mosaic { distinct_tasks: false },
            epochs: 10,
            batch_size: 10,
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            adam: AdamConfig::default(),
            plateau_factor: 0.3,
            plateau_patience: 12,
            seed: 0,
            data: DataSpec::default(),
            eval_data: None,
            flip: false,
            loss: LossWeights::default(),
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return Err(CtError::InvalidArgument("learning rates must be positive".into()));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 {
            return Err(CtError::InvalidArgument("patience and batch size must be at least 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(CtError::InvalidArgument("plateau factor must be in (0, 1]".into()));
        }
        self.loss.validate()
    }
}

/// Learning-rate group of a parameter.
pub fn is_encoder_param(name: &str) -> bool {
    name.split('.').any(|s| s.starts_with("enc"))
}

/// Adam moments and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros = ParamSet {
            map: params.trainable().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        };
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam step; parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr_enc: f64, lr_dec: f64, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.map.iter_mut() {
            if crate::conditioning::is_running_stat(name) {
                continue;
            }
            let lr = if is_encoder_param(name) { lr_enc } else { lr_dec };
            let m = self.m.map.get_mut(name).ok_or_else(|| CtError::MissingParam(format!("m.{name}")))?;
            let v = self.v.map.get_mut(name).ok_or_else(|| CtError::MissingParam(format!("v.{name}")))?;
            let g = grads.map.get(name);
            let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                let pi = p.data()[i] as f64;
                let upd = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pi;
                p.data_mut()[i] = (pi - lr * upd) as f32;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rates by `factor` after `patience` epochs without a
/// strictly lower epoch loss, then starts counting again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Returns the multiplier to apply to the learning rates.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return self.factor;
        }
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub metrics: MetricsReport,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub plateau: Plateau,
    pub step: u64,
}

pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    pub opt: OptimizerState,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

fn opt_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

fn state_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    state: TrainState,
    config: TrainConfig,
}

/// Mean softmax cross-entropy of palette logits and its gradient.
pub fn palette_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[TaskPalette]) -> Result<(f64, Vec<T>)> {
    let s = logits.shape();
    if targets.len() != s.n || targets.iter().any(|p| (p.h, p.w) != (s.h, s.w)) {
        return Err(CtError::InvalidArgument("palette targets do not match the logits".into()));
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut grad = vec![T::zero(); s.numel()];
    let mut total = 0.0;
    let mut z = vec![0.0; s.c];
    for n in 0..s.n {
        for p in 0..plane {
            for c in 0..s.c {
                z[c] = logits.data()[(n * s.c + c) * plane + p].f64();
            }
            let t = targets[n].cells[p] as usize;
            if t >= s.c {
                return Err(CtError::Palette(format!("target task {t} with {} logits", s.c)));
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[t];
            for c in 0..s.c {
                let pc = (z[c] - lse).exp() - if c == t { 1.0 } else { 0.0 };
                grad[(n * s.c + c) * plane + p] = T::of(pc / count);
            }
        }
    }
    Ok((total / count, grad))
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        bundle.config.validate()?;
        let opt = OptimizerState::new(&bundle.params);
        let state = TrainState {
            epochs_done: 0,
            lr_enc: config.lr_encoder,
            lr_dec: config.lr_decoder,
            plateau: Plateau::new(config.plateau_factor, config.plateau_patience),
            step: 0,
        };
        Ok(Self {
            bundle,
            config,
            opt,
            state,
            log: Vec::new(),
        })
    }

    fn check_rule(&self) -> Result<()> {
        let k = self.bundle.config.k;
        match &self.config.rule {
            Rule::Single { task } => TaskId::new(task.index(), k).map(|_| ()),
            Rule::Mosaic { distinct_tasks: true } if k < 4 => Err(CtError::InvalidArgument("distinct mosaic tasks need K ≥ 4".into())),
            r if r.needs_semantics() => {
                let table = r.table().expect("semantic rule");
                match table.iter().find(|t| t.id().index() >= k) {
                    Some(t) => Err(CtError::InvalidArgument(format!("rule {} requests {t} but K={k}", r.name()))),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn run(&mut self) -> Result<()> {
        self.check_rule()?;
        if self.bundle.config.variant == Variant::PalettePredictor && !self.config.rule.needs_semantics() {
            return Err(CtError::InvalidArgument("the palette predictor needs a semantic rule (r2 or r3)".into()));
        }
        while self.state.epochs_done < self.config.epochs {
            let entry = self.epoch(self.state.epochs_done)?;
            let mult = self.state.plateau.observe(entry.loss);
            self.state.lr_enc *= mult;
            self.state.lr_dec *= mult;
            self.state.epochs_done += 1;
            if let Some(path) = &self.config.log {
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            self.log.push(entry);
            if let Some(path) = self.config.checkpoint.clone() {
                self.save(&path)?;
            }
        }
        Ok(())
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let scenes = self.config.data.scenes_for_epoch(epoch)?;
        let epoch_seed = derive_seed(self.config.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let cfg = self.bundle.config.clone();
        let rule = self.config.rule.clone();
        let mut eval = Evaluator::new(cfg.k);
        let mut sum = 0.0;
        let mut batches = 0usize;
        let (lr_enc, lr_dec) = (self.state.lr_enc, self.state.lr_dec);
        let momentum = cfg.bn_momentum as f32;
        let batches_iter: Vec<_> = batch_iter(&scenes, self.config.batch_size, &rule, cfg.k, self.config.flip, &mut rng)?.collect();
        for (bi, batch) in batches_iter.into_iter().enumerate() {
            let batch = batch?;
            let mut g = Graph::new();
            let mut f = Forward::new(&mut g, &self.bundle.params, true);
            f.slope = cfg.slope as f32;
            f.bn_eps = cfg.bn_eps as f32;
            let x = f.g.input(batch.image.clone());
            let (loss_var, value) = if cfg.variant == Variant::PalettePredictor {
                let o = palette_logits(&mut f, &cfg, x)?;
                let (v, grad) = palette_cross_entropy(f.g.value(o), &batch.palettes)?;
                if !v.is_finite() {
                    return Err(non_finite(epoch, bi, epoch_seed));
                }
                (f.g.precomputed(o, v as f32, grad)?, v)
            } else {
                let o = composite_forward(&mut f, &cfg, x, &batch.palettes)?;
                let (l, terms) = composite_loss(f.g, o, &batch.labels, &batch.palettes, cfg.k, &self.config.loss)
                    .map_err(|e| match e {
                        CtError::NonFinite(_) => non_finite(epoch, bi, epoch_seed),
                        e => e,
                    })?;
                eval.add_batch(f.g.value(o), &batch.labels, &batch.palettes)?;
                (l, terms.total)
            };
            let vars: Vec<(String, crate::autodiff::Var)> = f.vars().iter().map(|(k, v)| (k.clone(), *v)).collect();
            let stats = std::mem::take(&mut f.stats);
            g.backward(loss_var)?;
            let grads = ParamSet {
                map: vars.into_iter().map(|(k, v)| (k, g.grad(v))).collect(),
            };
            self.opt.step(&mut self.bundle.params, &grads, lr_enc, lr_dec, &self.config.adam)?;
            self.bundle.params.update_running(&stats, momentum)?;
            self.state.step += 1;
            sum += value;
            batches += 1;
        }
        Ok(EpochLog {
            epoch,
            loss: if batches > 0 { sum / batches as f64 } else { 0.0 },
            lr_enc,
            lr_dec,
            metrics: eval.report(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.bundle.save(path)?;
        let mut buf = Vec::new();
        let m = self.opt.m.map.iter().map(|(k, v)| (format!("m.{k}"), v));
        let v = self.opt.v.map.iter().map(|(k, v)| (format!("v.{k}"), v));
        let all: Vec<(String, &Tensor<f32>)> = m.chain(v).collect();
        cttn::write_archive(&mut buf, all.iter().map(|(k, v)| (k.as_str(), *v)))?;
        std::fs::write(opt_path(path), buf)?;
        let sf = StateFile {
            state: self.state.clone(),
            config: self.config.clone(),
        };
        std::fs::write(state_path(path), serde_json::to_string_pretty(&sf)?)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`]; `epochs` may extend the target.
    pub fn resume(path: &Path, epochs: Option<usize>) -> Result<Self> {
        let bundle = ModelBundle::load(path)?;
        let sf: StateFile = serde_json::from_str(&std::fs::read_to_string(state_path(path))?)?;
        let bytes = std::fs::read(opt_path(path))?;
        let mut opt = OptimizerState {
            step: sf.state.step,
            ..Default::default()
        };
        for (name, t) in cttn::read_archive(&mut &bytes[..])? {
            if let Some(k) = name.strip_prefix("m.") {
                opt.m.insert(k, t);
            } else if let Some(k) = name.strip_prefix("v.") {
                opt.v.insert(k, t);
            } else {
                return Err(CtError::Format(format!("unexpected optimizer record `{name}`")));
            }
        }
        let mut config = sf.config;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        Ok(Self {
            bundle,
            config,
            opt,
            state: sf.state,
            log: Vec::new(),
        })
    }
}

fn non_finite(epoch: usize, batch: usize, seed: u64) -> CtError {
    CtError::NonFinite(format!("loss at epoch {epoch}, batch {batch} (epoch seed {seed:#x})"))
}

/// Trains a fresh bundle.
pub fn train(model: ModelConfig, config: TrainConfig) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let bundle = ModelBundle::init(model, config.seed)?;
    let mut t = Trainer::new(bundle, config)?;
    t.run()?;
    Ok((t.bundle, t.log))
}

/// Palette predictor trained against palettes of a semantic rule.
pub fn train_palette_predictor(mut model: ModelConfig, config: TrainConfig) -> Result<(ModelBundle, Vec<EpochLog>)> {
    if !config.rule.needs_semantics() {
        return Err(CtError::InvalidArgument("the palette predictor needs a semantic rule (r2 or r3)".into()));
    }
    model.variant = Variant::PalettePredictor;
    train(model, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub before: MetricsReport,
    pub before_loss: f64,
    pub after: MetricsReport,
    pub after_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Continues training `bundle` on palettes of `config.rule`, measuring the
/// new rule before the first update and after the last.
pub fn finetune(bundle: ModelBundle, config: TrainConfig) -> Result<(ModelBundle, FinetuneReport)> {
    if bundle.config.variant != Variant::Ctn {
        return Err(CtError::Variant("fine-tuning expects a CTN bundle".into()));
    }
    let eval_spec = config.eval_data.clone().unwrap_or_else(|| config.data.clone());
    let scenes = eval_spec.scenes_for_epoch(0)?;
    let k = bundle.config.k;
    if let Some(t) = config.rule.table().and_then(|t| t.iter().find(|t| t.id().index() >= k)) {
        return Err(CtError::InvalidArgument(format!("rule requests {t} but the bundle has K={k}")));
    }
    let before = evaluate(&bundle, &config.rule, &scenes, config.seed)?;
    let before_loss = evaluate_loss(&bundle, &config.rule, &scenes, &config.loss, config.seed)?.0;
    let mut t = Trainer::new(bundle, config.clone())?;
    t.run()?;
    let after = evaluate(&t.bundle, &config.rule, &scenes, config.seed)?;
    let after_loss = evaluate_loss(&t.bundle, &config.rule, &scenes, &config.loss, config.seed)?.0;
    Ok((
        t.bundle,
        FinetuneReport {
            before,
            before_loss,
            after,
            after_loss,
            log: t.log,
        },
    ))
}

const EVAL_BATCH: usize = 8;

fn eval_palettes(rule: &Rule, scenes: &[SyntheticScene], idx: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TaskPalette>> {
    Ok(make_batch(scenes, idx, rule, k, false, rng)?.palettes)
}

/// Metrics of `bundle` on `scenes`.
///
/// For a single-task rule every task is evaluated with a uniform palette over
/// all scenes. Composite rules evaluate each task on its requested pixels.
pub fn evaluate(bundle: &ModelBundle, rule: &Rule, scenes: &[SyntheticScene], seed: u64) -> Result<MetricsReport> {
    let k = bundle.config.k;
    let mut eval = Evaluator::new(k);
    let chunks: Vec<Vec<usize>> = (0..scenes.len()).collect::<Vec<_>>().chunks(EVAL_BATCH).map(|c| c.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE7A1));
    for idx in chunks {
        let pal_sets: Vec<Vec<TaskPalette>> = match rule {
            Rule::Single { .. } => (0..k)
                .map(|t| idx.iter().map(|&i| TaskPalette::uniform(scenes[i].h, scenes[i].w, TaskId(t as u8))).collect())
                .collect(),
            _ => vec![eval_palettes(rule, scenes, &idx, k, &mut rng)?],
        };
        let picked: Vec<&SyntheticScene> = idx.iter().map(|&i| &scenes[i]).collect();
        let image = Tensor::stack(&picked.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        for pals in pal_sets {
            let o = bundle.predict(&image, &pals)?;
            let labels = crate::synth::sparsify_labels(&picked, &pals)?;
            eval.add_batch(&o, &labels, &pals)?;
        }
    }
    Ok(eval.report())
}

/// Mean composite loss over evaluation batches plus the summed task terms.
pub fn evaluate_loss(bundle: &ModelBundle, rule: &Rule, scenes: &[SyntheticScene], w: &LossWeights, seed: u64) -> Result<(f64, Vec<LossTerms>)> {
    let k = bundle.config.k;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1055));
    let mut total = 0.0;
    let mut terms = Vec::new();
    let chunks: Vec<Vec<usize>> = (0..scenes.len()).collect::<Vec<_>>().chunks(EVAL_BATCH).map(|c| c.to_vec()).collect();
    for idx in &chunks {
        let b = make_batch(scenes, idx, rule, k, false, &mut rng)?;
        let o = bundle.predict(&b.image, &b.palettes)?;
        let (v, _, t) = composite_loss_raw(&o, &b.labels, &b.palettes, k, w)?;
        total += v;
        terms.push(t);
    }
    Ok((total / chunks.len().max(1) as f64, terms))
}

/// Palette mIoU of a palette predictor against `rule` on `scenes`.
pub fn evaluate_palette_predictor(bundle: &ModelBundle, rule: &Rule, scenes: &[SyntheticScene]) -> Result<f64> {
    let k = bundle.config.k;
    let mut cm = Confusion::new(k);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for idx in (0..scenes.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let b = make_batch(scenes, idx, rule, k, false, &mut rng)?;
        let pred = bundle.predict_palettes(&b.image)?;
        for (p, t) in pred.iter().zip(&b.palettes) {
            for (&a, &b) in p.cells.iter().zip(&t.cells) {
                cm.add(b as usize, a as usize);
            }
        }
    }
    cm.miou().ok_or_else(|| CtError::InvalidArgument("no scenes to evaluate".into()))
}
