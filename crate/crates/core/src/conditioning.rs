//! Task representation and task composition blocks.
//!
//! Task codes go through a small fully-connected embedding network; the
//! resulting per-task vectors are broadcast over the palette and the resulting
//! map conditions every decoder block through per-pixel scale and shift maps.
//!
//! The production path never materializes the `N_w×H×W` palette embedding.
//! At pyramid level `ℓ` the embedding is `A_ℓ·e`, where `A_ℓ` holds the
//! bilinearly resized one-hot palette and `e` the `K` task embeddings. All 1×1
//! convolutions over it are pixelwise, so they are evaluated once per distinct
//! row of `A_ℓ` and gathered back into maps. The result is identical to the
//! dense computation, which is kept for tests and for direct callers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{resize_bilinear_raw, BatchStats, Graph, Var};
use crate::error::{shape_err, CtError, Result};
use crate::palette::{make_task_code, TaskId, TaskPalette, CODE_BLOCK};
use crate::tensor::{Real, Shape, Tensor};

/// Named tensors of a model: trainable parameters plus running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    pub map: BTreeMap<String, Tensor<T>>,
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mu") || name.ends_with(".running_var")
}

impl<T: Real> ParamSet<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| CtError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter().filter(|(k, _)| !is_running_stat(k))
    }

    /// Learnable element count of names starting with any of `prefixes`.
    pub fn count(&self, prefixes: &[&str]) -> usize {
        self.trainable()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.trainable().map(|(_, v)| v.numel()).sum()
    }

    /// FNV-1a over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (k, v) in &self.map {
            k.bytes().for_each(&mut eat);
            for x in v.data() {
                x.f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Exponential moving average of normalization statistics.
    pub fn update_running(&mut self, stats: &[(String, BatchStats<T>)], momentum: T) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mu", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let t = self.map.get_mut(&name).ok_or_else(|| CtError::MissingParam(name.clone()))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }
}

/// He-uniform initialization for a weight with the given fan-in.
pub fn init_weight<T: Real>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-bound..bound)))
}

/// One forward pass: the tape, the parameters it reads and the normalization
/// statistics it produced.
pub struct Forward<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    params: &'a ParamSet<T>,
    vars: BTreeMap<String, Var>,
    pub training: bool,
    pub slope: T,
    pub bn_eps: T,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamSet<T>, training: bool) -> Self {
        Self {
            g,
            params,
            vars: BTreeMap::new(),
            training,
            slope: T::of(0.01),
            bn_eps: T::of(1e-5),
            stats: Vec::new(),
        }
    }

    /// Uses `v` for parameter `name` instead of creating a leaf from the set.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.g.param(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name)
    }

    /// Parameter nodes touched by this pass, by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Per-channel normalization named `prefix`: batch statistics while
    /// training (recorded for the running update), running statistics otherwise.
    pub fn norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        if self.training {
            let (y, stats) = self.g.batch_norm(x, self.bn_eps, None)?;
            self.stats.push((prefix.to_string(), stats.expect("batch statistics")));
            Ok(y)
        } else {
            let mu = self.params.get(&format!("{prefix}.running_mu"))?;
            let var = self.params.get(&format!("{prefix}.running_var"))?;
            Ok(self.g.batch_norm(x, self.bn_eps, Some((mu.data(), var.data())))?.0)
        }
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let k = self.g.shape(w).h;
        self.g.conv2d(x, w, Some(b), stride, k / 2)
    }

    pub fn lrelu(&mut self, x: Var) -> Result<Var> {
        self.g.leaky_relu(x, self.slope)
    }
}

// ------------------------------------------------------------ embedding net

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub layers: usize,
    pub hidden: usize,
    pub n_w: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 128,
            n_w: 128,
        }
    }
}

impl EmbeddingConfig {
    /// `(in, out)` width of each layer for `k` tasks.
    pub fn dims(&self, k: usize) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let din = if i == 0 { CODE_BLOCK * k } else { self.hidden };
                let dout = if i + 1 == self.layers { self.n_w } else { self.hidden };
                (din, dout)
            })
            .collect()
    }

    pub fn init<T: Real>(&self, k: usize, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        for (i, (din, dout)) in self.dims(k).into_iter().enumerate() {
            params.insert(format!("embednet.layer{i}.w"), init_weight(Shape::matrix(dout, din), din, rng));
            params.insert(format!("embednet.layer{i}.b"), Tensor::zeros(Shape::matrix(dout, 1)));
        }
    }
}

/// All task codes stacked as a `K×20K×1×1` input.
pub fn task_codes<T: Real>(k: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(k * k * CODE_BLOCK);
    for t in 0..k {
        data.extend(make_task_code(TaskId(t as u8), k)?.into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::from_vec(Shape::matrix(k, k * CODE_BLOCK), data)
}

/// Task embeddings `e_1..e_K` as a `K×N_w×1×1` node.
pub fn embed_tasks<T: Real>(f: &mut Forward<T>, cfg: &EmbeddingConfig, k: usize) -> Result<Var> {
    let mut x = f.g.input(task_codes(k)?);
    for i in 0..cfg.layers {
        let w = f.param(&format!("embednet.layer{i}.w"))?;
        let b = f.param(&format!("embednet.layer{i}.b"))?;
        x = f.g.linear(x, w, Some(b))?;
        if i + 1 < cfg.layers {
            x = f.lrelu(x)?;
        }
    }
    Ok(x)
}

/// Dense palette embedding `N×N_w×H×W` from per-task embeddings `K×N_w`.
pub fn broadcast_embedding<T: Real>(palettes: &[TaskPalette], e: &Tensor<T>) -> Result<Tensor<T>> {
    let first = palettes.first().ok_or_else(|| CtError::InvalidArgument("no palettes".into()))?;
    let (k, nw) = (e.shape().n, e.shape().c);
    let (h, w) = (first.h, first.w);
    let plane = h * w;
    let mut out = Tensor::zeros(Shape::new(palettes.len(), nw, h, w));
    let ev = e.data().to_vec();
    let od = out.data_mut();
    for (n, p) in palettes.iter().enumerate() {
        if (p.h, p.w) != (h, w) {
            return Err(shape_err("broadcast_embedding", (h, w), (p.h, p.w)));
        }
        for (i, &t) in p.cells.iter().enumerate() {
            let t = t as usize;
            if t >= k {
                return Err(CtError::Palette(format!("task {t} has no embedding (K={k})")));
            }
            for c in 0..nw {
                od[(n * nw + c) * plane + i] = ev[t * nw + c];
            }
        }
    }
    Ok(out)
}

/// Level `i` is `E` resized to `(H/2^i, W/2^i)`; level 0 is `E` itself.
pub fn build_pyramid<T: Real>(e: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    if levels > 6 {
        return Err(CtError::InvalidArgument(format!("{levels} pyramid levels, at most 6")));
    }
    let s = e.shape();
    (0..levels)
        .map(|i| {
            let (h, w) = ((s.h >> i).max(1), (s.w >> i).max(1));
            Tensor::from_vec(Shape::new(s.n, s.c, h, w), resize_bilinear_raw(e.data(), s, h, w))
        })
        .collect()
}

/// Distinct rows of one pyramid level's palette mixing matrix.
#[derive(Clone, Debug)]
pub struct LevelMix<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub rows: usize,
    /// `rows × K`
    pub weights: Arc<[T]>,
    /// Row of each output pixel, `n·h·w`.
    pub index: Arc<[u32]>,
}

impl<T: Real> LevelMix<T> {
    pub fn new(palettes: &[TaskPalette], k: usize, h: usize, w: usize) -> Result<Self> {
        let first = palettes.first().ok_or_else(|| CtError::InvalidArgument("no palettes".into()))?;
        let (ph, pw) = (first.h, first.w);
        let n = palettes.len();
        let mut onehot = vec![T::zero(); n * k * ph * pw];
        for (b, p) in palettes.iter().enumerate() {
            if (p.h, p.w) != (ph, pw) {
                return Err(shape_err("palette batch", (ph, pw), (p.h, p.w)));
            }
            for (i, &t) in p.cells.iter().enumerate() {
                if t as usize >= k {
                    return Err(CtError::Palette(format!("task {t} with K={k}")));
                }
                onehot[(b * k + t as usize) * ph * pw + i] = T::one();
            }
        }
        let resized = resize_bilinear_raw(&onehot, Shape::new(n, k, ph, pw), h, w);
        let plane = h * w;
        let mut seen: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut weights = Vec::new();
        let mut index = Vec::with_capacity(n * plane);
        let mut row = vec![T::zero(); k];
        for b in 0..n {
            for p in 0..plane {
                for t in 0..k {
                    row[t] = resized[(b * k + t) * plane + p];
                }
                let key: Vec<u64> = row.iter().map(|v| v.f64().to_bits()).collect();
                let id = *seen.entry(key).or_insert_with(|| {
                    weights.extend_from_slice(&row);
                    (weights.len() / k - 1) as u32
                });
                index.push(id);
            }
        }
        Ok(Self {
            n,
            h,
            w,
            rows: weights.len() / k.max(1),
            weights: weights.into(),
            index: index.into(),
        })
    }
}

/// Source of the palette embedding for composition blocks.
pub enum Conditioner<T: Real> {
    /// Factored form: task embeddings plus one [`LevelMix`] per pyramid level.
    Factored {
        e: Var,
        levels: Vec<LevelMix<T>>,
        cache: Vec<Option<Var>>,
    },
    /// Materialized `E` per level, `N×N_w×h×w`.
    Dense { levels: Vec<Var> },
}

impl<T: Real> Conditioner<T> {
    pub fn factored(e: Var, palettes: &[TaskPalette], k: usize, levels: usize) -> Result<Self> {
        let p = palettes.first().ok_or_else(|| CtError::InvalidArgument("no palettes".into()))?;
        let mixes = (0..levels)
            .map(|i| LevelMix::new(palettes, k, (p.h >> i).max(1), (p.w >> i).max(1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioner::Factored {
            e,
            cache: vec![None; levels],
            levels: mixes,
        })
    }

    /// Scale and shift maps of block `name` at pyramid `level`, each `N×C×h×w`.
    pub fn maps(&mut self, f: &mut Forward<T>, name: &str, level: usize) -> Result<(Var, Var)> {
        let sw = f.param(&format!("{name}.shared.w"))?;
        let sb = f.param(&format!("{name}.shared.b"))?;
        let gw = f.param(&format!("{name}.gamma.w"))?;
        let gb = f.param(&format!("{name}.gamma.b"))?;
        let bw = f.param(&format!("{name}.beta.w"))?;
        let bb = f.param(&format!("{name}.beta.b"))?;
        let (rows, index, n, h, w) = match self {
            Conditioner::Factored { e, levels, cache } => {
                let mix = levels.get(level).ok_or_else(|| CtError::InvalidArgument(format!("no pyramid level {level}")))?;
                let rows = match cache[level] {
                    Some(v) => v,
                    None => {
                        let v = f.g.mix_rows(*e, mix.weights.clone(), mix.rows)?;
                        cache[level] = Some(v);
                        v
                    }
                };
                (rows, mix.index.clone(), mix.n, mix.h, mix.w)
            }
            Conditioner::Dense { levels } => {
                let el = *levels.get(level).ok_or_else(|| CtError::InvalidArgument(format!("no pyramid level {level}")))?;
                let s = f.g.shape(el);
                let rows = f.g.to_columns(el)?;
                let index: Arc<[u32]> = (0..(s.n * s.plane()) as u32).collect();
                (rows, index, s.n, s.h, s.w)
            }
        };
        let s = f.g.linear(rows, sw, Some(sb))?;
        let s = f.lrelu(s)?;
        let gamma = f.g.linear(s, gw, Some(gb))?;
        let beta = f.g.linear(s, bw, Some(bb))?;
        let gamma = f.g.gather_columns(gamma, index.clone(), n, h, w)?;
        let beta = f.g.gather_columns(beta, index, n, h, w)?;
        Ok((gamma, beta))
    }
}

/// One decoder unit: feature convolution, normalization and, for conditioned
/// blocks, the task-dependent affine maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kernel: usize,
    pub in_c: usize,
    pub out_c: usize,
    /// Pyramid level of the block's output resolution.
    pub level: usize,
    pub activation: bool,
}

impl BlockSpec {
    /// Parameters of a composition block; `n_w` is the embedding width.
    pub fn init_conditioned<T: Real>(&self, n_w: usize, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.init_feat(params, rng);
        let n = &self.name;
        params.insert(format!("{n}.shared.w"), init_weight(Shape::matrix(n_w, n_w), n_w, rng));
        params.insert(format!("{n}.shared.b"), Tensor::zeros(Shape::matrix(n_w, 1)));
        params.insert(format!("{n}.gamma.w"), Tensor::zeros(Shape::matrix(self.out_c, n_w)));
        params.insert(format!("{n}.gamma.b"), Tensor::full(Shape::matrix(self.out_c, 1), T::one()));
        params.insert(format!("{n}.beta.w"), Tensor::zeros(Shape::matrix(self.out_c, n_w)));
        params.insert(format!("{n}.beta.b"), Tensor::zeros(Shape::matrix(self.out_c, 1)));
    }

    /// Parameters of a plain block with per-channel affine normalization.
    pub fn init_plain<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        self.init_feat(params, rng);
        let n = &self.name;
        params.insert(format!("{n}.bn.gamma"), Tensor::full(Shape::matrix(self.out_c, 1), T::one()));
        params.insert(format!("{n}.bn.beta"), Tensor::zeros(Shape::matrix(self.out_c, 1)));
    }

    fn init_feat<T: Real>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        let n = &self.name;
        let fan = self.in_c * self.kernel * self.kernel;
        params.insert(
            format!("{n}.feat.w"),
            init_weight(Shape::new(self.out_c, self.in_c, self.kernel, self.kernel), fan, rng),
        );
        params.insert(format!("{n}.feat.b"), Tensor::zeros(Shape::matrix(self.out_c, 1)));
        params.insert(format!("{n}.running_mu"), Tensor::zeros(Shape::matrix(self.out_c, 1)));
        params.insert(format!("{n}.running_var"), Tensor::full(Shape::matrix(self.out_c, 1), T::one()));
    }
}

/// `act(gamma ⊙ (h_c − mu)/(sigma + eps) + beta)` with `h_c` the block's feature conv of `h`.
pub fn composition_block<T: Real>(f: &mut Forward<T>, spec: &BlockSpec, h: Var, cond: &mut Conditioner<T>) -> Result<Var> {
    let hc = f.conv(&format!("{}.feat", spec.name), h, 1)?;
    let hn = f.norm(&spec.name, hc)?;
    let (gamma, beta) = cond.maps(f, &spec.name, spec.level)?;
    let hs = f.g.shape(hn);
    let gs = f.g.shape(gamma);
    if (gs.h, gs.w) != (hs.h, hs.w) {
        return Err(shape_err("composition_block", hs, gs));
    }
    let y = f.g.modulate(hn, gamma, beta)?;
    if spec.activation {
        f.lrelu(y)
    } else {
        Ok(y)
    }
}

/// Same unit without task conditioning.
pub fn plain_block<T: Real>(f: &mut Forward<T>, spec: &BlockSpec, h: Var) -> Result<Var> {
    let hc = f.conv(&format!("{}.feat", spec.name), h, 1)?;
    let hn = f.norm(&spec.name, hc)?;
    let g = f.param(&format!("{}.bn.gamma", spec.name))?;
    let b = f.param(&format!("{}.bn.beta", spec.name))?;
    let y = f.g.channel_affine(hn, g, b)?;
    if spec.activation {
        f.lrelu(y)
    } else {
        Ok(y)
    }
}
