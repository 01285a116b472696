//! Procedural scenes with exact dense labels for every task.
//!
//! A scene is a wall/floor background with 2–6 primitives painted back to
//! front: ellipsoid animals, box and ellipsoid vehicles, box and cylinder
//! household objects, and capsule figures with six labelled body parts.
//! Normals come from the analytic surface of each primitive and the image is
//! Lambertian shading under one random light.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classes::*;
use crate::error::{CtError, Result};
use crate::heads::LabelSet;
use crate::palette::{gen_palette, Rule, Task, TaskPalette, MAX_TASKS};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub h: usize,
    pub w: usize,
    /// `1×3×H×W` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub semantic: Vec<u8>,
    pub parts: Vec<u8>,
    /// Unit vectors in camera space: x right, y up, z towards the viewer.
    pub normals: Vec<[f32; 3]>,
    pub edges: Vec<u8>,
    pub saliency: Vec<u8>,
    /// Native label validity per task id.
    pub valid: [Vec<bool>; MAX_TASKS],
}

/// 64-bit mix of a seed with a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn base_color(class: u8) -> [f64; 3] {
    match class {
        CAT => [0.95, 0.55, 0.15],
        DOG => [0.50, 0.30, 0.15],
        HORSE => [0.85, 0.85, 0.80],
        CAR => [0.85, 0.10, 0.10],
        BUS => [0.95, 0.80, 0.10],
        BOAT => [0.15, 0.30, 0.85],
        AEROPLANE => [0.55, 0.75, 0.95],
        CHAIR => [0.55, 0.25, 0.65],
        SOFA => [0.20, 0.60, 0.25],
        BOTTLE => [0.10, 0.75, 0.70],
        TV_MONITOR => [0.12, 0.12, 0.14],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Painter state: per-pixel albedo, normal, class and part.
struct Canvas {
    h: usize,
    w: usize,
    albedo: Vec<[f64; 3]>,
    normal: Vec<[f64; 3]>,
    semantic: Vec<u8>,
    parts: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, albedo: [f64; 3], n: [f64; 3], class: u8, part: u8) {
        let i = y * self.w + x;
        self.albedo[i] = albedo;
        self.normal[i] = normalize(n);
        self.semantic[i] = class;
        self.parts[i] = part;
    }

    /// Pixel centers inside the axis-aligned bounds.
    fn span(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let clamp = |v: f64, m: usize| (v.max(0.0) as usize).min(m);
        (clamp(y0.floor(), self.h)..clamp(y1.ceil() + 1.0, self.h), clamp(x0.floor(), self.w)..clamp(x1.ceil() + 1.0, self.w))
    }

    fn ellipsoid(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, albedo: [f64; 3], class: u8, part: u8) {
        let rz = rx.min(ry);
        let (ys, xs) = self.span(cx - rx, cx + rx, cy - ry, cy + ry);
        for y in ys {
            for x in xs.clone() {
                let u = (x as f64 + 0.5 - cx) / rx;
                let v = (y as f64 + 0.5 - cy) / ry;
                let r2 = u * u + v * v;
                if r2 < 1.0 {
                    let z = (1.0 - r2).sqrt();
                    self.paint(y, x, albedo, [u / rx, -v / ry, z / rz], class, part);
                }
            }
        }
    }

    fn capsule(&mut self, p0: (f64, f64), p1: (f64, f64), r: f64, albedo: [f64; 3], class: u8, part: u8) {
        let (ys, xs) = self.span(p0.0.min(p1.0) - r, p0.0.max(p1.0) + r, p0.1.min(p1.1) - r, p0.1.max(p1.1) + r);
        let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - p0.0) * dx + (py - p0.1) * dy) / len2).clamp(0.0, 1.0);
                let (ox, oy) = (px - (p0.0 + t * dx), py - (p0.1 + t * dy));
                let d2 = (ox * ox + oy * oy) / (r * r);
                if d2 < 1.0 {
                    self.paint(y, x, albedo, [ox / r, -oy / r, (1.0 - d2).sqrt()], class, part);
                }
            }
        }
    }

    /// Box seen from the front with a tilted front face and an upward-facing top band.
    fn boxed(&mut self, x0: f64, y0: f64, bw: f64, bh: f64, tilt: [f64; 2], albedo: [f64; 3], class: u8) {
        let top = bh * 0.22;
        let (ys, xs) = self.span(x0, x0 + bw, y0, y0 + bh);
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px < x0 || px > x0 + bw || py < y0 || py > y0 + bh {
                    continue;
                }
                let n = if py < y0 + top { [tilt[0], 1.0, 0.7] } else { [tilt[0], tilt[1], 1.0] };
                let a = if py < y0 + top { albedo.map(|c| (c * 1.15).min(1.0)) } else { albedo };
                self.paint(y, x, a, n, class, 0);
            }
        }
    }

    /// Upright cylinder: normals rotate around the vertical axis.
    fn cylinder(&mut self, cx: f64, y0: f64, r: f64, ch: f64, albedo: [f64; 3], class: u8) {
        let (ys, xs) = self.span(cx - r, cx + r, y0, y0 + ch);
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let u = (px - cx) / r;
                if u.abs() < 1.0 && py >= y0 && py <= y0 + ch {
                    self.paint(y, x, albedo, [u, 0.0, (1.0 - u * u).sqrt()], class, 0);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

fn draw_person(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (h, w) = (cv.h as f64, cv.w as f64);
    let hp = rng.gen_range(0.55..0.85) * h;
    let cx = rng.gen_range(0.2..0.8) * w;
    let top = rng.gen_range(0.0..(h - hp).max(1.0));
    let skin = jitter(rng, [0.90, 0.72, 0.58], 0.06);
    let shirt = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let pants = [rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(0.2..0.7)];
    let at = |fx: f64, fy: f64| (cx + fx * hp, top + fy * hp);
    let limb = (hp * 0.045).max(1.6);
    let sw = rng.gen_range(-0.06..0.06);
    let legs = rng.gen_range(0.0..0.05);
    for s in [-1.0, 1.0] {
        let hip = at(s * 0.05, 0.53);
        let knee = at(s * (0.07 + legs), 0.75);
        let foot = at(s * (0.08 + legs), 1.0 - limb / hp);
        cv.capsule(hip, knee, limb * 1.15, pants, PERSON, PART_UPPER_LEGS);
        cv.capsule(knee, foot, limb, pants.map(|c| c * 0.85), PERSON, PART_LOWER_LEGS);
    }
    cv.capsule(at(0.0, 0.22), at(0.0, 0.5), hp * 0.095, shirt, PERSON, PART_TORSO);
    for s in [-1.0, 1.0] {
        let shoulder = at(s * 0.1, 0.23);
        let elbow = at(s * (0.16 + sw), 0.38);
        let hand = at(s * (0.19 + 2.0 * sw), 0.53);
        cv.capsule(shoulder, elbow, limb, shirt.map(|c| c * 0.9), PERSON, PART_UPPER_ARMS);
        cv.capsule(elbow, hand, limb * 0.9, skin, PERSON, PART_LOWER_ARMS);
    }
    let (hx, hy) = at(0.0, 0.1);
    cv.ellipsoid(hx, hy, hp * 0.085, hp * 0.1, skin, PERSON, PART_HEAD);
}

fn draw_object(cv: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (h, w) = (cv.h as f64, cv.w as f64);
    let class = match rng.gen_range(0..3) {
        0 => *DRAWN_ANIMALS.choose(rng).unwrap(),
        1 => *DRAWN_VEHICLES.choose(rng).unwrap(),
        _ => *DRAWN_HOUSEHOLD.choose(rng).unwrap(),
    };
    let albedo = jitter(rng, base_color(class), 0.05);
    let tilt = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)];
    let s = rng.gen_range(0.8..1.2) * h.min(w);
    let cx = rng.gen_range(0.15..0.85) * w;
    let cy = rng.gen_range(0.3..0.85) * h;
    match class {
        CAT => cv.ellipsoid(cx, cy, 0.09 * s, 0.08 * s, albedo, class, 0),
        DOG => cv.ellipsoid(cx, cy, 0.16 * s, 0.10 * s, albedo, class, 0),
        HORSE => {
            cv.ellipsoid(cx, cy, 0.2 * s, 0.12 * s, albedo, class, 0);
            cv.ellipsoid(cx + 0.17 * s, cy - 0.12 * s, 0.06 * s, 0.08 * s, albedo, class, 0);
        }
        AEROPLANE => cv.ellipsoid(cx, cy - 0.15 * h, 0.28 * s, 0.06 * s, albedo, class, 0),
        CAR => cv.boxed(cx - 0.16 * s, cy - 0.08 * s, 0.32 * s, 0.16 * s, tilt, albedo, class),
        BUS => cv.boxed(cx - 0.22 * s, cy - 0.14 * s, 0.44 * s, 0.26 * s, tilt, albedo, class),
        BOAT => cv.boxed(cx - 0.2 * s, cy - 0.05 * s, 0.4 * s, 0.1 * s, tilt, albedo, class),
        CHAIR => cv.boxed(cx - 0.07 * s, cy - 0.15 * s, 0.14 * s, 0.3 * s, tilt, albedo, class),
        SOFA => cv.boxed(cx - 0.2 * s, cy - 0.1 * s, 0.4 * s, 0.18 * s, tilt, albedo, class),
        TV_MONITOR => cv.boxed(cx - 0.12 * s, cy - 0.2 * s, 0.24 * s, 0.17 * s, [0.0, 0.0], albedo, class),
        _ => cv.cylinder(cx, cy - 0.16 * s, 0.04 * s, 0.28 * s, albedo, class),
    }
}

/// Boundary oracle: a pixel is an edge when any 8-neighbour has another class.
pub fn boundary_map(semantic: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = semantic[y * w + x];
            'n: for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if semantic[yy * w + xx] != c {
                        out[y * w + x] = 1;
                        break 'n;
                    }
                }
            }
        }
    }
    out
}

pub fn generate_scene(seed: u64, h: usize, w: usize) -> Result<SyntheticScene> {
    if h < 32 || w < 32 {
        return Err(CtError::InvalidArgument(format!("scene size {h}×{w} below 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = h * w;
    let horizon = rng.gen_range(0.45..0.7) * h as f64;
    let wall = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    let floor = [rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45)];
    let floor_n = normalize([0.0, 1.0, rng.gen_range(0.4..0.9)]);
    let mut cv = Canvas {
        h,
        w,
        albedo: vec![[0.0; 3]; m],
        normal: vec![[0.0, 0.0, 1.0]; m],
        semantic: vec![BACKGROUND; m],
        parts: vec![0; m],
    };
    for y in 0..h {
        let below = y as f64 + 0.5 > horizon;
        for x in 0..w {
            let i = y * w + x;
            cv.albedo[i] = if below { floor } else { wall };
            cv.normal[i] = if below { floor_n } else { [0.0, 0.0, 1.0] };
        }
    }
    let count = rng.gen_range(2..=6);
    let person_slot = if rng.gen_bool(0.8) { Some(rng.gen_range(0..count)) } else { None };
    for i in 0..count {
        if Some(i) == person_slot || rng.gen_bool(0.15) {
            draw_person(&mut cv, &mut rng);
        } else {
            draw_object(&mut cv, &mut rng);
        }
    }

    let light = normalize([rng.gen_range(-0.6..0.6), rng.gen_range(0.0..0.8), 1.0]);
    let ambient = rng.gen_range(0.25..0.4);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    let mut normals = Vec::with_capacity(m);
    for i in 0..m {
        let n = cv.normal[i];
        let shade = ambient + (1.0 - ambient) * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        for c in 0..3 {
            let v = cv.albedo[i][c] * shade + rng.gen_range(-0.02..0.02);
            image.data_mut()[c * m + i] = v.clamp(0.0, 1.0) as f32;
        }
        normals.push(n.map(|v| v as f32));
    }
    let edges = boundary_map(&cv.semantic, h, w);
    let saliency = cv.semantic.iter().map(|&c| (c != BACKGROUND) as u8).collect();
    Ok(SyntheticScene {
        h,
        w,
        image,
        semantic: cv.semantic,
        parts: cv.parts,
        normals,
        edges,
        saliency,
        valid: std::array::from_fn(|_| vec![true; m]),
    })
}

impl SyntheticScene {
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.h, self.w);
        fn flip<T: Copy>(v: &[T], h: usize, w: usize) -> Vec<T> {
            (0..h).flat_map(|y| (0..w).rev().map(move |x| (y, x))).map(|(y, x)| v[y * w + x]).collect()
        }
        let mut image = Tensor::zeros(self.image.shape());
        for c in 0..3 {
            let plane = flip(&self.image.data()[c * h * w..(c + 1) * h * w], h, w);
            image.data_mut()[c * h * w..(c + 1) * h * w].copy_from_slice(&plane);
        }
        Self {
            h,
            w,
            image,
            semantic: flip(&self.semantic, h, w),
            parts: flip(&self.parts, h, w),
            normals: flip(&self.normals, h, w).into_iter().map(|n| [-n[0], n[1], n[2]]).collect(),
            edges: flip(&self.edges, h, w),
            saliency: flip(&self.saliency, h, w),
            valid: std::array::from_fn(|t| flip(&self.valid[t], h, w)),
        }
    }
}

/// Labels of `scenes` restricted to each task's palette region.
pub fn sparsify_labels(scenes: &[&SyntheticScene], palettes: &[TaskPalette]) -> Result<LabelSet> {
    let first = scenes.first().ok_or_else(|| CtError::InvalidArgument("no scenes".into()))?;
    let (h, w) = (first.h, first.w);
    if palettes.len() != scenes.len() {
        return Err(CtError::InvalidArgument("one palette per scene is required".into()));
    }
    let mut l = LabelSet::empty(scenes.len(), h, w);
    let plane = h * w;
    for (b, (s, p)) in scenes.iter().zip(palettes).enumerate() {
        if (s.h, s.w) != (h, w) || (p.h, p.w) != (h, w) {
            return Err(CtError::InvalidArgument("scene and palette sizes differ".into()));
        }
        let o = b * plane;
        l.semseg[o..o + plane].copy_from_slice(&s.semantic);
        l.parts[o..o + plane].copy_from_slice(&s.parts);
        l.edges[o..o + plane].copy_from_slice(&s.edges);
        l.saliency[o..o + plane].copy_from_slice(&s.saliency);
        l.normals[o..o + plane].copy_from_slice(&s.normals);
        for (i, &t) in p.cells.iter().enumerate() {
            let t = t as usize;
            if t < MAX_TASKS {
                l.valid[t][o + i] = s.valid[t][i];
            }
        }
    }
    Ok(l)
}

/// Source of training or evaluation scenes.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub seed: u64,
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Draw a new set of scenes every epoch instead of reusing one fixed set.
    #[serde(default)]
    pub fresh_per_epoch: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self::fixed(0, 100, 64, 64)
    }
}

impl DataSpec {
    pub fn fixed(seed: u64, scenes: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            scenes,
            height,
            width,
            fresh_per_epoch: false,
        }
    }

    /// Scenes used in `epoch`.
    pub fn scenes_for_epoch(&self, epoch: usize) -> Result<Vec<SyntheticScene>> {
        let base = if self.fresh_per_epoch { derive_seed(self.seed, 1 << 32 | epoch as u64) } else { self.seed };
        (0..self.scenes)
            .map(|i| generate_scene(derive_seed(base, i as u64), self.height, self.width))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `B×3×H×W`
    pub image: Tensor<f32>,
    pub palettes: Vec<TaskPalette>,
    pub labels: LabelSet,
    pub indices: Vec<usize>,
    pub flipped: bool,
}

/// Assembles one batch from `scenes[idx]`, drawing palettes from `rule`.
/// Flipping is applied after the palettes are drawn and only when no palette
/// requests normals.
pub fn make_batch(scenes: &[SyntheticScene], idx: &[usize], rule: &Rule, k: usize, allow_flip: bool, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut palettes = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &scenes[i];
        palettes.push(gen_palette(rule, s.h, s.w, Some(&s.semantic), k, rng)?);
    }
    let wants_normals = palettes.iter().any(|p| p.contains(Task::Normals.id()));
    let flipped = allow_flip && !wants_normals && rng.gen_bool(0.5);
    let owned: Vec<SyntheticScene>;
    let picked: Vec<&SyntheticScene> = if flipped {
        owned = idx.iter().map(|&i| scenes[i].flip_horizontal()).collect();
        palettes = palettes.iter().map(TaskPalette::flip_horizontal).collect();
        owned.iter().collect()
    } else {
        idx.iter().map(|&i| &scenes[i]).collect()
    };
    let image = Tensor::stack(&picked.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let labels = sparsify_labels(&picked, &palettes)?;
    Ok(Batch {
        image,
        palettes,
        labels,
        indices: idx.to_vec(),
        flipped,
    })
}

/// One epoch of batches in a shuffled order determined by `rng`.
pub fn batch_iter<'a>(
    scenes: &'a [SyntheticScene],
    batch: usize,
    rule: &'a Rule,
    k: usize,
    allow_flip: bool,
    rng: &'a mut ChaCha8Rng,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch == 0 {
        return Err(CtError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |c| make_batch(scenes, &c, rule, k, allow_flip, rng)))
}
