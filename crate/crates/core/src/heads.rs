//! Output-space task embedding and per-task losses.
//!
//! Every task is read from the same 3-channel output `O`. Class tasks decode
//! to the nearest anchor, binary tasks average per-channel sigmoids and
//! normals are the normalized 3-vector. Losses are evaluated per pixel in
//! `f64` together with their gradient w.r.t. the three output channels and
//! enter the tape through [`Graph::precomputed`].

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{CtError, Result};
use crate::palette::{Task, TaskPalette, MAX_TASKS};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AnchorRecord {
    id: usize,
    name: String,
    value: [u16; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AnchorFile {
    task: String,
    scale: f64,
    anchors: Vec<AnchorRecord>,
}

/// Fixed class anchors in the output space, already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct AnchorTable {
    pub task: String,
    pub names: Vec<String>,
    pub anchors: Vec<[f64; 3]>,
}

impl AnchorTable {
    pub fn from_json(s: &str) -> Result<Self> {
        let f: AnchorFile = serde_json::from_str(s)?;
        if f.scale <= 0.0 {
            return Err(CtError::Format("anchor scale must be positive".into()));
        }
        let mut names = Vec::with_capacity(f.anchors.len());
        let mut anchors = Vec::with_capacity(f.anchors.len());
        for (i, a) in f.anchors.iter().enumerate() {
            if a.id != i {
                return Err(CtError::Format(format!("anchor ids must be 0..C in order, got {} at {i}", a.id)));
            }
            let v = a.value.map(|x| x as f64 / f.scale);
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(CtError::Format(format!("anchor {i} outside [0, 1] after scaling")));
            }
            if anchors.contains(&v) {
                return Err(CtError::Format(format!("anchor {i} duplicates an earlier row")));
            }
            names.push(a.name.clone());
            anchors.push(v);
        }
        if anchors.is_empty() {
            return Err(CtError::Format("empty anchor table".into()));
        }
        Ok(Self { task: f.task, names, anchors })
    }

    pub fn semseg() -> &'static AnchorTable {
        static T: OnceLock<AnchorTable> = OnceLock::new();
        T.get_or_init(|| AnchorTable::from_json(include_str!("../resources/semseg_anchors.json")).expect("bundled table"))
    }

    pub fn parts() -> &'static AnchorTable {
        static T: OnceLock<AnchorTable> = OnceLock::new();
        T.get_or_init(|| AnchorTable::from_json(include_str!("../resources/parts_anchors.json")).expect("bundled table"))
    }

    pub fn for_task(task: Task) -> Option<&'static AnchorTable> {
        match task {
            Task::SemSeg => Some(Self::semseg()),
            Task::Parts => Some(Self::parts()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchor `i` as 8-bit RGB.
    pub fn rgb(&self, i: usize) -> [u8; 3] {
        self.anchors[i].map(|v| (v * 255.0).round() as u8)
    }
}

fn dist(o: [f64; 3], a: [f64; 3]) -> f64 {
    ((o[0] - a[0]).powi(2) + (o[1] - a[1]).powi(2) + (o[2] - a[2]).powi(2)).sqrt()
}

pub fn anchor_scores(o: [f64; 3], table: &AnchorTable, eps: f64) -> Vec<f64> {
    table.anchors.iter().map(|&a| 1.0 / (dist(o, a) + eps)).collect()
}

pub fn anchor_probs(l: &[f64]) -> Vec<f64> {
    crate::autodiff::softmax(l)
}

/// Nearest anchor; ties go to the lowest index.
pub fn decode_class(o: [f64; 3], table: &AnchorTable) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &a) in table.anchors.iter().enumerate() {
        let d = (o[0] - a[0]).powi(2) + (o[1] - a[1]).powi(2) + (o[2] - a[2]).powi(2);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub const P_MIN: f64 = 1e-12;

pub fn focal_loss(probs: &[f64], target: usize, gamma: f64) -> f64 {
    let p = probs[target].max(P_MIN);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Loss value of one pixel and its gradient w.r.t. the three output channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLoss {
    pub value: f64,
    pub grad: [f64; 3],
}

/// Focal loss over anchor probabilities, differentiated through the scores.
///
/// `log p_t` comes from a log-softmax so it stays finite. The clamp at
/// [`P_MIN`] bounds the reported value only: the gradient is that of the
/// unclamped expression, otherwise an output sitting on a wrong anchor would
/// receive no signal at all.
pub fn anchor_focal(o: [f64; 3], table: &AnchorTable, eps: f64, target: usize, gamma: f64) -> PixelLoss {
    let c = table.len();
    let mut d = vec![0.0; c];
    let mut l = vec![0.0; c];
    for i in 0..c {
        d[i] = dist(o, table.anchors[i]);
        l[i] = 1.0 / (d[i] + eps);
    }
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
    let lse = m + z.ln();
    let s = l[target] - lse;
    let p = s.exp();
    let q = 1.0 - p;
    let value = -q.powf(gamma) * s.max(P_MIN.ln());
    let focal_term = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p * s };
    let dl_ds = focal_term - q.powf(gamma);
    let mut grad = [0.0; 3];
    for i in 0..c {
        let pi = (l[i] - lse).exp();
        let dl_dli = dl_ds * (if i == target { 1.0 } else { 0.0 } - pi);
        if d[i] > 0.0 {
            // dl_i/do = -(o - a_i) / (d_i (d_i + eps)^2)
            let k = -dl_dli * l[i] * l[i] / d[i];
            for j in 0..3 {
                grad[j] += k * (o[j] - table.anchors[i][j]);
            }
        }
    }
    PixelLoss { value, grad }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on each channel's sigmoid, averaged over channels.
pub fn weighted_bce3(o: [f64; 3], target: bool, w_pos: f64, w_neg: f64) -> PixelLoss {
    let mut value = 0.0;
    let mut grad = [0.0; 3];
    for j in 0..3 {
        let x = o[j];
        if target {
            value -= w_pos * log_sigmoid(x);
            grad[j] = w_pos * (sigmoid(x) - 1.0) / 3.0;
        } else {
            value -= w_neg * log_sigmoid(-x);
            grad[j] = w_neg * sigmoid(x) / 3.0;
        }
    }
    PixelLoss { value: value / 3.0, grad }
}

pub fn edge_loss(o: [f64; 3], target: bool, w: &LossWeights) -> PixelLoss {
    weighted_bce3(o, target, w.edge_pos, w.edge_neg)
}

/// Inverse-frequency class weights `(w+, w-)` for a positive fraction `q`.
pub fn saliency_weights(q: f64) -> (f64, f64) {
    if q <= 0.0 || q >= 1.0 || !q.is_finite() {
        return (0.5, 0.5);
    }
    let (a, b) = (1.0 / q, 1.0 / (1.0 - q));
    (a / (a + b), b / (a + b))
}

pub fn saliency_loss(o: [f64; 3], target: bool, q: f64) -> PixelLoss {
    let (wp, wn) = saliency_weights(q);
    weighted_bce3(o, target, wp, wn)
}

pub const NORM_MIN: f64 = 1e-8;

/// `1 - cos(o, y)` with `‖o‖` clamped below at [`NORM_MIN`].
pub fn normals_loss(o: [f64; 3], y: [f64; 3]) -> PixelLoss {
    let raw = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    let yn = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt().max(NORM_MIN);
    let n = raw.max(NORM_MIN);
    let dot = o[0] * y[0] + o[1] * y[1] + o[2] * y[2];
    let cos = dot / (n * yn);
    let mut grad = [0.0; 3];
    for j in 0..3 {
        grad[j] = if raw > NORM_MIN {
            -(y[j] / (n * yn) - dot * o[j] / (n * n * n * yn))
        } else {
            -y[j] / (n * yn)
        };
    }
    PixelLoss { value: 1.0 - cos, grad }
}

/// Probability of a binary task: mean of the three channel sigmoids.
pub fn binary_prob(o: [f64; 3]) -> f64 {
    (sigmoid(o[0]) + sigmoid(o[1]) + sigmoid(o[2])) / 3.0
}

/// Unit normal read from the output; the zero vector maps to `+z`.
pub fn normal_vector(o: [f64; 3]) -> [f64; 3] {
    let n = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    if n <= NORM_MIN {
        [0.0, 0.0, 1.0]
    } else {
        o.map(|v| v / n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Indexed by task id.
    pub lambda: [f64; MAX_TASKS],
    pub focal_gamma: f64,
    pub edge_pos: f64,
    pub edge_neg: f64,
    pub eps_anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        let mut lambda = [0.0; MAX_TASKS];
        lambda[Task::Edges as usize] = 50.0;
        lambda[Task::SemSeg as usize] = 3.0;
        lambda[Task::Parts as usize] = 4.0;
        lambda[Task::Normals as usize] = 4.0;
        lambda[Task::Saliency as usize] = 8.0;
        Self {
            lambda,
            focal_gamma: 2.0,
            edge_pos: 0.95,
            edge_neg: 0.05,
            eps_anchor: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.lambda.iter().chain([&self.edge_pos, &self.edge_neg, &self.eps_anchor]);
        if all.clone().any(|v| !(*v > 0.0) || !v.is_finite()) || self.focal_gamma < 0.0 {
            return Err(CtError::InvalidArgument("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Dense per-task supervision for a batch, flat `n·H·W` indexing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub semseg: Vec<u8>,
    pub parts: Vec<u8>,
    pub edges: Vec<u8>,
    pub saliency: Vec<u8>,
    pub normals: Vec<[f32; 3]>,
    /// Validity per task id, each `n·H·W`.
    pub valid: [Vec<bool>; MAX_TASKS],
}

impl LabelSet {
    pub fn empty(n: usize, h: usize, w: usize) -> Self {
        let m = n * h * w;
        Self {
            n,
            h,
            w,
            semseg: vec![0; m],
            parts: vec![0; m],
            edges: vec![0; m],
            saliency: vec![0; m],
            normals: vec![[0.0, 0.0, 1.0]; m],
            valid: std::array::from_fn(|_| vec![false; m]),
        }
    }

    pub fn check(&self) -> Result<()> {
        let m = self.n * self.h * self.w;
        let lens = [self.semseg.len(), self.parts.len(), self.edges.len(), self.saliency.len(), self.normals.len()];
        if lens.into_iter().chain(self.valid.iter().map(|v| v.len())).any(|l| l != m) {
            return Err(CtError::InvalidArgument("label arrays do not match n·H·W".into()));
        }
        for (i, n) in self.normals.iter().enumerate() {
            if self.valid[Task::Normals as usize][i] {
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(CtError::InvalidArgument(format!("normal label {i} is not unit length")));
                }
            }
        }
        Ok(())
    }

    /// Labels of items `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> LabelSet {
        let p = self.h * self.w;
        let pick = |v: &[u8]| idx.iter().flat_map(|&i| v[i * p..(i + 1) * p].iter().copied()).collect::<Vec<_>>();
        LabelSet {
            n: idx.len(),
            h: self.h,
            w: self.w,
            semseg: pick(&self.semseg),
            parts: pick(&self.parts),
            edges: pick(&self.edges),
            saliency: pick(&self.saliency),
            normals: idx.iter().flat_map(|&i| self.normals[i * p..(i + 1) * p].iter().copied()).collect(),
            valid: std::array::from_fn(|t| idx.iter().flat_map(|&i| self.valid[t][i * p..(i + 1) * p].iter().copied()).collect()),
        }
    }
}

/// Read access to labels; the loss only goes through this trait so that
/// accesses can be audited.
pub trait LabelAccess {
    fn dims(&self) -> (usize, usize, usize);
    fn valid(&self, task: Task, i: usize) -> bool;
    /// Class id or binary value of a non-normals task.
    fn class(&self, task: Task, i: usize) -> u8;
    fn normal(&self, i: usize) -> [f32; 3];
}

impl LabelAccess for LabelSet {
    fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }
    fn valid(&self, task: Task, i: usize) -> bool {
        self.valid[task as usize][i]
    }
    fn class(&self, task: Task, i: usize) -> u8 {
        match task {
            Task::SemSeg => self.semseg[i],
            Task::Parts => self.parts[i],
            Task::Edges => self.edges[i],
            Task::Saliency => self.saliency[i],
            Task::Normals => panic!("normals have no class label"),
        }
    }
    fn normal(&self, i: usize) -> [f32; 3] {
        self.normals[i]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTerm {
    /// Mean pixel loss over the task's mask.
    pub mean: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub per_task: [TaskTerm; MAX_TASKS],
}

/// Value, `∂L/∂O` and per-task terms of the masked composite loss.
pub fn composite_loss_raw<T: Real, L: LabelAccess>(
    o: &Tensor<T>,
    labels: &L,
    palettes: &[TaskPalette],
    k: usize,
    w: &LossWeights,
) -> Result<(f64, Vec<T>, LossTerms)> {
    let s = o.shape();
    let (n, h, wd) = labels.dims();
    if s != Shape::new(n, 3, h, wd) || palettes.len() != n || palettes.iter().any(|p| p.h != h || p.w != wd) {
        return Err(CtError::Shape {
            op: "composite_loss",
            left: format!("{s:?}"),
            right: format!("{n}×3×{h}×{wd} with {} palettes", palettes.len()),
        });
    }
    if k == 0 || k > MAX_TASKS {
        return Err(CtError::InvalidArgument(format!("K={k} out of range")));
    }
    let plane = h * wd;
    let od = o.data();
    let px = |b: usize, p: usize| -> [f64; 3] { [0, 1, 2].map(|c| od[(b * 3 + c) * plane + p].f64()) };
    let task_at = |b: usize, p: usize| -> Result<Task> {
        let id = palettes[b].cells[p] as usize;
        if id >= k {
            return Err(CtError::Palette(format!("task id {id} at item {b}, pixel {p} with K={k}")));
        }
        Ok(Task::ALL[id])
    };

    // saliency class balance over the requested, labelled pixels of the batch
    let mut sal_pos = 0usize;
    let mut sal_all = 0usize;
    for b in 0..n {
        for p in 0..plane {
            let i = b * plane + p;
            if task_at(b, p)? == Task::Saliency && labels.valid(Task::Saliency, i) {
                sal_all += 1;
                sal_pos += (labels.class(Task::Saliency, i) != 0) as usize;
            }
        }
    }
    let q = if sal_all > 0 { sal_pos as f64 / sal_all as f64 } else { 0.5 };

    let mut sums = [0.0f64; MAX_TASKS];
    let mut counts = [0usize; MAX_TASKS];
    let mut pix_grad = vec![[0.0f64; 3]; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let i = b * plane + p;
            let task = task_at(b, p)?;
            if !labels.valid(task, i) {
                continue;
            }
            let ov = px(b, p);
            let pl = match task {
                Task::SemSeg | Task::Parts => {
                    let table = AnchorTable::for_task(task).expect("class task");
                    let c = labels.class(task, i) as usize;
                    if c >= table.len() {
                        return Err(CtError::InvalidArgument(format!("{task} label {c} out of range")));
                    }
                    anchor_focal(ov, table, w.eps_anchor, c, w.focal_gamma)
                }
                Task::Edges => edge_loss(ov, labels.class(task, i) != 0, w),
                Task::Saliency => saliency_loss(ov, labels.class(task, i) != 0, q),
                Task::Normals => normals_loss(ov, labels.normal(i).map(|v| v as f64)),
            };
            sums[task as usize] += pl.value;
            counts[task as usize] += 1;
            pix_grad[i] = pl.grad;
        }
    }

    let mut terms = LossTerms::default();
    let mut scale = [0.0f64; MAX_TASKS];
    for t in 0..MAX_TASKS {
        if counts[t] > 0 {
            terms.per_task[t] = TaskTerm {
                mean: sums[t] / counts[t] as f64,
                pixels: counts[t],
            };
            terms.total += w.lambda[t] * terms.per_task[t].mean;
            scale[t] = w.lambda[t] / counts[t] as f64;
        }
    }
    let mut grad = vec![T::zero(); s.numel()];
    for b in 0..n {
        for p in 0..plane {
            let i = b * plane + p;
            let tid = palettes[b].cells[p] as usize;
            for c in 0..3 {
                grad[(b * 3 + c) * plane + p] = T::of(pix_grad[i][c] * scale[tid]);
            }
        }
    }
    if !terms.total.is_finite() {
        return Err(CtError::NonFinite("composite loss".into()));
    }
    Ok((terms.total, grad, terms))
}

/// Masked composite loss as a scalar node on the tape.
pub fn composite_loss<T: Real, L: LabelAccess>(
    g: &mut Graph<T>,
    o: Var,
    labels: &L,
    palettes: &[TaskPalette],
    k: usize,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let (value, grad, terms) = composite_loss_raw(g.value(o), labels, palettes, k, w)?;
    let v = g.precomputed(o, T::of(value), grad)?;
    Ok((v, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::palette::TaskId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundled_tables_match_published_values() {
        let s = AnchorTable::semseg();
        assert_eq!(s.len(), 21);
        assert_eq!(s.rgb(9), [0, 128, 192]);
        assert_eq!(s.rgb(20), [128, 128, 192]);
        assert_eq!(s.names[16], "TV monitor");
        let p = AnchorTable::parts();
        assert_eq!(p.len(), 7);
        assert_eq!(p.rgb(4), [0, 255, 255]);
        assert_eq!(p.anchors[1], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let j = r#"{"task":"x","scale":255,"anchors":[{"id":0,"name":"a","value":[1,2,3]},{"id":1,"name":"b","value":[1,2,3]}]}"#;
        assert!(AnchorTable::from_json(j).is_err());
    }

    #[test]
    fn score_examples() {
        let p = AnchorTable::parts();
        let eps = 1e-3;
        let o = [0.0, 0.0, 100.0 / 255.0];
        let l = anchor_scores(o, p, eps);
        assert!((l[0] - 1.0 / (100.0 / 255.0 + eps)).abs() < 1e-9);
        assert!((l[1] - 1.0 / (155.0 / 255.0 + eps)).abs() < 1e-9);
        assert_eq!(decode_class(o, p), 0);
        let on = anchor_scores(p.anchors[3], p, eps);
        assert!((on[3] - 1.0 / eps).abs() < 1e-9);
        assert!(on.iter().enumerate().all(|(i, &v)| i == 3 || v < on[3]));
        let mid = [0.0, 0.0, 0.5];
        let l = anchor_scores(mid, p, eps);
        assert!((l[0] - l[1]).abs() < 1e-12);
        let pr = anchor_probs(&l);
        assert!((pr[0] - pr[1]).abs() < 1e-12);
        assert_eq!(decode_class(mid, p), 0);
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(&[0.5, 0.5], 0, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal_loss(&[0.3, 0.7], 1, 0.0) + 0.7f64.ln()).abs() < 1e-12);
        assert_eq!(focal_loss(&[0.0, 1.0], 1, 2.0), 0.0);
        assert!(focal_loss(&[0.0, 1.0], 0, 2.0).is_finite());
        for p in [0.01, 0.2, 0.6, 0.99] {
            assert!(focal_loss(&[p, 1.0 - p], 0, 2.0) <= focal_loss(&[p, 1.0 - p], 0, 0.0));
        }
    }

    #[test]
    fn binary_and_normal_examples() {
        let w = LossWeights::default();
        let l = edge_loss([0.0; 3], true, &w);
        assert!((l.value - 0.95 * 2f64.ln()).abs() < 1e-12);
        let l = edge_loss([0.0; 3], false, &w);
        assert!((l.value - 0.05 * 2f64.ln()).abs() < 1e-12);
        assert!(edge_loss([60.0; 3], true, &w).value < 1e-20);
        assert_eq!(saliency_weights(0.5), (0.5, 0.5));
        let (a, b) = saliency_weights(0.25);
        assert!((a - 0.75).abs() < 1e-12 && (b - 0.25).abs() < 1e-12);
        assert_eq!(saliency_weights(0.0), (0.5, 0.5));
        assert!(saliency_loss([-60.0; 3], false, 0.3).value < 1e-20);
        let y = [0.0, 0.6, 0.8];
        assert!(normals_loss([0.0, 1.2, 1.6], y).value.abs() < 1e-12);
        assert!((normals_loss([0.0, -0.6, -0.8], y).value - 2.0).abs() < 1e-12);
        assert!((normals_loss([1.0, 0.0, 0.0], y).value - 1.0).abs() < 1e-12);
        assert!((normals_loss([0.0; 3], y).value - 1.0).abs() < 1e-12);
    }

    fn numeric(f: impl Fn([f64; 3]) -> f64, o: [f64; 3]) -> [f64; 3] {
        let h = 1e-6;
        [0, 1, 2].map(|j| {
            let mut a = o;
            let mut b = o;
            a[j] += h;
            b[j] -= h;
            (f(a) - f(b)) / (2.0 * h)
        })
    }

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-4 * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn pixel_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = LossWeights::default();
        for _ in 0..200 {
            let o = [0, 1, 2].map(|_| rng.gen_range(-0.5..1.5));
            let y = normal_vector([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)));
            let c = rng.gen_range(0..7);
            let parts = AnchorTable::parts();
            let f = anchor_focal(o, parts, w.eps_anchor, c, 2.0);
            if f.value < -P_MIN.ln() * 0.99 {
                assert!(close(f.grad, numeric(|o| anchor_focal(o, parts, w.eps_anchor, c, 2.0).value, o)));
            }
            let e = edge_loss(o, c % 2 == 0, &w);
            assert!(close(e.grad, numeric(|o| edge_loss(o, c % 2 == 0, &w).value, o)));
            let nl = normals_loss(o, y);
            assert!(close(nl.grad, numeric(|o| normals_loss(o, y).value, o)));
        }
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> LabelSet {
        let mut l = LabelSet::empty(n, h, w);
        for i in 0..n * h * w {
            l.semseg[i] = rng.gen_range(0..21);
            l.parts[i] = rng.gen_range(0..7);
            l.edges[i] = rng.gen_range(0..2);
            l.saliency[i] = rng.gen_range(0..2);
            l.normals[i] = normal_vector([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).map(|v| v as f32);
            for t in 0..MAX_TASKS {
                l.valid[t][i] = rng.gen_bool(0.9);
            }
        }
        l
    }

    #[test]
    fn uniform_palette_isolates_one_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = random_labels(&mut rng, 2, 4, 5);
        let o = Tensor::from_fn(Shape::new(2, 3, 4, 5), |_, _, _, _| rng.gen_range(-1.0f64..1.0));
        let w = LossWeights::default();
        for t in 0..5 {
            let pal = vec![TaskPalette::uniform(4, 5, TaskId(t)); 2];
            let (v, _, terms) = composite_loss_raw(&o, &labels, &pal, 5, &w).unwrap();
            assert!((v - w.lambda[t as usize] * terms.per_task[t as usize].mean).abs() < 1e-12);
            for u in 0..5 {
                assert_eq!(terms.per_task[u].pixels == 0, u != t as usize);
            }
        }
    }

    #[test]
    fn region_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, wd) = (4, 6);
        let labels = random_labels(&mut rng, 1, h, wd);
        let o = Tensor::from_fn(Shape::new(1, 3, h, wd), |_, _, _, _| rng.gen_range(-1.0f64..1.0));
        let w = LossWeights::default();
        let mut pal = TaskPalette::uniform(h, wd, TaskId(1));
        for y in 0..h {
            for x in 3..wd {
                pal.set(y, x, TaskId(3));
            }
        }
        let (v, _, _) = composite_loss_raw(&o, &labels, &[pal.clone()], 5, &w).unwrap();
        // each region alone, with the other region marked invalid
        let mut sum = 0.0;
        for (t, cols) in [(1u8, 0..3), (3u8, 3..wd)] {
            let mut l = labels.clone();
            for y in 0..h {
                for x in 0..wd {
                    if !cols.contains(&x) {
                        l.valid[t as usize][y * wd + x] = false;
                    }
                }
            }
            let (vt, _, _) = composite_loss_raw(&o, &l, &[TaskPalette::uniform(h, wd, TaskId(t))], 5, &w).unwrap();
            sum += vt;
        }
        assert!((v - sum).abs() < 1e-10);
    }

    #[test]
    fn composite_loss_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = random_labels(&mut rng, 2, 3, 4);
        let pal: Vec<TaskPalette> = (0..2)
            .map(|_| TaskPalette::from_cells(3, 4, (0..12).map(|_| rng.gen_range(0..5)).collect()).unwrap())
            .collect();
        let o = Tensor::from_fn(Shape::new(2, 3, 3, 4), |_, _, _, _| rng.gen_range(0.1f64..0.9));
        let w = LossWeights::default();
        let r = grad_check(
            |g, p| Ok(composite_loss(g, p[0], &labels, &pal, 5, &w)?.0),
            &[o],
            1e-3,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn out_of_range_palette_is_an_error() {
        let labels = LabelSet::empty(1, 2, 2);
        let o = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        let pal = TaskPalette::uniform(2, 2, TaskId(4));
        assert!(composite_loss_raw(&o, &labels, &[pal], 3, &LossWeights::default()).is_err());
    }
}
