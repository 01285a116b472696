//! Evaluation metrics and the multi-task performance drop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};
use crate::heads::{binary_prob, decode_class, normal_vector, AnchorTable, LabelAccess};
use crate::palette::{Task, TaskPalette, MAX_TASKS};
use crate::tensor::{Real, Tensor};

/// Threshold grid shared by saliency and edge evaluation: 0.05, 0.10, ..., 0.95.
pub fn thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Pooled confusion counts, `gt × pred`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean IoU over classes that occur in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0;
        for i in 0..c {
            let gt_i: u64 = self.counts[i * c..(i + 1) * c].iter().sum();
            if gt_i == 0 {
                continue;
            }
            let pred_i: u64 = (0..c).map(|g| self.counts[g * c + i]).sum();
            let tp = self.counts[i * c + i];
            sum += tp as f64 / (gt_i + pred_i - tp) as f64;
            present += 1;
        }
        (present > 0).then(|| sum / present as f64)
    }
}

pub fn miou(pred: &[u8], gt: &[u8], valid: &[bool], classes: usize) -> Option<f64> {
    let mut cm = Confusion::new(classes);
    for i in 0..gt.len() {
        if valid[i] {
            cm.add(gt[i] as usize, (pred[i] as usize).min(classes - 1));
        }
    }
    cm.miou()
}

/// Per-threshold binary confusion for saliency.
#[derive(Clone, Debug)]
pub struct SaliencyAccumulator {
    thresholds: Vec<f64>,
    cms: Vec<Confusion>,
}

impl Default for SaliencyAccumulator {
    fn default() -> Self {
        let thresholds = thresholds();
        let cms = vec![Confusion::new(2); thresholds.len()];
        Self { thresholds, cms }
    }
}

impl SaliencyAccumulator {
    pub fn add(&mut self, prob: f64, gt: bool) {
        for (t, cm) in self.thresholds.iter().zip(&mut self.cms) {
            cm.add(gt as usize, (prob > *t) as usize);
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.cms.iter().filter_map(Confusion::miou).reduce(f64::max)
    }
}

pub fn saliency_max_miou(prob: &[f64], gt: &[u8], valid: &[bool]) -> Option<f64> {
    let mut acc = SaliencyAccumulator::default();
    for i in 0..gt.len() {
        if valid[i] {
            acc.add(prob[i], gt[i] != 0);
        }
    }
    acc.value()
}

/// Angle between two directions; `atan2` keeps it accurate near 0° and 180°
/// and independent of the vector lengths.
pub fn angular_error_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let dot = pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2];
    let cross = [
        pred[1] * gt[2] - pred[2] * gt[1],
        pred[2] * gt[0] - pred[0] * gt[2],
        pred[0] * gt[1] - pred[1] * gt[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

pub fn mean_angular_error(pred: &[[f64; 3]], gt: &[[f64; 3]], valid: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if valid[i] {
            sum += angular_error_deg(pred[i], gt[i]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Pooled boundary precision and recall per threshold, with a one-pixel
/// (8-neighbourhood) matching tolerance. The reported value is the best F
/// over the shared threshold grid.
#[derive(Clone, Debug)]
pub struct BoundaryAccumulator {
    thresholds: Vec<f64>,
    /// `(matched predictions, predictions, matched ground truth, ground truth)`
    counts: Vec<[u64; 4]>,
}

impl Default for BoundaryAccumulator {
    fn default() -> Self {
        let thresholds = thresholds();
        let counts = vec![[0; 4]; thresholds.len()];
        Self { thresholds, counts }
    }
}

impl BoundaryAccumulator {
    /// One `h×w` image; pixels outside `valid` are ignored entirely.
    pub fn add_image(&mut self, prob: &[f64], gt: &[u8], valid: &[bool], h: usize, w: usize) {
        let near = |mask: &dyn Fn(usize) -> bool, y: usize, x: usize| -> bool {
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = yy * w + xx;
                    if valid[j] && mask(j) {
                        return true;
                    }
                }
            }
            false
        };
        let is_gt = |j: usize| gt[j] != 0;
        for (ti, &t) in self.thresholds.iter().enumerate() {
            let is_pred = |j: usize| prob[j] > t;
            let c = &mut self.counts[ti];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !valid[i] {
                        continue;
                    }
                    if is_pred(i) {
                        c[1] += 1;
                        c[0] += near(&is_gt, y, x) as u64;
                    }
                    if is_gt(i) {
                        c[3] += 1;
                        c[2] += near(&is_pred, y, x) as u64;
                    }
                }
            }
        }
    }

    pub fn value(&self) -> Option<f64> {
        if self.counts.first().is_none_or(|c| c[3] == 0) {
            return None;
        }
        let best = self
            .counts
            .iter()
            .map(|c| {
                let p = if c[1] == 0 { 0.0 } else { c[0] as f64 / c[1] as f64 };
                let r = c[2] as f64 / c[3] as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .fold(0.0, f64::max);
        Some(best)
    }
}

pub fn boundary_f(prob: &[f64], gt: &[u8], valid: &[bool], h: usize, w: usize) -> Option<f64> {
    let mut acc = BoundaryAccumulator::default();
    acc.add_image(prob, gt, valid, h, w);
    acc.value()
}

/// Average signed relative change of `m` against baseline `b`, in percent.
/// `lower_better[i]` flips the sign of task `i`.
pub fn delta_m(m: &[f64], b: &[f64], lower_better: &[bool]) -> Result<f64> {
    if m.len() != b.len() || m.len() != lower_better.len() || m.is_empty() {
        return Err(CtError::InvalidArgument("delta_m needs equal, non-empty inputs".into()));
    }
    let mut sum = 0.0;
    for i in 0..m.len() {
        if b[i] == 0.0 {
            return Err(CtError::InvalidArgument(format!("baseline value {i} is zero")));
        }
        let sign = if lower_better[i] { -1.0 } else { 1.0 };
        sum += sign * (m[i] - b[i]) / b[i];
    }
    Ok(100.0 * sum / m.len() as f64)
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Edges => "boundary_f",
        Task::SemSeg | Task::Parts => "miou",
        Task::Saliency => "max_miou",
        Task::Normals => "mean_angular_error_deg",
    }
}

pub fn higher_better(task: Task) -> bool {
    task != Task::Normals
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub higher_better: bool,
}

/// Per-task metrics keyed by task name, plus an optional drop versus a baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub tasks: BTreeMap<String, MetricEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_m_pct: Option<f64>,
}

impl MetricsReport {
    pub fn insert(&mut self, task: Task, value: f64) {
        self.tasks.insert(
            task.name().to_string(),
            MetricEntry {
                metric: metric_name(task).into(),
                value,
                higher_better: higher_better(task),
            },
        );
    }

    pub fn get(&self, task: Task) -> Option<f64> {
        self.tasks.get(task.name()).map(|e| e.value)
    }

    /// Drop against `baseline` over the tasks both reports contain.
    pub fn delta_vs(&self, baseline: &MetricsReport) -> Result<f64> {
        let (mut m, mut b, mut d) = (vec![], vec![], vec![]);
        for t in Task::ALL {
            if let (Some(x), Some(y)) = (self.get(t), baseline.get(t)) {
                m.push(x);
                b.push(y);
                d.push(!higher_better(t));
            }
        }
        delta_m(&m, &b, &d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accumulates every task's metric over batches of composite outputs, each
/// task evaluated where the palette requests it and a label is valid.
#[derive(Clone, Debug)]
pub struct Evaluator {
    k: usize,
    semseg: Confusion,
    parts: Confusion,
    saliency: SaliencyAccumulator,
    edges: BoundaryAccumulator,
    normal_sum: f64,
    normal_n: usize,
}

impl Evaluator {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            semseg: Confusion::new(AnchorTable::semseg().len()),
            parts: Confusion::new(AnchorTable::parts().len()),
            saliency: SaliencyAccumulator::default(),
            edges: BoundaryAccumulator::default(),
            normal_sum: 0.0,
            normal_n: 0,
        }
    }

    pub fn add_batch<T: Real, L: LabelAccess>(&mut self, o: &Tensor<T>, labels: &L, palettes: &[TaskPalette]) -> Result<()> {
        let (n, h, w) = labels.dims();
        let s = o.shape();
        if s.n != n || s.c != 3 || s.h != h || s.w != w || palettes.len() != n {
            return Err(CtError::InvalidArgument("evaluator inputs disagree in shape".into()));
        }
        let plane = h * w;
        let od = o.data();
        for b in 0..n {
            let mut edge_prob = vec![0.0; plane];
            let mut edge_valid = vec![false; plane];
            let mut edge_gt = vec![0u8; plane];
            for p in 0..plane {
                let id = palettes[b].cells[p] as usize;
                if id >= self.k {
                    return Err(CtError::Palette(format!("task id {id} with K={}", self.k)));
                }
                let task = Task::ALL[id];
                let i = b * plane + p;
                if !labels.valid(task, i) {
                    continue;
                }
                let ov = [0, 1, 2].map(|c| od[(b * 3 + c) * plane + p].f64());
                match task {
                    Task::SemSeg => self.semseg.add(labels.class(task, i) as usize, decode_class(ov, AnchorTable::semseg())),
                    Task::Parts => self.parts.add(labels.class(task, i) as usize, decode_class(ov, AnchorTable::parts())),
                    Task::Saliency => self.saliency.add(binary_prob(ov), labels.class(task, i) != 0),
                    Task::Normals => {
                        let gt = labels.normal(i).map(|v| v as f64);
                        self.normal_sum += angular_error_deg(normal_vector(ov), gt);
                        self.normal_n += 1;
                    }
                    Task::Edges => {
                        edge_prob[p] = binary_prob(ov);
                        edge_valid[p] = true;
                        edge_gt[p] = labels.class(task, i);
                    }
                }
            }
            if edge_valid.iter().any(|&v| v) {
                self.edges.add_image(&edge_prob, &edge_gt, &edge_valid, h, w);
            }
        }
        Ok(())
    }

    /// Tasks with no evaluated pixels are absent from the report.
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::default();
        let values = [
            (Task::Edges, self.edges.value()),
            (Task::SemSeg, self.semseg.miou()),
            (Task::Parts, self.parts.miou()),
            (Task::Normals, (self.normal_n > 0).then(|| self.normal_sum / self.normal_n as f64)),
            (Task::Saliency, self.saliency.value()),
        ];
        for (t, v) in values.into_iter().take(MAX_TASKS) {
            if let Some(v) = v {
                r.insert(t, v);
            }
        }
        r
    }
}
