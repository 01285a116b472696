//! Task identifiers, orthogonal task codes, and Task Palette rules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_SEM_CLASSES;
use crate::error::{CtError, Result};
use crate::imageio;

/// Maximum number of tasks; ids follow the canonical order below.
pub const MAX_TASKS: usize = 5;
/// Length of each task's block in a task code.
pub const CODE_BLOCK: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Edges = 0,
    SemSeg = 1,
    Parts = 2,
    Normals = 3,
    Saliency = 4,
}

impl Task {
    pub const ALL: [Task; MAX_TASKS] = [Task::Edges, Task::SemSeg, Task::Parts, Task::Normals, Task::Saliency];

    pub fn id(self) -> TaskId {
        TaskId(self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Edges => "edges",
            Task::SemSeg => "semseg",
            Task::Parts => "parts",
            Task::Normals => "normals",
            Task::Saliency => "saliency",
        }
    }

    pub fn from_id(id: TaskId) -> Option<Task> {
        Task::ALL.get(id.0 as usize).copied()
    }

    /// Tasks `0..k` in canonical order.
    pub fn first(k: usize) -> &'static [Task] {
        &Task::ALL[..k.min(MAX_TASKS)]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = CtError;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .or_else(|| s.parse::<u8>().ok().and_then(|i| Task::from_id(TaskId(i))))
            .ok_or_else(|| CtError::InvalidArgument(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u8);

impl TaskId {
    pub fn new(id: usize, k: usize) -> Result<Self> {
        if id >= k || k > MAX_TASKS {
            return Err(CtError::InvalidArgument(format!("task id {id} out of range for K={k}")));
        }
        Ok(TaskId(id as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Block one-hot code of length `20·K`, scaled to unit norm.
pub fn make_task_code(k: TaskId, num_tasks: usize) -> Result<Vec<f32>> {
    TaskId::new(k.index(), num_tasks)?;
    let mut z = vec![0.0f32; CODE_BLOCK * num_tasks];
    let v = 1.0 / (CODE_BLOCK as f32).sqrt();
    z[k.index() * CODE_BLOCK..(k.index() + 1) * CODE_BLOCK].fill(v);
    Ok(z)
}

/// H×W grid of task ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskPalette {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<u8>,
}

impl TaskPalette {
    pub fn uniform(h: usize, w: usize, task: TaskId) -> Self {
        Self {
            h,
            w,
            cells: vec![task.0; h * w],
        }
    }

    pub fn from_cells(h: usize, w: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(CtError::Palette(format!("{} cells for a {h}×{w} palette", cells.len())));
        }
        Ok(Self { h, w, cells })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> TaskId {
        TaskId(self.cells[y * self.w + x])
    }

    pub fn set(&mut self, y: usize, x: usize, t: TaskId) {
        self.cells[y * self.w + x] = t.0;
    }

    /// Distinct task ids present, ascending.
    pub fn tasks_present(&self) -> Vec<TaskId> {
        let mut seen = [false; 256];
        self.cells.iter().for_each(|&c| seen[c as usize] = true);
        (0..=255u8).filter(|&i| seen[i as usize]).map(TaskId).collect()
    }

    pub fn contains(&self, t: TaskId) -> bool {
        self.cells.contains(&t.0)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for row in self.cells.chunks_exact(self.w) {
            cells.extend(row.iter().rev());
        }
        Self { h: self.h, w: self.w, cells }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        imageio::encode_gray(self.w, self.h, &self.cells)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, cells) = imageio::decode_gray(bytes)?;
        Self::from_cells(h, w, cells)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("palette serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: TaskPalette = serde_json::from_str(s)?;
        Self::from_cells(p.h, p.w, p.cells)
    }
}

/// Accepted palette: histogram of task ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PaletteReport {
    pub histogram: BTreeMap<u8, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PaletteViolation {
    /// `(y, x, value)` of offending cells, at most 64 listed.
    pub cells: Vec<(usize, usize, u8)>,
    pub total: usize,
}

impl fmt::Display for PaletteViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} out-of-range cells", self.total)?;
        if let Some((y, x, v)) = self.cells.first() {
            write!(f, ", first at (y={y}, x={x}) = {v}")?;
        }
        Ok(())
    }
}

pub fn validate_palette(p: &TaskPalette, k: usize) -> std::result::Result<PaletteReport, PaletteViolation> {
    let mut histogram = BTreeMap::new();
    let mut bad = Vec::new();
    let mut total = 0;
    for (i, &c) in p.cells.iter().enumerate() {
        if c as usize >= k {
            total += 1;
            if bad.len() < 64 {
                bad.push((i / p.w, i % p.w, c));
            }
        } else {
            *histogram.entry(c).or_insert(0) += 1;
        }
    }
    if total > 0 {
        Err(PaletteViolation { cells: bad, total })
    } else {
        Ok(PaletteReport { histogram })
    }
}

/// Requested task per semantic class for the first semantic rule.
pub const R2_TABLE: [Task; NUM_SEM_CLASSES] = {
    use Task::*;
    [
        Edges,    // background
        SemSeg,   // cat
        Saliency, // aeroplane
        Normals,  // chair
        Normals,  // potted plant
        SemSeg,   // sheep
        Saliency, // bicycle
        SemSeg,   // cow
        SemSeg,   // bird
        Normals,  // dining table
        Normals,  // sofa
        Saliency, // train
        Saliency, // boat
        SemSeg,   // dog
        Normals,  // bottle
        SemSeg,   // horse
        Normals,  // tv monitor
        Saliency, // bus
        Saliency, // motorbike
        Saliency, // car
        Parts,    // person
    ]
};

/// Requested task per semantic class for the second semantic rule.
pub const R3_TABLE: [Task; NUM_SEM_CLASSES] = {
    use Task::*;
    [
        Edges,    // background
        Saliency, // cat
        Saliency, // aeroplane
        Normals,  // chair
        Saliency, // potted plant
        Saliency, // sheep
        Normals,  // bicycle
        Saliency, // cow
        Saliency, // bird
        Normals,  // dining table
        Normals,  // sofa
        Normals,  // train
        Saliency, // boat
        Saliency, // dog
        Saliency, // bottle
        Saliency, // horse
        Saliency, // tv monitor
        Normals,  // bus
        Normals,  // motorbike
        Normals,  // car
        Parts,    // person
    ]
};

/// Palette-generating rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// Same task everywhere.
    Single { task: TaskId },
    /// Four axis-aligned rectangles around a random center.
    Mosaic {
        #[serde(default)]
        distinct_tasks: bool,
    },
    /// Semantic class lookup, first table.
    R2,
    /// Semantic class lookup, second table.
    R3,
    /// Independent uniform task per pixel.
    Random,
}

impl Rule {
    pub fn needs_semantics(&self) -> bool {
        matches!(self, Rule::R2 | Rule::R3)
    }

    pub fn table(&self) -> Option<&'static [Task; NUM_SEM_CLASSES]> {
        match self {
            Rule::R2 => Some(&R2_TABLE),
            Rule::R3 => Some(&R3_TABLE),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Rule::Single { task } => format!("s{}", task.0),
            Rule::Mosaic { .. } => "r1r".into(),
            Rule::R2 => "r2".into(),
            Rule::R3 => "r3".into(),
            Rule::Random => "rnd".into(),
        }
    }

    /// Parses `s`, `s:<task>`, `s<id>`, `r1r`, `r2`, `r3`, `rnd`.
    pub fn parse(s: &str, single_task: Option<TaskId>) -> Result<Rule> {
        let lower = s.to_ascii_lowercase();
        let (head, arg) = match lower.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (lower.clone(), None),
        };
        if let Some(id) = head.strip_prefix('s').filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit())) {
            let task = id.parse::<Task>()?.id();
            return Ok(Rule::Single { task });
        }
        Ok(match head.as_str() {
            "s" | "single" => {
                let task = match arg {
                    Some(a) => a.parse::<Task>()?.id(),
                    None => single_task.unwrap_or(TaskId(0)),
                };
                Rule::Single { task }
            }
            "r1r" | "mosaic" => Rule::Mosaic { distinct_tasks: false },
            "r2" => Rule::R2,
            "r3" => Rule::R3,
            "rnd" | "random" => Rule::Random,
            _ => return Err(CtError::InvalidArgument(format!("unknown rule `{s}`"))),
        })
    }
}

/// Sampled mosaic split: center in pixel coordinates and the four region tasks
/// `(top-left, top-right, bottom-left, bottom-right)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosaicLayout {
    pub cx: f64,
    pub cy: f64,
    pub tasks: [TaskId; 4],
}

impl MosaicLayout {
    pub fn sample(h: usize, w: usize, k: usize, distinct: bool, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || (distinct && k < 4) {
            return Err(CtError::InvalidArgument(format!("cannot draw mosaic tasks from K={k}")));
        }
        let (wf, hf) = (w as f64, h as f64);
        let cx = rng.gen_range(wf / 4.0..=3.0 * wf / 4.0);
        let cy = rng.gen_range(hf / 4.0..=3.0 * hf / 4.0);
        let mut tasks = [TaskId(0); 4];
        if distinct {
            let picked = rand::seq::index::sample(rng, k, 4);
            for (t, i) in tasks.iter_mut().zip(picked.iter()) {
                *t = TaskId(i as u8);
            }
        } else {
            for t in tasks.iter_mut() {
                *t = TaskId(rng.gen_range(0..k) as u8);
            }
        }
        Ok(Self { cx, cy, tasks })
    }

    /// Region of pixel `(y, x)`; pixel centers at `x + 0.5` are compared with the split.
    pub fn region(&self, y: usize, x: usize) -> usize {
        let right = x as f64 + 0.5 > self.cx;
        let below = y as f64 + 0.5 > self.cy;
        (below as usize) * 2 + right as usize
    }

    pub fn palette(&self, h: usize, w: usize) -> TaskPalette {
        let mut cells = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                cells.push(self.tasks[self.region(y, x)].0);
            }
        }
        TaskPalette { h, w, cells }
    }
}

/// Palette from a semantic class map through a class→task table.
pub fn semantic_palette(table: &[Task; NUM_SEM_CLASSES], h: usize, w: usize, semantics: &[u8], k: usize) -> Result<TaskPalette> {
    if semantics.len() != h * w {
        return Err(CtError::InvalidArgument("semantic map size does not match palette".into()));
    }
    let mut cells = Vec::with_capacity(h * w);
    for &c in semantics {
        let t = table
            .get(c as usize)
            .ok_or_else(|| CtError::InvalidArgument(format!("semantic class {c} outside the table")))?;
        if t.id().index() >= k {
            return Err(CtError::InvalidArgument(format!("rule requests task {t} but K={k}")));
        }
        cells.push(t.id().0);
    }
    Ok(TaskPalette { h, w, cells })
}

pub fn gen_palette(rule: &Rule, h: usize, w: usize, semantics: Option<&[u8]>, k: usize, rng: &mut impl Rng) -> Result<TaskPalette> {
    if h == 0 || w == 0 {
        return Err(CtError::InvalidArgument("palette size must be positive".into()));
    }
    match rule {
        Rule::Single { task } => {
            TaskId::new(task.index(), k)?;
            Ok(TaskPalette::uniform(h, w, *task))
        }
        Rule::Mosaic { distinct_tasks } => Ok(MosaicLayout::sample(h, w, k, *distinct_tasks, rng)?.palette(h, w)),
        Rule::R2 | Rule::R3 => {
            let sem = semantics.ok_or_else(|| CtError::InvalidArgument(format!("rule {} needs a semantic map", rule.name())))?;
            semantic_palette(rule.table().expect("semantic rule"), h, w, sem, k)
        }
        Rule::Random => {
            if k == 0 {
                return Err(CtError::InvalidArgument("K must be positive".into()));
            }
            Ok(TaskPalette {
                h,
                w,
                cells: (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect(),
            })
        }
    }
}

/// [`gen_palette`] with a ChaCha stream seeded from `seed`.
pub fn gen_palette_seeded(rule: &Rule, h: usize, w: usize, semantics: Option<&[u8]>, k: usize, seed: u64) -> Result<TaskPalette> {
    gen_palette(rule, h, w, semantics, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Task name → semantic classes it is requested on.
pub fn describe_table(table: &[Task; NUM_SEM_CLASSES]) -> BTreeMap<&'static str, Vec<u8>> {
    let mut out: BTreeMap<&'static str, Vec<u8>> = BTreeMap::new();
    for (c, t) in table.iter().enumerate() {
        out.entry(t.name()).or_default().push(c as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::*;

    #[test]
    fn task_codes() {
        let z0 = make_task_code(TaskId(0), 5).unwrap();
        assert_eq!(z0.len(), 100);
        let v = 1.0 / 20f32.sqrt();
        assert!(z0[..20].iter().all(|&x| x == v) && z0[20..].iter().all(|&x| x == 0.0));
        for i in 0..5 {
            let zi = make_task_code(TaskId(i), 5).unwrap();
            let norm: f32 = zi.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for j in 0..5 {
                if i != j {
                    let zj = make_task_code(TaskId(j), 5).unwrap();
                    assert_eq!(zi.iter().zip(&zj).map(|(a, b)| a * b).sum::<f32>(), 0.0);
                }
            }
        }
        assert!(make_task_code(TaskId(5), 5).is_err());
    }

    #[test]
    fn single_rule_is_constant() {
        let p = gen_palette_seeded(&Rule::Single { task: TaskId(3) }, 4, 4, None, 5, 0).unwrap();
        assert!(p.cells.iter().all(|&c| c == 3));
        assert!(gen_palette_seeded(&Rule::Single { task: TaskId(5) }, 4, 4, None, 5, 0).is_err());
    }

    #[test]
    fn forced_center_gives_equal_quadrants() {
        let layout = MosaicLayout {
            cx: 32.0,
            cy: 32.0,
            tasks: [TaskId(0), TaskId(1), TaskId(2), TaskId(3)],
        };
        let p = layout.palette(64, 64);
        let report = validate_palette(&p, 5).unwrap();
        assert_eq!(report.histogram, BTreeMap::from([(0, 1024), (1, 1024), (2, 1024), (3, 1024)]));
        assert_eq!(p.at(0, 0), TaskId(0));
        assert_eq!(p.at(0, 63), TaskId(1));
        assert_eq!(p.at(63, 0), TaskId(2));
        assert_eq!(p.at(63, 63), TaskId(3));
        assert_eq!(p.at(31, 31), TaskId(0));
        assert_eq!(p.at(32, 32), TaskId(3));
    }

    #[test]
    fn mosaic_has_at_most_four_tasks() {
        for seed in 0..50 {
            let p = gen_palette_seeded(&Rule::Mosaic { distinct_tasks: false }, 32, 48, None, 5, seed).unwrap();
            let r = validate_palette(&p, 5).unwrap();
            assert!(r.histogram.len() <= 4);
            let p = gen_palette_seeded(&Rule::Mosaic { distinct_tasks: true }, 32, 48, None, 5, seed).unwrap();
            assert_eq!(validate_palette(&p, 5).unwrap().histogram.len(), 4);
        }
    }

    #[test]
    fn semantic_rules_follow_tables() {
        let sem: Vec<u8> = (0..NUM_SEM_CLASSES as u8).collect();
        let p2 = gen_palette_seeded(&Rule::R2, 3, 7, Some(&sem), 5, 0).unwrap();
        let p3 = gen_palette_seeded(&Rule::R3, 3, 7, Some(&sem), 5, 0).unwrap();
        for (i, &c) in sem.iter().enumerate() {
            assert_eq!(p2.cells[i] == Task::Parts as u8, c == PERSON);
            assert_eq!(p3.cells[i] == Task::Parts as u8, c == PERSON);
            assert_ne!(p3.cells[i], Task::SemSeg as u8);
            // edges and parts are requested at the same places by both rules
            assert_eq!(p2.cells[i] == 0, p3.cells[i] == 0);
        }
        assert_eq!(p2.cells[HORSE as usize], Task::SemSeg as u8);
        assert_eq!(p3.cells[CAR as usize], Task::Normals as u8);
        assert_eq!(p2.cells[CAR as usize], Task::Saliency as u8);
        assert!(gen_palette_seeded(&Rule::R2, 3, 7, None, 5, 0).is_err());
        assert!(gen_palette_seeded(&Rule::R2, 3, 7, Some(&sem), 3, 0).is_err());
    }

    #[test]
    fn validation_reports_offending_cell() {
        let mut p = TaskPalette::uniform(4, 5, TaskId(0));
        assert_eq!(validate_palette(&p, 5).unwrap().histogram, BTreeMap::from([(0, 20)]));
        p.set(2, 3, TaskId(5));
        let v = validate_palette(&p, 5).unwrap_err();
        assert_eq!(v.cells, vec![(2, 3, 5)]);
        assert_eq!(v.total, 1);
    }

    #[test]
    fn palette_file_formats_roundtrip() {
        let p = gen_palette_seeded(&Rule::Random, 5, 9, None, 5, 4).unwrap();
        assert_eq!(TaskPalette::from_png(&p.to_png().unwrap()).unwrap(), p);
        assert_eq!(TaskPalette::from_json(&p.to_json()).unwrap(), p);
        assert!(TaskPalette::from_json(r#"{"h":2,"w":2,"cells":[0,1,2]}"#).is_err());
    }

    #[test]
    fn rule_parsing() {
        assert_eq!(Rule::parse("s:normals", None).unwrap(), Rule::Single { task: TaskId(3) });
        assert_eq!(Rule::parse("s", Some(TaskId(2))).unwrap(), Rule::Single { task: TaskId(2) });
        assert_eq!(Rule::parse("R1r", None).unwrap(), Rule::Mosaic { distinct_tasks: false });
        assert!(Rule::parse("r9", None).is_err());
        let json = serde_json::to_string(&Rule::Single { task: TaskId(1) }).unwrap();
        assert_eq!(serde_json::from_str::<Rule>(&json).unwrap(), Rule::Single { task: TaskId(1) });
    }
}
