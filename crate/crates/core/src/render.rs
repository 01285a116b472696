//! Visualizations of decoded outputs, labels and palettes as RGB bytes.

use crate::heads::{binary_prob, decode_class, normal_vector, AnchorTable};
use crate::palette::{Task, TaskPalette};
use crate::tensor::{Real, Tensor};

/// Legend color of each task id in palette renders.
pub const TASK_COLORS: [[u8; 3]; 5] = [[230, 230, 230], [230, 120, 30], [40, 160, 220], [150, 90, 200], [240, 200, 40]];

pub fn class_rgb(classes: &[u8], table: &AnchorTable) -> Vec<u8> {
    classes.iter().flat_map(|&c| table.rgb((c as usize).min(table.len() - 1))).collect()
}

pub fn gray_rgb(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect()
}

/// Unit vectors mapped from `[-1, 1]` to `[0, 255]` per channel.
pub fn normals_rgb(normals: &[[f64; 3]]) -> Vec<u8> {
    normals.iter().flat_map(|n| n.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)).collect()
}

pub fn palette_rgb(p: &TaskPalette) -> Vec<u8> {
    p.cells.iter().flat_map(|&c| TASK_COLORS[(c as usize).min(4)]).collect()
}

/// One pixel of the task-specific visualization of output `o`.
pub fn task_pixel(task: Task, o: [f64; 3]) -> [u8; 3] {
    match task {
        Task::SemSeg => AnchorTable::semseg().rgb(decode_class(o, AnchorTable::semseg())),
        Task::Parts => AnchorTable::parts().rgb(decode_class(o, AnchorTable::parts())),
        Task::Edges | Task::Saliency => {
            let g = (binary_prob(o) * 255.0).round() as u8;
            [g, g, g]
        }
        Task::Normals => normal_vector(o).map(|v| ((v + 1.0) * 127.5).round() as u8),
    }
}

fn pixel<T: Real>(o: &Tensor<T>, n: usize, p: usize) -> [f64; 3] {
    let s = o.shape();
    let plane = s.plane();
    [0, 1, 2].map(|c| o.data()[(n * s.c + c) * plane + p].f64())
}

/// Every pixel of item `n` rendered with its requested task's convention.
pub fn composite_rgb<T: Real>(o: &Tensor<T>, n: usize, palette: &TaskPalette) -> Vec<u8> {
    palette
        .cells
        .iter()
        .enumerate()
        .flat_map(|(p, &t)| task_pixel(Task::ALL[(t as usize).min(4)], pixel(o, n, p)))
        .collect()
}

/// All pixels of item `n` decoded as `task`.
pub fn task_rgb<T: Real>(o: &Tensor<T>, n: usize, task: Task) -> Vec<u8> {
    (0..o.shape().plane()).flat_map(|p| task_pixel(task, pixel(o, n, p))).collect()
}
