//! Prediction path shared by the `predict` command and the HTTP service.

use std::collections::BTreeMap;

use ctask_core::network::ModelBundle;
use ctask_core::palette::validate_palette;
use ctask_core::{cttn, imageio, render, CtError, Task, TaskId, TaskPalette};

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    /// Undecodable input (bad base64, bad PNG, malformed JSON).
    #[error("{0}")]
    Malformed(String),
    /// Decodable input that does not fit the model or the image.
    #[error("{0}")]
    Unprocessable(String),
    #[error("no palette predictor is loaded")]
    NoPredictor,
    #[error(transparent)]
    Internal(#[from] CtError),
}

pub enum PaletteSource<'a> {
    Png(&'a [u8]),
    Uniform(TaskId),
    Auto,
}

pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub palette: TaskPalette,
    pub composite_png: Vec<u8>,
    /// `3×H×W` CTTN tensor of the raw output.
    pub raw_cttn: Vec<u8>,
    pub overlays: BTreeMap<&'static str, Vec<u8>>,
}

fn malformed(what: &str, e: CtError) -> RequestError {
    RequestError::Malformed(format!("{what}: {e}"))
}

pub fn decode_image(bundle: &ModelBundle, png: &[u8]) -> Result<ctask_core::Tensor<f32>, RequestError> {
    let image = imageio::decode_rgb_tensor(png).map_err(|e| malformed("image", e))?;
    let s = image.shape();
    bundle
        .config
        .check_size(s.h, s.w)
        .map_err(|e| RequestError::Unprocessable(e.to_string()))?;
    Ok(image)
}

/// Decodes a palette image and checks it against the image size and `k`.
pub fn decode_palette(png: &[u8], h: usize, w: usize, k: usize) -> Result<TaskPalette, RequestError> {
    let p = TaskPalette::from_png(png).map_err(|e| malformed("palette", e))?;
    if (p.h, p.w) != (h, w) {
        return Err(RequestError::Unprocessable(format!(
            "palette is {}×{} but the image is {h}×{w}",
            p.h, p.w
        )));
    }
    validate_palette(&p, k).map_err(|v| {
        RequestError::Unprocessable(format!("{} palette cells hold task ids ≥ {k}, first at {:?}", v.total, v.cells.first()))
    })?;
    Ok(p)
}

pub fn predict_palette(predictor: Option<&ModelBundle>, bundle: &ModelBundle, png: &[u8]) -> Result<TaskPalette, RequestError> {
    let predictor = predictor.ok_or(RequestError::NoPredictor)?;
    let image = decode_image(bundle, png)?;
    let mut p = predictor.predict_palettes(&image)?;
    Ok(p.remove(0))
}

pub fn run(bundle: &ModelBundle, predictor: Option<&ModelBundle>, image_png: &[u8], source: PaletteSource) -> Result<Prediction, RequestError> {
    let image = decode_image(bundle, image_png)?;
    let s = image.shape();
    let k = bundle.config.k;
    let palette = match source {
        PaletteSource::Png(bytes) => decode_palette(bytes, s.h, s.w, k)?,
        PaletteSource::Uniform(t) => {
            TaskId::new(t.index(), k).map_err(|e| RequestError::Unprocessable(e.to_string()))?;
            TaskPalette::uniform(s.h, s.w, t)
        }
        PaletteSource::Auto => predict_palette(predictor, bundle, image_png)?,
    };
    let o = bundle.predict(&image, std::slice::from_ref(&palette))?;
    let composite_png = imageio::encode_rgb(s.w, s.h, &render::composite_rgb(&o, 0, &palette))?;
    let raw_cttn = cttn::to_bytes(&[3, s.h, s.w], o.data())?;
    let mut overlays = BTreeMap::new();
    for &task in Task::first(k) {
        overlays.insert(task.name(), imageio::encode_rgb(s.w, s.h, &render::task_rgb(&o, 0, task))?);
    }
    Ok(Prediction {
        width: s.w,
        height: s.h,
        palette,
        composite_png,
        raw_cttn,
        overlays,
    })
}
