//! PNG encode/decode helpers for images, palettes and label renders.

use std::io::Cursor;

use crate::error::{CtError, Result};
use crate::tensor::{Shape, Tensor};

fn png_err(e: impl std::fmt::Display) -> CtError {
    CtError::Format(format!("png: {e}"))
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(data).map_err(png_err)?;
    }
    Ok(out)
}

pub fn encode_gray(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(CtError::Format("gray buffer size".into()));
    }
    encode(width, height, png::ColorType::Grayscale, data)
}

pub fn encode_rgb(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * 3 {
        return Err(CtError::Format("rgb buffer size".into()));
    }
    encode(width, height, png::ColorType::Rgb, data)
}

/// Decoded 8-bit image: `(width, height, channels, bytes)`.
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CtError::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(CtError::Format("png: unexpanded palette image".into())),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Single-channel 8-bit values; colour images are rejected.
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(bytes)?;
    match d.channels {
        1 => Ok((d.width, d.height, d.data)),
        2 => Ok((d.width, d.height, d.data.chunks_exact(2).map(|p| p[0]).collect())),
        c => Err(CtError::Format(format!("expected a single-channel png, got {c} channels"))),
    }
}

/// RGB image as a `1×3×H×W` tensor in `[0, 1]`.
pub fn decode_rgb_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let d = decode(bytes)?;
    let s = Shape::new(1, 3, d.height, d.width);
    let px = |y: usize, x: usize| &d.data[(y * d.width + x) * d.channels..(y * d.width + x + 1) * d.channels];
    Ok(Tensor::from_fn(s, |_, c, y, x| {
        let p = px(y, x);
        let v = match d.channels {
            1 | 2 => p[0],
            _ => p[c],
        };
        v as f32 / 255.0
    }))
}

/// First batch item of an `N×3×H×W` tensor as interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.plane() * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = t.at(0, c.min(s.c - 1), y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
