//! 8-bit PNG reading and writing.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use lfsamba::{Scalar, Tensor};

use crate::error::{DataError, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(DataError::NotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path).map_err(|e| DataError::io(path, e))?;
    reader.decode().map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// `(height, width, interleaved RGB bytes)`.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.to_rgb8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// `(height, width, bytes)`.
pub fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Planar `[3, H, W]` tensor with values `byte / 255`.
pub fn rgb_tensor<S: Scalar>(h: usize, w: usize, bytes: &[u8]) -> Tensor<S> {
    let plane = h * w;
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        S::lit(bytes[p * 3 + c] as f64 / 255.0)
    })
}

pub fn read_rgb<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let (h, w, bytes) = read_rgb8(path)?;
    Ok(rgb_tensor(h, w, &bytes))
}

pub fn write_rgb8(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, bytes.to_vec())
        .ok_or_else(|| DataError::Dimension(format!("{} bytes for a {h}×{w} RGB image", bytes.len())))?;
    img.save(path).map_err(|e| save_error(path, e))
}

pub fn write_gray8(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes.to_vec())
        .ok_or_else(|| DataError::Dimension(format!("{} bytes for a {h}×{w} gray image", bytes.len())))?;
    img.save(path).map_err(|e| save_error(path, e))
}

fn save_error(path: &Path, e: image::ImageError) -> DataError {
    match e {
        image::ImageError::IoError(io) => DataError::io(path, io),
        other => DataError::Decode { path: path.to_path_buf(), detail: other.to_string() },
    }
}

/// Rounds values in [0, 1] to bytes.
pub fn to_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
