//! File helpers shared across modules: 16-bit grayscale PNG, flat little-endian
//! f64 arrays, JSON sidecars and content hashing.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.display().to_string(), source }
}

/// Write an 8-bit RGB PNG from a per-pixel `(row, col)` colour function.
pub fn write_rgb_png(path: &Path, h: usize, w: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) -> Result<(), IoError> {
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| image::Rgb(pixel(y as usize, x as usize)));
    buf.save(path).map_err(|source| IoError::Image { path: path.display().to_string(), source })
}

/// Write values in `[lo, hi]` as a 16-bit grayscale PNG (clamped).
pub fn write_png16(path: &Path, img: &Array2<f64>, lo: f64, hi: f64) -> Result<(), IoError> {
    let (h, w) = img.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = ((img[[y as usize, x as usize]] - lo) / (hi - lo)).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| IoError::Image { path: path.display().to_string(), source })
}

/// Read a grayscale PNG (8 or 16 bit) and map it linearly onto `[lo, hi]`.
pub fn read_png16(path: &Path, lo: f64, hi: f64) -> Result<Array2<f64>, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.display().to_string(), source })?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        lo + (hi - lo) * g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<(), IoError> {
    write_png16(path, &mask.mapv(|b| if b { 1.0 } else { 0.0 }), 0.0, 1.0)
}

pub fn read_mask_png(path: &Path) -> Result<Array2<bool>, IoError> {
    Ok(read_png16(path, 0.0, 1.0)?.mapv(|v| v >= 0.5))
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(fs_err(path))?;
    let mut w = BufWriter::new(f);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(fs_err(path))?;
    }
    w.flush().map_err(fs_err(path))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>, IoError> {
    let f = fs::File::open(path).map_err(fs_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes).map_err(fs_err(path))?;
    if bytes.len() % 8 != 0 {
        return Err(IoError::Format { path: path.display().to_string(), msg: format!("{} bytes is not a whole number of f64", bytes.len()) });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_array2(path: &Path, a: &Array2<f64>) -> Result<(), IoError> {
    write_f64s(path, &a.iter().copied().collect::<Vec<_>>())
}

pub fn read_array2(path: &Path, side: usize) -> Result<Array2<f64>, IoError> {
    let v = read_f64s(path)?;
    Array2::from_shape_vec((side, v.len() / side.max(1)), v)
        .ok()
        .filter(|a| a.ncols() == side)
        .ok_or_else(|| IoError::Format { path: path.display().to_string(), msg: format!("expected a {side}x{side} array") })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let s = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.display().to_string(), source })?;
    fs::write(path, s + "\n").map_err(fs_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let s = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&s).map_err(|source| IoError::Json { path: path.display().to_string(), source })
}

pub fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(fs_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path).map_err(fs_err(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let a = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
        write_png16(&p, &a, -1.0, 1.0).unwrap();
        let b = read_png16(&p, -1.0, 1.0).unwrap();
        assert_eq!(b.dim(), (5, 7));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 2.0 / 65535.0));
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let v = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        write_f64s(&p, &v).unwrap();
        assert_eq!(read_f64s(&p).unwrap(), v);
    }
}
