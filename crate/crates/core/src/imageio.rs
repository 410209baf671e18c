//! Disparity map files: 16-bit PNG, float32 tensor dumps, magma previews.

use std::path::Path;

use evstereo_tensor::{checkpoint, Tensor};
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{invalid, Error, Result};

/// PNG16 fixed-point scale.
pub const PNG16_SCALE: f64 = 256.0;

/// Encode one pixel: `round(d * 256)`, with 0 reserved for invalid pixels.
/// A valid disparity that would round to 0 is stored as 1.
pub fn png16_encode(d: f64, valid: bool) -> u16 {
    if !valid || !d.is_finite() {
        return 0;
    }
    ((d * PNG16_SCALE).round().clamp(1.0, f64::from(u16::MAX))) as u16
}

pub fn write_png16(
    path: impl AsRef<Path>,
    disp: &[f64],
    valid: &[bool],
    width: usize,
    height: usize,
) -> Result<()> {
    if disp.len() != width * height || valid.len() != disp.len() {
        return invalid(format!(
            "disparity buffer of {} for a {width}x{height} image",
            disp.len()
        ));
    }
    let pixels: Vec<u16> = disp
        .iter()
        .zip(valid)
        .map(|(&d, &v)| png16_encode(d, v))
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels).expect("sized buffer");
    img.save(path)?;
    Ok(())
}

/// Returns `(disparity, valid, width, height)`.
pub fn read_png16(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<bool>, usize, usize)> {
    let img = image::open(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(Error::Invalid(format!(
                "expected a 16-bit grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let valid = raw.iter().map(|&v| v != 0).collect();
    let disp = raw.iter().map(|&v| f64::from(v) / PNG16_SCALE).collect();
    Ok((disp, valid, w as usize, h as usize))
}

/// Float32 dump in the checkpoint container under the record name `disparity`.
pub fn write_f32(path: impl AsRef<Path>, disp: &Tensor) -> Result<()> {
    checkpoint::save(path, &[("disparity", disp)])?;
    Ok(())
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<Tensor> {
    checkpoint::load(path)?
        .into_iter()
        .find(|(n, _)| n == "disparity")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Invalid("no `disparity` record".into()))
}

const MAGMA: [[u8; 3]; 17] = [
    [0, 0, 4],
    [10, 8, 34],
    [29, 17, 71],
    [54, 16, 107],
    [81, 18, 124],
    [106, 28, 129],
    [131, 38, 129],
    [156, 46, 127],
    [183, 55, 121],
    [208, 65, 111],
    [231, 82, 99],
    [245, 107, 92],
    [252, 137, 97],
    [254, 167, 114],
    [254, 196, 136],
    [253, 226, 163],
    [252, 253, 191],
];

/// Magma colour for `t` in `[0, 1]` (clamped).
pub fn magma(t: f64) -> [u8; 3] {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let pos = t * (MAGMA.len() - 1) as f64;
    let i = (pos.floor() as usize).min(MAGMA.len() - 2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let a = f64::from(MAGMA[i][c]);
        let b = f64::from(MAGMA[i + 1][c]);
        out[c] = (a + (b - a) * f).round() as u8;
    }
    out
}

/// 8-bit RGB preview mapping `[lo, hi]` onto magma; invalid pixels are black.
pub fn write_colormap(
    path: impl AsRef<Path>,
    values: &[f64],
    valid: Option<&[bool]>,
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    if values.len() != width * height {
        return invalid(format!(
            "buffer of {} for a {width}x{height} image",
            values.len()
        ));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let ok = valid.is_none_or(|v| v[i]);
        *px = Rgb(if ok {
            magma((values[i] - lo) / span)
        } else {
            [0, 0, 0]
        });
    }
    img.save(path)?;
    Ok(())
}
