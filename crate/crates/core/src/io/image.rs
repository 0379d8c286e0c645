//! Binary PPM (P6) image output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serializes a [3,H,W] tensor with values in [0,1] as 8-bit binary
/// PPM, byte = round(255 * v), pixels row-major RGB-interleaved.
pub fn ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "write_image expects [3,H,W], got {:?}",
            img.shape()
        )));
    }
    if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("image values outside [0,1]"));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data()[c * h * w + y * w + x];
                out.push((255.0 * v).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_image(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, ppm_bytes(img)?)?;
    Ok(())
}
