//! PNG images as `[3,H,W]` tensors in `[0,1]`.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_rgb<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| format_err(path, e))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::lit(raw[p * 3 + c] as f64 / 255.0)
    })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("expected [3,H,W], got {s:?}"))),
    };
    let d = t.to_f64_vec();
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            raw.push(to_u8(d[c * h * w + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

pub fn write_rgb<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| format_err(path, e))
}

/// Writes `h×w` values in `[0,1]` as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::shape("write_gray", &[h, w], &[values.len()]));
    }
    let raw = values.iter().map(|&v| to_u8(v)).collect();
    GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| format_err(path, e))
}

/// Mirror index (edge not repeated) of `i` into `0..n`.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Mirror-pads `[C,H,W]` at the bottom and right to `th×tw`.
pub fn pad_reflect<T: Real>(t: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Input(format!("expected [C,H,W], got {s:?}"))),
    };
    if th < h || tw < w || h == 0 || w == 0 {
        return Err(Error::Input(format!("cannot pad {h}x{w} to {th}x{tw}")));
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[c, th, tw], |i| {
        let (ch, y, x) = (i / (th * tw), (i / tw) % th, i % tw);
        d[(ch * h + reflect(y as isize, h)) * w + reflect(x as isize, w)]
    }))
}

/// Top-left `h×w` window of `[C,H,W]`.
pub fn crop<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, th, tw) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Input(format!("expected [C,H,W], got {s:?}"))),
    };
    if y0 + h > th || x0 + w > tw {
        return Err(Error::Input(format!("crop {h}x{w} at ({y0},{x0}) outside {th}x{tw}")));
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * th + y0 + y) * tw + x0 + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::<f64>::from_fn(&[3, 5, 7], |i| ((i * 31) % 256) as f64 / 255.0);
        write_rgb(&p, &t).unwrap();
        let back: Tensor<f64> = read_rgb(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn reflect_pad_then_crop() {
        let t = Tensor::<f64>::from_fn(&[1, 3, 3], |i| i as f64);
        let p = pad_reflect(&t, 4, 5).unwrap();
        // row 3 mirrors row 1, col 3 mirrors col 1, col 4 mirrors col 0
        assert_eq!(p.at(&[0, 3, 0]), 3.0);
        assert_eq!(p.at(&[0, 0, 3]), 1.0);
        assert_eq!(p.at(&[0, 0, 4]), 0.0);
        assert_eq!(crop(&p, 0, 0, 3, 3).unwrap(), t);
    }

    #[test]
    fn garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(read_rgb::<f64>(&p), Err(Error::Format { .. })));
    }
}
