//! Evaluation metrics and the reference Canny detector, on plain tensors.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::hierarchy::LUMA_WEIGHTS;
use crate::tensor::{Real, Tensor};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_KERNEL: usize = 5;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.2;

/// Normalized 1-D Gaussian taps centred on the middle one.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Normalized 2-D Gaussian, row-major `size×size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let t = gaussian_taps(size, sigma);
    let mut k = Vec::with_capacity(size * size);
    for a in &t {
        for b in &t {
            k.push(a * b);
        }
    }
    k
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape("mse", pred, gt)?;
    if pred.numel() == 0 {
        return Err(Error::Input("mse of empty tensors".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

/// `10·log10(peak²/mse)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Splits `[C,H,W]` or `[B,C,H,W]` (or `[H,W]`) into `H×W` planes.
fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        [b, c, h, w] => Ok((b * c, *h, *w)),
        s => Err(Error::Input(format!("expected an image tensor, got {s:?}"))),
    }
}

/// Mean SSIM over all planes: 11×11 Gaussian window (σ=1.5), valid
/// positions only.
pub fn ssim<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (np, h, w) = planes(pred.shape())?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Input(format!(
            "image {h}x{w} smaller than the {k}x{k} SSIM window"
        )));
    }
    let win = gaussian_kernel(k, SSIM_SIGMA);
    let (a, b) = (pred.to_f64_vec(), gt.to_f64_vec());
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for p in 0..np {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = win[dy * k + dx];
                        let i = base + (y + dy) * w + x + dx;
                        mx += wt * a[i];
                        my += wt * b[i];
                        xx += wt * a[i] * a[i];
                        yy += wt * b[i] * b[i];
                        xy += wt * a[i] * b[i];
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (np * oh * ow) as f64)
}

/// Binary or soft edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub hard: bool,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Luma planes of `[3,H,W]` or `[B,3,H,W]`, one `Vec` per image.
pub fn luma_planes<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let (b, h, w) = match image.shape() {
        [3, h, w] => (1, *h, *w),
        [b, 3, h, w] => (*b, *h, *w),
        s => return Err(Error::Input(format!("expected RGB [3,H,W] or [B,3,H,W], got {s:?}"))),
    };
    let d = image.to_f64_vec();
    let n = h * w;
    let out = (0..b)
        .map(|bi| {
            (0..n)
                .map(|i| (0..3).map(|c| LUMA_WEIGHTS[c] * d[(bi * 3 + c) * n + i]).sum::<f64>())
                .collect()
        })
        .collect();
    Ok((h, w, out))
}

fn conv_replicate(src: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..ks {
                let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                for dx in 0..ks {
                    let sx = (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                    s += k[dy * ks + dx] * src[sy * w + sx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Gaussian blur and Sobel derivatives with replicated borders.
pub fn sobel_gradients(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let blur = conv_replicate(gray, h, w, &gaussian_kernel(CANNY_KERNEL, CANNY_SIGMA), CANNY_KERNEL);
    (
        conv_replicate(&blur, h, w, &SOBEL_X, 3),
        conv_replicate(&blur, h, w, &SOBEL_Y, 3),
    )
}

/// Gradient magnitudes surviving non-maximum suppression, divided by the
/// largest magnitude (all zeros on a flat image).
///
/// A pixel survives if it is strictly greater than its predecessor and at
/// least its successor along the quantized gradient direction, so a
/// symmetric ridge keeps exactly one pixel.
pub fn canny_nms(gray: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if gray.len() != h * w {
        return Err(Error::shape("canny", &[h, w], &[gray.len()]));
    }
    let (gx, gy) = sobel_gradients(gray, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Ok(vec![0.0; h * w]);
    }
    let at = |y: isize, x: isize| mag[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let mut ang = gy[i].atan2(gx[i]).to_degrees();
            if ang < 0.0 {
                ang += 180.0;
            }
            let (dy, dx) = if !(22.5..157.5).contains(&ang) {
                (0, 1)
            } else if ang < 67.5 {
                (1, 1)
            } else if ang < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let prev = at(y - dy, x - dx);
            let next = at(y + dy, x + dx);
            if m > prev && m >= next {
                out[i] = m / max;
            }
        }
    }
    Ok(out)
}

/// Canny edges of a grayscale image in `[0,1]`: Gaussian σ=1.4, Sobel,
/// non-maximum suppression, 8-connected hysteresis at 0.1/0.2 of the
/// maximum magnitude.
pub fn canny_reference(gray: &[f64], h: usize, w: usize) -> Result<EdgeMap> {
    canny_with(gray, h, w, CANNY_LOW, CANNY_HIGH)
}

pub fn canny_with(gray: &[f64], h: usize, w: usize, low: f64, high: f64) -> Result<EdgeMap> {
    let nms = canny_nms(gray, h, w)?;
    let mut edge = vec![0.0; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in nms.iter().enumerate() {
        if m > 0.0 && m >= high {
            edge[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edge[j] == 0.0 && nms[j] > 0.0 && nms[j] >= low {
                    edge[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgeMap {
        height: h,
        width: w,
        values: edge,
        hard: true,
    })
}

/// Canny edges of every image in an RGB batch, as `[B,1,H,W]`.
pub fn canny_batch<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, lumas) = luma_planes(image)?;
    let mut data = Vec::with_capacity(lumas.len() * h * w);
    for l in &lumas {
        data.extend(canny_reference(l, h, w)?.values.into_iter().map(T::lit));
    }
    Tensor::new(&[lumas.len(), 1, h, w], data)
}

/// F1 score of a predicted edge map against a reference.
pub fn edge_f1(pred: &EdgeMap, gt: &EdgeMap) -> Result<f64> {
    if pred.values.len() != gt.values.len() {
        return Err(Error::shape(
            "edge_f1",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.values.iter().zip(&gt.values) {
        match (*p > 0.5, *g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(h: usize, w: usize, col: usize) -> Vec<f64> {
        (0..h * w).map(|i| if i % w >= col { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Tensor::<f64>::from_fn(&[1, 12, 12], |i| ((i * 37) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(matches!(
            ssim(&Tensor::<f64>::zeros(&[1, 8, 8]), &Tensor::zeros(&[1, 8, 8])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkerboard_inverse_is_anticorrelated() {
        let a = Tensor::<f64>::from_fn(&[1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.4);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[24]);
        assert_eq!(k[1], k[5]);
    }

    #[test]
    fn step_edge_is_one_column() {
        let e = canny_reference(&step(16, 16, 8), 16, 16).unwrap();
        let cols: Vec<usize> = (0..256).filter(|&i| e.values[i] == 1.0).map(|i| i % 16).collect();
        assert_eq!(cols.len(), 16);
        assert!(cols.iter().all(|&c| c == 7));
    }

    #[test]
    fn blank_image_has_no_edges() {
        assert_eq!(canny_reference(&[0.3; 64], 8, 8).unwrap().count(), 0);
    }

    #[test]
    fn f1_of_identical_maps_is_one() {
        let e = canny_reference(&step(8, 8, 4), 8, 8).unwrap();
        assert_eq!(edge_f1(&e, &e).unwrap(), 1.0);
    }
}
