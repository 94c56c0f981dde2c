//! Differentiable training objective.
//!
//! `total = λ1·L1 + λ2·(1 − SSIM) + λ3·BCE(soft_edge(pred), canny(gt))`

use crate::error::{Error, Result};
use crate::hierarchy::LUMA_WEIGHTS;
use crate::metrics::{
    canny_batch, gaussian_kernel, CANNY_KERNEL, CANNY_SIGMA, SOBEL_X, SOBEL_Y, SSIM_C1, SSIM_C2, SSIM_SIGMA,
    SSIM_WINDOW,
};
use crate::tensor::{Real, Tensor, Var};

pub const BCE_EPS: f64 = 1e-6;
pub const EDGE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            ssim: 0.5,
            edge: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.l1, self.ssim, self.edge]
    }

    pub fn from_array(w: [f64; 3]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        Ok(LossWeights {
            l1: w[0],
            ssim: w[1],
            edge: w[2],
        })
    }
}

fn check_same<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<'g, T: Real>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same("l1_loss", &pred, &gt)?;
    pred.sub(&gt)?.abs()?.mean()
}

/// Mean SSIM of `[B,C,H,W]` images over all channels and valid window positions.
pub fn ssim<'g, T: Real>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same("ssim", &pred, &gt)?;
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("ssim expects [B,C,H,W], got {s:?}")));
    }
    let k = SSIM_WINDOW;
    if s[2] < k || s[3] < k {
        return Err(Error::Input(format!(
            "image {}x{} smaller than the {k}x{k} SSIM window",
            s[2], s[3]
        )));
    }
    let g = pred.graph();
    let win = g.constant(Tensor::new(
        &[1, 1, k, k],
        gaussian_kernel(k, SSIM_SIGMA).into_iter().map(T::lit).collect(),
    )?);
    let planes = [s[0] * s[1], 1, s[2], s[3]];
    let x = pred.reshape(&planes)?;
    let y = gt.reshape(&planes)?;
    let blur = |v: Var<'g, T>| v.conv2d(&win, None, 1, 0);
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxx = mx.square()?;
    let myy = my.square()?;
    let mxy = mx.mul(&my)?;
    let vx = blur(x.square()?)?.sub(&mxx)?;
    let vy = blur(y.square()?)?.sub(&myy)?;
    let cxy = blur(x.mul(&y)?)?.sub(&mxy)?;
    let num = mxy
        .scale(2.0)?
        .add_scalar(SSIM_C1)?
        .mul(&cxy.scale(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mxx
        .add(&myy)?
        .add_scalar(SSIM_C1)?
        .mul(&vx.add(&vy)?.add_scalar(SSIM_C2)?)?;
    num.div(&den)?.mean()
}

pub fn ssim_loss<'g, T: Real>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    ssim(pred, gt)?.neg()?.add_scalar(1.0)
}

/// Differentiable edge strength in `[0,1]`, `[B,3,H,W] -> [B,1,H,W]`: luma,
/// 5×5 Gaussian (σ=1.4), Sobel magnitude, divided by the per-image maximum.
pub fn soft_edge<'g, T: Real>(image: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Input(format!("soft_edge expects [B,3,H,W], got {s:?}")));
    }
    let g = image.graph();
    let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let luma_w = g.constant(Tensor::new(&[1, 3, 1, 1], lit(&LUMA_WEIGHTS))?);
    let kb = CANNY_KERNEL;
    let blur_w = g.constant(Tensor::new(&[1, 1, kb, kb], lit(&gaussian_kernel(kb, CANNY_SIGMA)))?);
    let mut sobel = SOBEL_X.to_vec();
    sobel.extend(SOBEL_Y);
    let sobel_w = g.constant(Tensor::new(&[2, 1, 3, 3], lit(&sobel))?);

    let gray = image.conv2d(&luma_w, None, 1, 0)?;
    let blur = gray.pad_replicate(kb / 2)?.conv2d(&blur_w, None, 1, 0)?;
    let grad = blur.pad_replicate(1)?.conv2d(&sobel_w, None, 1, 0)?;
    let mag = grad
        .square()?
        .conv2d(&g.constant(Tensor::ones(&[1, 2, 1, 1])), None, 1, 0)?
        .add_scalar(EDGE_EPS * EDGE_EPS)?
        .sqrt()?
        .add_scalar(-EDGE_EPS)?;
    let peak = mag.amax_trailing(3)?.clamp(EDGE_EPS, f64::INFINITY)?;
    mag.div(&peak)?.clamp(0.0, 1.0)
}

/// Binary cross-entropy of probabilities `p` (clamped to `[1e-6, 1-1e-6]`)
/// against fixed targets, averaged over elements.
pub fn bce<'g, T: Real>(p: Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
    if p.shape() != target.shape() {
        return Err(Error::shape("bce", &p.shape(), target.shape()));
    }
    let g = p.graph();
    let t = g.constant(target.clone());
    let one_minus_t = g.constant(target.map(|v| T::one() - v));
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = t.mul(&p.log()?)?;
    let neg = one_minus_t.mul(&p.neg()?.add_scalar(1.0)?.log()?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// Edge loss with precomputed Canny targets `[B,1,H,W]`.
pub fn edge_loss_with_target<'g, T: Real>(pred: Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
    bce(soft_edge(pred)?, target)
}

/// BCE between the soft edges of `pred` and the Canny edges of `gt`.
pub fn edge_loss<'g, T: Real>(pred: Var<'g, T>, gt: &Tensor<T>) -> Result<Var<'g, T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("edge_loss", &pred.shape(), gt.shape()));
    }
    edge_loss_with_target(pred, &canny_batch(gt)?)
}

/// Total loss and its unweighted components.
pub struct LossParts<'g, T: Real> {
    pub total: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub ssim_loss: Var<'g, T>,
    pub edge: Var<'g, T>,
}

/// `gt_edges` may carry precomputed Canny targets for `gt`.
pub fn total_loss<'g, T: Real>(
    pred: Var<'g, T>,
    gt: Var<'g, T>,
    w: &LossWeights,
    gt_edges: Option<&Tensor<T>>,
) -> Result<LossParts<'g, T>> {
    let l1 = l1_loss(pred, gt)?;
    let sl = ssim_loss(pred, gt)?;
    let edge = match gt_edges {
        Some(t) => edge_loss_with_target(pred, t)?,
        None => edge_loss(pred, &gt.value())?,
    };
    let total = l1.scale(w.l1)?.add(&sl.scale(w.ssim)?)?.add(&edge.scale(w.edge)?)?;
    Ok(LossParts {
        total,
        l1,
        ssim_loss: sl,
        edge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn defaults() {
        assert_eq!(LossWeights::default().as_array(), [1.0, 0.5, 0.1]);
        assert!(LossWeights::from_array([1.0, -0.1, 0.0]).is_err());
    }

    #[test]
    fn half_probability_bce_is_ln2() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        let t = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let v = bce(p, &t).unwrap().value().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_no_soft_edges() {
        let g = Graph::<f64>::new();
        let e = soft_edge(g.constant(Tensor::full(&[1, 3, 8, 8], 0.4))).unwrap();
        assert!(e.value().data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn soft_edge_peaks_on_step() {
        let g = Graph::<f64>::new();
        let img = Tensor::from_fn(&[1, 3, 16, 16], |i| if i % 16 >= 8 { 1.0 } else { 0.0 });
        let e = soft_edge(g.constant(img)).unwrap();
        let v = e.value();
        for y in 0..16 {
            assert!((v.at(&[0, 0, y, 7]) - 1.0).abs() < 1e-9);
            assert!((v.at(&[0, 0, y, 8]) - 1.0).abs() < 1e-9);
            assert!(v.at(&[0, 0, y, 0]).abs() < 1e-9);
            assert!(v.at(&[0, 0, y, 15]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_flat_images_have_zero_total() {
        let g = Graph::<f64>::new();
        let t = Tensor::full(&[1, 3, 16, 16], 0.3);
        let parts = total_loss(g.constant(t.clone()), g.constant(t), &LossWeights::default(), None).unwrap();
        // BCE of clamped zero probabilities against zero targets
        assert!(parts.total.value().item().abs() < 1e-5);
        assert_eq!(parts.l1.value().item(), 0.0);
    }
}
