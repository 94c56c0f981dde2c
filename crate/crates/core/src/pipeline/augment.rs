//! Random crops and flips applied identically to a pair and its sidecars.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyMap, InstanceMaskSet};
use crate::pipeline::dataset::Sample;
use crate::tensor::{Real, Tensor};

/// One drawn crop window plus flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Augment {
    pub fn draw<R: Rng>(rng: &mut R, h: usize, w: usize, size: usize) -> Result<Self> {
        if h < size || w < size {
            return Err(Error::Input(format!("image {h}x{w} is smaller than crop {size}")));
        }
        Ok(Augment {
            y0: rng.random_range(0..=h - size),
            x0: rng.random_range(0..=w - size),
            size,
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
        })
    }

    /// Source pixel of output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let s = self.size;
        let y = if self.vflip { s - 1 - y } else { y };
        let x = if self.hflip { s - 1 - x } else { x };
        (self.y0 + y, self.x0 + x)
    }

    pub fn tensor<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Input(format!("expected [C,H,W], got {s:?}"))),
        };
        if self.y0 + self.size > h || self.x0 + self.size > w {
            return Err(Error::Input(format!("crop window outside {h}x{w} image")));
        }
        let s = self.size;
        let d = t.data();
        Ok(Tensor::from_fn(&[c, s, s], |i| {
            let (ch, y, x) = (i / (s * s), (i / s) % s, i % s);
            let (sy, sx) = self.source(y, x);
            d[(ch * h + sy) * w + sx]
        }))
    }

    pub fn masks(&self, m: &InstanceMaskSet) -> InstanceMaskSet {
        m.remap(self.size, self.size, |y, x| self.source(y, x))
    }

    pub fn map(&self, m: &HierarchyMap) -> Result<HierarchyMap> {
        let s = self.size;
        let mut v = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = self.source(y, x);
                v.push(m.get(sy, sx));
            }
        }
        HierarchyMap::new(s, s, v, m.kind(), m.source())
    }

    pub fn sample<T: Real>(&self, s: &Sample<T>) -> Result<Sample<T>> {
        Ok(Sample {
            name: s.name.clone(),
            low: self.tensor(&s.low)?,
            high: self.tensor(&s.high)?,
            masks: s.masks.as_ref().map(|m| self.masks(m)),
            score: s.score.as_ref().map(|m| self.map(m)).transpose()?,
        })
    }
}

/// Draws a window for `s` and applies it.
pub fn augment<T: Real, R: Rng>(s: &Sample<T>, rng: &mut R, crop: usize) -> Result<Sample<T>> {
    let sh = s.low.shape();
    Augment::draw(rng, sh[1], sh[2], crop)?.sample(s)
}

/// Horizontal mirror of `[C,H,W]`.
pub fn flip_h<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let w = match t.shape() {
        [_, _, w] => *w,
        s => return Err(Error::Input(format!("expected [C,H,W], got {s:?}"))),
    };
    let d = t.data();
    Ok(Tensor::from_fn(t.shape(), |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn windows_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = Augment::draw(&mut rng, 70, 90, 64).unwrap();
            assert!(a.y0 + 64 <= 70 && a.x0 + 64 <= 90);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| Augment::draw(&mut rng, 80, 80, 64).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn double_flip_is_identity() {
        let t = Tensor::<f64>::from_fn(&[3, 8, 8], |i| i as f64);
        assert_eq!(flip_h(&flip_h(&t).unwrap()).unwrap(), t);
        assert_ne!(flip_h(&t).unwrap(), t);
    }

    #[test]
    fn too_small_is_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Augment::draw(&mut rng, 32, 80, 64), Err(Error::Input(_))));
    }
}
