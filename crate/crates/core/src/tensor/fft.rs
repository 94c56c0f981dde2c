//! Radix-2 complex FFT and the real 2-D transforms built on it.
//!
//! Spectra of real `H×W` planes are stored over the non-redundant
//! `H×(W/2+1)` half plane. The inverse uses weights 1 on the first and last
//! kept columns and 2 elsewhere, which reconstructs any Hermitian spectrum
//! exactly and is a plain linear map, so both transforms have cheap adjoints.

use super::Real;
use crate::error::{Error, Result};

pub fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Number of half-plane frequency columns for width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

pub fn check_fft_dims(h: usize, w: usize) -> Result<()> {
    if !is_pow2(h) || !is_pow2(w) || w < 2 {
        return Err(Error::UnsupportedSize(format!(
            "FFT needs power-of-two spatial dims (width >= 2), got {h}x{w}"
        )));
    }
    Ok(())
}

/// In-place iterative Cooley-Tukey over interleaved `(re, im)` slices with
/// element stride `stride`. `inverse` flips the twiddle sign; no scaling.
fn fft_strided<T: Real>(re: &mut [T], im: &mut [T], n: usize, offset: usize, stride: usize, inverse: bool) {
    if n <= 1 {
        return;
    }
    let at = |i: usize| offset + i * stride;
    // bit reversal
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(at(i), at(j));
            im.swap(at(i), at(j));
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        for k in 0..half {
            let (s, c) = (ang * k as f64).sin_cos();
            let (wr, wi) = (T::lit(c), T::lit(s));
            let mut start = 0;
            while start < n {
                let p = at(start + k);
                let q = at(start + k + half);
                let tr = re[q] * wr - im[q] * wi;
                let ti = re[q] * wi + im[q] * wr;
                re[q] = re[p] - tr;
                im[q] = im[p] - ti;
                re[p] += tr;
                im[p] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized complex FFT of a length-`n` sequence.
pub fn fft1<T: Real>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    fft_strided(re, im, n, 0, 1, inverse);
}

/// Unnormalized 2-D complex FFT of an `h×w` row-major plane, in place.
pub fn fft2<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_strided(re, im, w, r * w, 1, inverse);
    }
    for c in 0..w {
        fft_strided(re, im, h, c, w, inverse);
    }
}

/// Forward real 2-D transform of one plane into half-plane `(re, im)`.
pub fn rfft2_plane<T: Real>(x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let wf = half_width(w);
    let mut re = x.to_vec();
    let mut im = vec![T::zero(); h * w];
    for r in 0..h {
        fft_strided(&mut re, &mut im, w, r * w, 1, false);
    }
    for c in 0..wf {
        fft_strided(&mut re, &mut im, h, c, w, false);
    }
    let mut ore = Vec::with_capacity(h * wf);
    let mut oim = Vec::with_capacity(h * wf);
    for r in 0..h {
        ore.extend_from_slice(&re[r * w..r * w + wf]);
        oim.extend_from_slice(&im[r * w..r * w + wf]);
    }
    (ore, oim)
}

/// Real part of the unnormalized inverse DFT of a half-plane spectrum that
/// is zero on the redundant columns, with per-column weights.
fn half_inverse<T: Real>(sre: &[T], sim: &[T], h: usize, w: usize, weights: &[T]) -> Vec<T> {
    let wf = half_width(w);
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..wf {
            re[r * w + c] = sre[r * wf + c] * weights[c];
            im[r * w + c] = sim[r * wf + c] * weights[c];
        }
    }
    for c in 0..wf {
        fft_strided(&mut re, &mut im, h, c, w, true);
    }
    for r in 0..h {
        fft_strided(&mut re, &mut im, w, r * w, 1, true);
    }
    re
}

fn irfft_weights<T: Real>(w: usize) -> Vec<T> {
    let wf = half_width(w);
    (0..wf)
        .map(|c| if c == 0 || c == wf - 1 { T::one() } else { T::lit(2.0) })
        .collect()
}

/// Inverse real 2-D transform of one half-plane spectrum.
pub fn irfft2_plane<T: Real>(sre: &[T], sim: &[T], h: usize, w: usize) -> Vec<T> {
    let scale = T::one() / T::lit((h * w) as f64);
    let mut out = half_inverse(sre, sim, h, w, &irfft_weights(w));
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Adjoint of [`rfft2_plane`]: maps half-plane cotangents back to the plane.
pub fn rfft2_adjoint_plane<T: Real>(gre: &[T], gim: &[T], h: usize, w: usize) -> Vec<T> {
    let ones = vec![T::one(); half_width(w)];
    half_inverse(gre, gim, h, w, &ones)
}

/// Adjoint of [`irfft2_plane`]: maps plane cotangents to half-plane ones.
pub fn irfft2_adjoint_plane<T: Real>(g: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let (mut re, mut im) = rfft2_plane(g, h, w);
    let wf = half_width(w);
    let weights = irfft_weights::<T>(w);
    let scale = T::one() / T::lit((h * w) as f64);
    for r in 0..h {
        for c in 0..wf {
            re[r * wf + c] *= weights[c] * scale;
            im[r * wf + c] *= weights[c] * scale;
        }
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for xx in 0..w {
                        let th = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re[u * w + v] += x[y * w + xx] * th.cos();
                        im[u * w + v] += x[y * w + xx] * th.sin();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn matches_naive_dft() {
        let (h, w) = (4, 8);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let (nr, ni) = naive_dft2(&x, h, w);
        let (r, i) = rfft2_plane(&x, h, w);
        let wf = half_width(w);
        for u in 0..h {
            for v in 0..wf {
                assert!((r[u * wf + v] - nr[u * w + v]).abs() < 1e-10);
                assert!((i[u * wf + v] - ni[u * w + v]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn impulse_and_dc() {
        let mut x = vec![0.0f64; 16];
        x[0] = 1.0;
        let (r, i) = rfft2_plane(&x, 4, 4);
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(i.iter().all(|&v| v.abs() < 1e-15));

        let c: f64 = 0.7;
        let (r, i) = rfft2_plane(&[c; 64], 8, 8);
        assert!((r[0] - c * 64.0).abs() < 1e-12);
        assert!(r[1..].iter().chain(&i).all(|v: &f64| v.abs() < 1e-12));
    }

    #[test]
    fn round_trip_non_square() {
        let (h, w) = (8, 4);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let (r, i) = rfft2_plane(&x, h, w);
        let back = irfft2_plane(&r, &i, h, w);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_pow2() {
        assert!(check_fft_dims(6, 8).is_err());
        assert!(check_fft_dims(8, 1).is_err());
        assert!(check_fft_dims(8, 16).is_ok());
    }
}
