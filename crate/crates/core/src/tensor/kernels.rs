//! Raw loops behind the graph ops. Every reduction runs in a fixed order so
//! results are bit-reproducible.

use super::{numel, strides, Real};

/// Broadcast two shapes with trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `inp` broadcast to `out`.
pub fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let in_strides = strides(inp);
    let mut eff = vec![0usize; n];
    for i in 0..inp.len() {
        let o = i + n - inp.len();
        eff[o] = if inp[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// How a tensor of shape `inp` is read when broadcast to `out`.
pub enum Bcast {
    Same,
    /// `inp` equals the trailing dims of `out`; index is `i % n`.
    Tail(usize),
    /// `inp` holds one value.
    Scalar,
    Map(Vec<usize>),
}

impl Bcast {
    pub fn new(out: &[usize], inp: &[usize]) -> Self {
        let trimmed = {
            let lead = inp.iter().take_while(|&&d| d == 1).count();
            &inp[lead..]
        };
        if out == inp {
            Bcast::Same
        } else if numel(inp) == 1 {
            Bcast::Scalar
        } else if trimmed.len() <= out.len() && out.ends_with(trimmed) {
            Bcast::Tail(numel(trimmed))
        } else {
            Bcast::Map(broadcast_map(out, inp))
        }
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tail(n) => i % n,
            Bcast::Scalar => 0,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back onto `inp`.
pub fn reduce_to<T: Real>(grad: Vec<T>, out: &[usize], inp: &[usize]) -> Vec<T> {
    let mut acc = vec![T::zero(); numel(inp)];
    match Bcast::new(out, inp) {
        Bcast::Same => return grad,
        Bcast::Tail(n) => {
            for chunk in grad.chunks_exact(n) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += *g;
                }
            }
        }
        Bcast::Scalar => {
            for g in &grad {
                acc[0] += *g;
            }
        }
        Bcast::Map(map) => {
            for (g, &m) in grad.iter().zip(&map) {
                acc[m] += *g;
            }
        }
    }
    acc
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] = a[m,k] · b[k,n]`. Each entry sums over `k` in ascending order.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let mfull = m / MR * MR;
    let nfull = n / NR * NR;
    for i0 in (0..mfull).step_by(MR) {
        for j0 in (0..nfull).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (cv, bv) in row.iter_mut().zip(brow) {
                        *cv += av * *bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
    }
    let edge = |c: &mut [T], i: usize, j: usize| {
        let mut s = T::zero();
        for p in 0..k {
            s += a[i * k + p] * b[p * n + j];
        }
        c[i * n + j] = s;
    };
    for i in 0..mfull {
        for j in nfull..n {
            edge(&mut c, i, j);
        }
    }
    for i in mfull..m {
        for j in 0..n {
            edge(&mut c, i, j);
        }
    }
    c
}

/// `g · bᵀ` for `g[m,n]`, `b[k,n]`.
pub fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul(g, &bt, m, n, k)
}

/// `aᵀ · g` for `a[m,k]`, `g[m,n]`. Each entry sums over `m` in ascending order.
pub fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let kfull = k / MR * MR;
    let nfull = n / NR * NR;
    const MC: usize = 256;
    for i0 in (0..m).step_by(MC) {
        let i1 = (i0 + MC).min(m);
        for p0 in (0..kfull).step_by(MR) {
            for j0 in (0..nfull).step_by(NR) {
                let mut acc = [[T::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(p0 + r) * n + j0..(p0 + r) * n + j0 + NR]);
                }
                for i in i0..i1 {
                    let grow: &[T; NR] = g[i * n + j0..i * n + j0 + NR].try_into().unwrap();
                    let arow: &[T; MR] = a[i * k + p0..i * k + p0 + MR].try_into().unwrap();
                    for (row, &av) in acc.iter_mut().zip(arow) {
                        for (o, gv) in row.iter_mut().zip(grow) {
                            *o += av * *gv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(p0 + r) * n + j0..(p0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            }
        }
    }
    let edge = |out: &mut [T], p: usize, j: usize| {
        let mut s = T::zero();
        for i in 0..m {
            s += a[i * k + p] * g[i * n + j];
        }
        out[p * n + j] = s;
    };
    for p in 0..kfull {
        for j in nfull..n {
            edge(&mut out, p, j);
        }
    }
    for p in kfull..k {
        for j in 0..n {
            edge(&mut out, p, j);
        }
    }
    out
}

/// Geometry of an NCHW convolution with zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] || stride == 0 {
            return None;
        }
        let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            batch: x[0],
            cin: x[1],
            h,
            w,
            cout: wt[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o*stride + k - pad` lies inside `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let (s, p, n) = (stride as isize, pad as isize, in_len as isize);
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi_excl = {
        let top = n - 1 + p - k;
        if top < 0 {
            0
        } else {
            (top / s + 1).min(out_len as isize)
        }
    };
    let lo = lo.max(0) as usize;
    let hi = hi_excl.max(0) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (ov, iv) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                    *ov += wv * *iv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = if need_x { vec![T::zero(); x.len()] } else { vec![] };
    let mut gw = if need_w { vec![T::zero(); w.len()] } else { vec![] };
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane_out..][..plane_out];
            gb[co] += go.iter().copied().sum::<T>();
            for ci in 0..g.cin {
                let in_off = (b * g.cin + ci) * plane_in;
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = [T::zero(); 4];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                            let row_off = in_off + iy * g.w;
                            if g.stride == 1 {
                                let ix0 = row_off + ox0 + kx - g.pad;
                                if need_w {
                                    let xrow = &x[ix0..ix0 + grow.len()];
                                    let (gc, xc) = (grow.chunks_exact(4), xrow.chunks_exact(4));
                                    for (tail_g, tail_x) in gc.remainder().iter().zip(xc.remainder()) {
                                        acc[0] += *tail_g * *tail_x;
                                    }
                                    for (g4, x4) in gc.zip(xc) {
                                        for l in 0..4 {
                                            acc[l] += g4[l] * x4[l];
                                        }
                                    }
                                }
                                if need_x && wv != T::zero() {
                                    for (o, gv) in gx[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                                        *o += wv * *gv;
                                    }
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = row_off + (ox0 + j) * g.stride + kx - g.pad;
                                    if need_w {
                                        acc[0] += gv * x[ix];
                                    }
                                    if need_x {
                                        gx[ix] += wv * gv;
                                    }
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Axis permutation: `out.shape[i] = shape[axes[i]]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = out_shape.len();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    if n == 0 {
        return x.to_vec();
    }
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis of width `d`. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward<T: Real>(
    g: &[T],
    gamma: &[T],
    xhat: &[T],
    rstd: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / d;
    let mut gx = vec![T::zero(); g.len()];
    let mut gg = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxh = vec![T::zero(); d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            gg[j] += gr[j] * xr[j];
            gbeta[j] += gr[j];
            dxh[j] = gr[j] * gamma[j];
            s1 += dxh[j];
            s2 += dxh[j] * xr[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        for j in 0..d {
            gx[r * d + j] = rstd[r] * (dxh[j] - m1 - xr[j] * m2);
        }
    }
    (gx, gg, gbeta)
}

/// Tensor sizes of a selective scan: batch, length, channels, state.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub chan: usize,
    pub state: usize,
}

/// Sequential selective scan.
///
/// `u, delta: [B,L,C]`, `a: [C,N]`, `bm, cm: [B,L,N]`, `d: [C]`.
/// Returns `(y, h, abar)` where `h` and `abar` are `[B,L,C,N]`.
pub fn scan_forward<T: Real>(
    u: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    d: &[T],
    dims: ScanDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ScanDims {
        batch,
        len,
        chan,
        state,
    } = dims;
    let mut y = vec![T::zero(); batch * len * chan];
    let mut hs = vec![T::zero(); batch * len * chan * state];
    let mut abars = vec![T::zero(); batch * len * chan * state];
    let mut h = vec![T::zero(); chan * state];
    for b in 0..batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..len {
            let tok = (b * len + t) * chan;
            let bt = &bm[(b * len + t) * state..][..state];
            let ct = &cm[(b * len + t) * state..][..state];
            let base = (b * len + t) * chan * state;
            for c in 0..chan {
                let dt = delta[tok + c];
                let uu = u[tok + c];
                let mut acc = d[c] * uu;
                for n in 0..state {
                    let k = c * state + n;
                    let ab = (dt * a[k]).exp();
                    h[k] = ab * h[k] + dt * bt[n] * uu;
                    acc += ct[n] * h[k];
                    abars[base + k] = ab;
                }
                y[tok + c] = acc;
            }
            hs[base..base + chan * state].copy_from_slice(&h);
        }
    }
    (y, hs, abars)
}

/// Gradients of a selective scan: `(gu, gdelta, ga, gb, gc, gd)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Real>(
    gy: &[T],
    u: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    d: &[T],
    hs: &[T],
    abars: &[T],
    dims: ScanDims,
) -> [Vec<T>; 6] {
    let ScanDims {
        batch,
        len,
        chan,
        state,
    } = dims;
    let mut gu = vec![T::zero(); u.len()];
    let mut gdelta = vec![T::zero(); delta.len()];
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); bm.len()];
    let mut gc = vec![T::zero(); cm.len()];
    let mut gd = vec![T::zero(); d.len()];
    let mut dh = vec![T::zero(); chan * state];
    for b in 0..batch {
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let tok = (b * len + t) * chan;
            let soff = (b * len + t) * state;
            let base = (b * len + t) * chan * state;
            for c in 0..chan {
                let g = gy[tok + c];
                let dt = delta[tok + c];
                let uu = u[tok + c];
                gd[c] += g * uu;
                let mut gu_acc = g * d[c];
                let mut gdt = T::zero();
                for n in 0..state {
                    let k = c * state + n;
                    let h_t = hs[base + k];
                    let h_prev = if t > 0 { hs[base - chan * state + k] } else { T::zero() };
                    let ab = abars[base + k];
                    let bn = bm[soff + n];
                    gc[soff + n] += g * h_t;
                    let dhk = dh[k] + cm[soff + n] * g;
                    gdt += dhk * (bn * uu + a[k] * ab * h_prev);
                    gb[soff + n] += dhk * dt * uu;
                    gu_acc += dhk * dt * bn;
                    ga[k] += dhk * dt * ab * h_prev;
                    dh[k] = dhk * ab;
                }
                gu[tok + c] = gu_acc;
                gdelta[tok + c] = gdt;
            }
        }
    }
    [gu, gdelta, ga, gb, gc, gd]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn valid_ranges() {
        // 5-wide input, 3-tap kernel, pad 1, stride 1 -> 5 outputs
        assert_eq!(valid_range(5, 5, 0, 1, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 5, 2, 1, 1), (0, 4));
        // stride 2: 8 wide, pad 1, k 3 -> 4 outputs
        assert_eq!(valid_range(4, 8, 0, 2, 1), (1, 4));
        assert_eq!(valid_range(4, 8, 2, 2, 1), (0, 4));
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let y = permute(&x, &shape, &[2, 0, 1]);
        // out[k,i,j] = x[i,j,k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[(k * 2 + i) * 3 + j], x[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&y, &[4, 2, 3], &inverse_axes(&[2, 0, 1]));
        assert_eq!(back, x);
    }
}
