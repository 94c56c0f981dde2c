//! Detail enhancement network: a small encoder/decoder with a Fourier
//! convolution bottleneck that predicts a residual on top of the image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Ctx, ParamStore};
use crate::tensor::{Real, Tensor, Var};

/// Fraction of channels routed through the spectral branch.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Fast Fourier convolution block with a residual connection.
///
/// Channels split into a local part (3×3 conv) and a global part whose 1×1
/// conv acts on the stacked real/imaginary planes of its 2-D spectrum. The
/// two parts exchange information through 1×1 cross convs.
#[derive(Clone, Debug)]
pub struct FfcBlock {
    pub name: String,
    pub local_ch: usize,
    pub global_ch: usize,
    pub local: Conv2d,
    pub spectral: Conv2d,
    pub l2g: Conv2d,
    pub g2l: Conv2d,
}

impl FfcBlock {
    pub fn new(name: &str, chan: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("ffc split ratio must be in (0,1), got {alpha}")));
        }
        let global_ch = ((chan as f64) * alpha).round() as usize;
        if global_ch == 0 || global_ch >= chan {
            return Err(Error::Config(format!(
                "ffc split {alpha} leaves an empty branch of {chan} channels"
            )));
        }
        let local_ch = chan - global_ch;
        Ok(FfcBlock {
            name: name.to_string(),
            local_ch,
            global_ch,
            local: Conv2d::same(join(name, "local"), local_ch, local_ch, 3),
            spectral: Conv2d::same(join(name, "spectral"), 2 * global_ch, 2 * global_ch, 1),
            l2g: Conv2d::same(join(name, "l2g"), local_ch, global_ch, 1),
            g2l: Conv2d::same(join(name, "g2l"), global_ch, local_ch, 1),
        })
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in [&self.local, &self.spectral, &self.l2g, &self.g2l] {
            c.init(store, rng);
        }
    }

    /// Sets the spectral conv to the identity, making the spectral branch an
    /// FFT round trip.
    pub fn set_identity_spectral<T: Real>(&self, store: &mut ParamStore<T>) {
        let k = 2 * self.global_ch;
        store.insert(
            self.spectral.weight_name(),
            Tensor::eye(k).reshaped(&[k, k, 1, 1]).expect("square"),
        );
        store.insert(self.spectral.bias_name(), Tensor::zeros(&[k]));
    }

    /// `irfft2(conv1x1(rfft2(x)))` on the global channels.
    pub fn spectral_branch<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, xg: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = xg.shape()[3];
        self.spectral.forward(ctx, xg.rfft2()?)?.irfft2(w)
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.local_ch + self.global_ch {
            return Err(Error::shape("ffc", &s, &[self.local_ch + self.global_ch]));
        }
        let parts = x.split(1, &[self.local_ch, self.global_ch])?;
        let (xl, xg) = (parts[0], parts[1]);
        let yl = self.local.forward(ctx, xl)?.add(&self.g2l.forward(ctx, xg)?)?;
        let yg = self.spectral_branch(ctx, xg)?.add(&self.l2g.forward(ctx, xl)?)?;
        let y = ctx.graph().concat(&[yl, yg], 1)?.gelu()?;
        x.add(&y)
    }
}

#[derive(Clone, Debug)]
pub struct DeNet {
    pub width: usize,
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub ffc: Vec<FfcBlock>,
    pub dec1: Conv2d,
    pub dec2: Conv2d,
    pub out: Conv2d,
}

pub const DEFAULT_WIDTH: usize = 16;
pub const FFC_BLOCKS: usize = 2;

impl DeNet {
    pub fn new(width: usize, alpha: f64) -> Result<Self> {
        if width < 2 {
            return Err(Error::Config(format!("denet width must be >= 2, got {width}")));
        }
        let w2 = 2 * width;
        Ok(DeNet {
            width,
            enc1: Conv2d::strided("denet.enc1", 3, width, 3, 2),
            enc2: Conv2d::strided("denet.enc2", width, w2, 3, 2),
            ffc: (0..FFC_BLOCKS)
                .map(|i| FfcBlock::new(&format!("denet.ffc{i}"), w2, alpha))
                .collect::<Result<_>>()?,
            dec1: Conv2d::same("denet.dec1", w2, width, 3),
            dec2: Conv2d::same("denet.dec2", width, width, 3),
            out: Conv2d::same("denet.out", width + 3, 3, 3),
        })
    }

    /// Random init with a zero output conv, so the network starts as the identity.
    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in [&self.enc1, &self.enc2] {
            c.init(store, rng);
        }
        for f in &self.ffc {
            f.init(store, rng);
        }
        for c in [&self.dec1, &self.dec2] {
            c.init(store, rng);
        }
        self.out.init_zero(store);
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.forward_traced(ctx, image)?.0)
    }

    /// Forward pass that also reports the spatial size after each stage:
    /// two encoder stages, the bottleneck, two decoder stages.
    pub fn forward_traced<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        image: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Vec<[usize; 2]>)> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!("expected [B,3,H,W], got {s:?}")));
        }
        if !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(Error::Input(format!(
                "denet needs sides divisible by 4, got {}x{}",
                s[2], s[3]
            )));
        }
        let hw = |v: &Var<'g, T>| {
            let s = v.shape();
            [s[2], s[3]]
        };
        let mut trace = Vec::with_capacity(5);
        let e1 = self.enc1.forward(ctx, image)?.gelu()?;
        trace.push(hw(&e1));
        let e2 = self.enc2.forward(ctx, e1)?.gelu()?;
        trace.push(hw(&e2));
        let mut b = e2;
        for f in &self.ffc {
            b = f.forward(ctx, b)?;
        }
        trace.push(hw(&b));
        let d1 = self.dec1.forward(ctx, b.upsample2x()?)?.gelu()?.add(&e1)?;
        trace.push(hw(&d1));
        let d2 = self.dec2.forward(ctx, d1.upsample2x()?)?.gelu()?;
        trace.push(hw(&d2));
        let res = self.out.forward(ctx, ctx.graph().concat(&[d2, image], 1)?)?;
        Ok((image.add(&res)?.clamp(0.0, 1.0)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_shapes_and_identity_at_init() {
        let net = DeNet::new(DEFAULT_WIDTH, DEFAULT_ALPHA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        net.init(&mut store, &mut rng);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let img = uniform::<f64, _>(&mut rng, &[1, 3, 32, 32], 0.5).map(|v| v + 0.5);
        let (out, trace) = net.forward_traced(&ctx, g.constant(img.clone())).unwrap();
        assert_eq!(trace, vec![[16, 16], [8, 8], [8, 8], [16, 16], [32, 32]]);
        assert_eq!(*out.value(), img);
    }

    #[test]
    fn identity_spectral_branch_round_trips() {
        let f = FfcBlock::new("f", 8, DEFAULT_ALPHA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        f.init(&mut store, &mut rng);
        f.set_identity_spectral(&mut store);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = uniform::<f64, _>(&mut rng, &[2, 4, 8, 8], 1.0);
        let y = f.spectral_branch(&ctx, g.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn bad_sizes_rejected() {
        let net = DeNet::new(4, DEFAULT_ALPHA).unwrap();
        let mut store = ParamStore::<f64>::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 18, 18]));
        assert!(matches!(net.forward(&ctx, x), Err(Error::Input(_))));
        let x = g.constant(Tensor::zeros(&[1, 3, 24, 24]));
        assert!(matches!(net.forward(&ctx, x), Err(Error::UnsupportedSize(_))));
        assert!(FfcBlock::new("f", 8, 1.0).is_err());
    }
}
