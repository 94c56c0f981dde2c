//! Hierarchy-sorted Mamba blocks and the four-block backbone.
//!
//! Each sub-block is a pre-norm residual pair over raster tokens `[B,L,C]`:
//!
//! ```text
//! X' = X  + Mix(LN(X))
//! Y  = X' + MLP(LN(X'))
//! ```
//!
//! where `Mix` sorts the tokens by a hierarchy map, scans them once and puts
//! them back. The [`Composition`] decides how the brightness and semantic
//! mixers are arranged inside one block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hierarchy::{build_sort_plan, downsample_map, HierarchyMap, SortPlan};
use crate::nn::{from_tokens, join, to_tokens, Ctx, LayerNorm, Linear, ParamStore};
use crate::ssm::{ss2d_tokens, SsmParams};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    /// Brightness sub-block, then semantic sub-block.
    SequentialBs,
    /// Semantic first.
    SequentialSb,
    /// Both mixers on the same input, outputs summed.
    ParallelSum,
    /// Both mixers at half width, outputs concatenated.
    ParallelConcat,
    /// Fixed four-direction scan, no hierarchy sorting.
    VanillaSs2d,
}

impl Composition {
    pub const ALL: [Composition; 5] = [
        Composition::SequentialBs,
        Composition::SequentialSb,
        Composition::ParallelSum,
        Composition::ParallelConcat,
        Composition::VanillaSs2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composition::SequentialBs => "sequential_BS",
            Composition::SequentialSb => "sequential_SB",
            Composition::ParallelSum => "parallel_sum",
            Composition::ParallelConcat => "parallel_concat",
            Composition::VanillaSs2d => "vanilla_ss2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown composition '{s}' (sequential_BS|sequential_SB|parallel_sum|parallel_concat|vanilla_ss2d)"
                ))
            })
    }

    /// Scan traversals per block.
    pub fn scans_per_block(self) -> usize {
        match self {
            Composition::VanillaSs2d => 4,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Brightness,
    Semantic,
}

impl BranchKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BranchKind::Brightness => "bright",
            BranchKind::Semantic => "sem",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub mlp_expansion: usize,
    pub state: usize,
    pub composition: Composition,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            channels: 32,
            mlp_expansion: 2,
            state: crate::ssm::DEFAULT_STATE,
            composition: Composition::SequentialBs,
        }
    }
}

/// Per-image token orders for both hierarchies, one plan per batch item.
#[derive(Clone, Debug)]
pub struct ScanPlans {
    pub brightness: Vec<SortPlan>,
    pub semantic: Vec<SortPlan>,
}

impl ScanPlans {
    /// Plans for an `h×w` token grid; maps are area-downsampled if larger.
    pub fn from_maps(brightness: &[HierarchyMap], semantic: &[HierarchyMap], h: usize, w: usize) -> Result<Self> {
        if brightness.len() != semantic.len() {
            return Err(Error::Input(format!(
                "{} brightness maps but {} semantic maps",
                brightness.len(),
                semantic.len()
            )));
        }
        let plan = |m: &HierarchyMap| build_sort_plan(&downsample_map(m, h, w)?);
        Ok(ScanPlans {
            brightness: brightness.iter().map(plan).collect::<Result<_>>()?,
            semantic: semantic.iter().map(plan).collect::<Result<_>>()?,
        })
    }

    pub fn identity(batch: usize, len: usize) -> Self {
        ScanPlans {
            brightness: vec![SortPlan::identity(len); batch],
            semantic: vec![SortPlan::identity(len); batch],
        }
    }

    pub fn get(&self, kind: BranchKind) -> &[SortPlan] {
        match kind {
            BranchKind::Brightness => &self.brightness,
            BranchKind::Semantic => &self.semantic,
        }
    }

    pub fn swapped(&self) -> Self {
        ScanPlans {
            brightness: self.semantic.clone(),
            semantic: self.brightness.clone(),
        }
    }
}

/// Sorts raster tokens `[B,L,C]` by `plans`, scans once, restores raster order.
pub fn hierarchy_scan_tokens<'g, T: Real>(
    ctx: &Ctx<'g, '_, T>,
    x: Var<'g, T>,
    plans: &[SortPlan],
    ssm: &SsmParams,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 3 || plans.len() != s[0] {
        return Err(Error::Input(format!(
            "{} sort plans for token batch {s:?}",
            plans.len()
        )));
    }
    if let Some(p) = plans.iter().find(|p| p.len() != s[1]) {
        return Err(Error::shape("hierarchy scan", &s, &[p.len()]));
    }
    let perms: Vec<Vec<usize>> = plans.iter().map(|p| p.forward_index().to_vec()).collect();
    ssm.forward(ctx, x.gather_tokens(&perms)?)?.scatter_tokens(&perms)
}

fn hierarchy_scan<'g, T: Real>(
    ctx: &Ctx<'g, '_, T>,
    x: Var<'g, T>,
    plans: &[SortPlan],
    ssm: &SsmParams,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [B,C,H,W], got {s:?}")));
    }
    let y = hierarchy_scan_tokens(ctx, to_tokens(x)?, plans, ssm)?;
    from_tokens(y, s[2], s[3])
}

/// Brightness hierarchy scan of a feature map `[B,C,H,W]`.
pub fn bhs_apply<'g, T: Real>(
    ctx: &Ctx<'g, '_, T>,
    x: Var<'g, T>,
    plans: &[SortPlan],
    ssm: &SsmParams,
) -> Result<Var<'g, T>> {
    hierarchy_scan(ctx, x, plans, ssm)
}

/// Semantic hierarchy scan; same mechanics as [`bhs_apply`].
pub fn shs_apply<'g, T: Real>(
    ctx: &Ctx<'g, '_, T>,
    x: Var<'g, T>,
    plans: &[SortPlan],
    ssm: &SsmParams,
) -> Result<Var<'g, T>> {
    hierarchy_scan(ctx, x, plans, ssm)
}

/// `silu(in_proj) -> sorted scan -> out_proj`, optionally narrowing to `inner`.
#[derive(Clone, Debug)]
pub struct ScanMixer {
    pub kind: BranchKind,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub ssm: SsmParams,
    pub out_proj: Linear,
}

impl ScanMixer {
    fn new(name: &str, kind: BranchKind, chan: usize, inner: usize, state: usize) -> Self {
        ScanMixer {
            kind,
            norm: LayerNorm::new(join(name, "norm"), chan),
            in_proj: Linear::new(join(name, "in_proj"), chan, inner, true),
            ssm: SsmParams::new(join(name, "ssm"), inner, state),
            out_proj: Linear::new(join(name, "out_proj"), inner, inner, true),
        }
    }

    fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm.init(store);
        self.in_proj.init(store, rng);
        self.ssm.init(store, rng);
        self.out_proj.init(store, rng);
    }

    fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>, plans: &ScanPlans) -> Result<Var<'g, T>> {
        let u = self.in_proj.forward(ctx, self.norm.forward(ctx, x)?)?.silu()?;
        let y = hierarchy_scan_tokens(ctx, u, plans.get(self.kind), &self.ssm)?;
        self.out_proj.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct Ss2dMixer {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub dirs: [SsmParams; 4],
    pub out_proj: Linear,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Single(ScanMixer),
    Sum(ScanMixer, ScanMixer),
    Concat(ScanMixer, ScanMixer),
    Ss2d(Ss2dMixer),
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// One residual mixer + MLP pair.
#[derive(Clone, Debug)]
pub struct SubBlock {
    pub name: String,
    pub mixer: Mixer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SubBlock {
    fn new(name: String, mixer: Mixer, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        let hidden = c * cfg.mlp_expansion;
        SubBlock {
            norm2: LayerNorm::new(join(&name, "norm2"), c),
            mlp: Mlp {
                fc1: Linear::new(join(&name, "mlp.fc1"), c, hidden, true),
                fc2: Linear::new(join(&name, "mlp.fc2"), hidden, c, true),
            },
            mixer,
            name,
        }
    }

    fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        match &self.mixer {
            Mixer::Single(m) => m.init(store, rng),
            Mixer::Sum(a, b) | Mixer::Concat(a, b) => {
                a.init(store, rng);
                b.init(store, rng);
            }
            Mixer::Ss2d(m) => {
                m.norm.init(store);
                m.in_proj.init(store, rng);
                for d in &m.dirs {
                    d.init(store, rng);
                }
                m.out_proj.init(store, rng);
            }
        }
        self.norm2.init(store);
        self.mlp.fc1.init(store, rng);
        self.mlp.fc2.init(store, rng);
    }

    /// `Mix(LN(X))` alone.
    pub fn mix<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        x: Var<'g, T>,
        plans: &ScanPlans,
        grid: (usize, usize),
    ) -> Result<Var<'g, T>> {
        match &self.mixer {
            Mixer::Single(m) => m.forward(ctx, x, plans),
            // summing the branches before the residual keeps exchange symmetry exact
            Mixer::Sum(a, b) => a.forward(ctx, x, plans)?.add(&b.forward(ctx, x, plans)?),
            Mixer::Concat(a, b) => {
                let ya = a.forward(ctx, x, plans)?;
                let yb = b.forward(ctx, x, plans)?;
                ctx.graph().concat(&[ya, yb], 2)
            }
            Mixer::Ss2d(m) => {
                let u = m.in_proj.forward(ctx, m.norm.forward(ctx, x)?)?.silu()?;
                let y = ss2d_tokens(ctx, u, grid.0, grid.1, &m.dirs)?;
                m.out_proj.forward(ctx, y)
            }
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        x: Var<'g, T>,
        plans: &ScanPlans,
        grid: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let x1 = x.add(&self.mix(ctx, x, plans, grid)?)?;
        let h = self.mlp.fc1.forward(ctx, self.norm2.forward(ctx, x1)?)?.gelu()?;
        x1.add(&self.mlp.fc2.forward(ctx, h)?)
    }
}

/// One BSMamba block: one or two sub-blocks depending on the composition.
#[derive(Clone, Debug)]
pub struct BsmambaBlock {
    pub subs: Vec<SubBlock>,
}

impl BsmambaBlock {
    pub fn new(name: &str, cfg: &BlockConfig) -> Self {
        let (c, n) = (cfg.channels, cfg.state);
        let single = |kind: BranchKind| {
            let sub = join(name, kind.prefix());
            SubBlock::new(
                sub.clone(),
                Mixer::Single(ScanMixer::new(&join(&sub, "mix"), kind, c, c, n)),
                cfg,
            )
        };
        let pair = |inner: usize| {
            let sub = join(name, "par");
            let a = ScanMixer::new(&join(&sub, "bright"), BranchKind::Brightness, c, inner, n);
            let b = ScanMixer::new(&join(&sub, "sem"), BranchKind::Semantic, c, inner, n);
            (sub, a, b)
        };
        let subs = match cfg.composition {
            Composition::SequentialBs => vec![single(BranchKind::Brightness), single(BranchKind::Semantic)],
            Composition::SequentialSb => vec![single(BranchKind::Semantic), single(BranchKind::Brightness)],
            Composition::ParallelSum => {
                let (sub, a, b) = pair(c);
                vec![SubBlock::new(sub, Mixer::Sum(a, b), cfg)]
            }
            Composition::ParallelConcat => {
                let (sub, a, b) = pair(c / 2);
                vec![SubBlock::new(sub, Mixer::Concat(a, b), cfg)]
            }
            Composition::VanillaSs2d => {
                let sub = join(name, "ss2d");
                let m = Ss2dMixer {
                    norm: LayerNorm::new(join(&sub, "mix.norm"), c),
                    in_proj: Linear::new(join(&sub, "mix.in_proj"), c, c, true),
                    dirs: std::array::from_fn(|i| SsmParams::new(join(&sub, &format!("mix.dir{i}")), c, n)),
                    out_proj: Linear::new(join(&sub, "mix.out_proj"), c, c, true),
                };
                vec![SubBlock::new(sub, Mixer::Ss2d(m), cfg)]
            }
        };
        BsmambaBlock { subs }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for s in &self.subs {
            s.init(store, rng);
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        mut x: Var<'g, T>,
        plans: &ScanPlans,
        grid: (usize, usize),
    ) -> Result<Var<'g, T>> {
        for s in &self.subs {
            x = s.forward(ctx, x, plans, grid)?;
        }
        Ok(x)
    }
}

pub const NUM_BLOCKS: usize = 4;

/// Clamp used before the logit in the image head.
pub const HEAD_EPS: f64 = 1e-3;

/// Stem convolution, four BSMamba blocks and a 3-channel image head.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BlockConfig,
    pub stem: crate::nn::Conv2d,
    pub blocks: Vec<BsmambaBlock>,
    pub head: crate::nn::Conv2d,
}

/// Backbone outputs.
pub struct BackboneOut<'g, T: Real> {
    /// `[B,C,H,W]`
    pub features: Var<'g, T>,
    /// `[B,3,H,W]` in `(0,1)`
    pub image: Var<'g, T>,
}

impl Backbone {
    pub fn new(cfg: BlockConfig) -> Result<Self> {
        if cfg.channels < 2 || !cfg.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channels must be even and >= 2, got {}",
                cfg.channels
            )));
        }
        if cfg.mlp_expansion == 0 || cfg.state == 0 {
            return Err(Error::Config("mlp_expansion and state_dim must be positive".into()));
        }
        let c = cfg.channels;
        Ok(Backbone {
            stem: crate::nn::Conv2d::same("stem", 3, c, 3),
            blocks: (0..NUM_BLOCKS)
                .map(|i| BsmambaBlock::new(&format!("blocks.{i}"), &cfg))
                .collect(),
            head: crate::nn::Conv2d::same("head", c, 3, 3),
            cfg,
        })
    }

    /// Random init with a zero head, so the intermediate image starts as the input.
    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.head.init_zero(store);
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        image: Var<'g, T>,
        plans: &ScanPlans,
    ) -> Result<BackboneOut<'g, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!("expected [B,3,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let feat = self.stem.forward(ctx, image)?;
        let mut x = to_tokens(feat)?;
        for b in &self.blocks {
            x = b.forward(ctx, x, plans, (h, w))?;
        }
        let features = from_tokens(x, h, w)?;
        let logit = image.clamp(HEAD_EPS, 1.0 - HEAD_EPS)?;
        let logit = logit.div(&logit.neg()?.add_scalar(1.0)?)?.log()?;
        let out = logit.add(&self.head.forward(ctx, features)?)?.sigmoid()?;
        Ok(BackboneOut { features, image: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(comp: Composition) -> (Backbone, ParamStore<f64>) {
        let cfg = BlockConfig {
            channels: 8,
            composition: comp,
            ..BlockConfig::default()
        };
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        bb.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (bb, store)
    }

    #[test]
    fn composition_names_round_trip() {
        for c in Composition::ALL {
            assert_eq!(Composition::parse(c.name()).unwrap(), c);
        }
        assert!(matches!(Composition::parse("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn scan_counts_per_composition() {
        for comp in Composition::ALL {
            let (bb, store) = setup(comp);
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, false);
            let img = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(1), &[1, 3, 4, 4], 0.5).map(|v| v + 0.5));
            let out = bb.forward(&ctx, img, &ScanPlans::identity(1, 16)).unwrap();
            assert_eq!(out.features.shape(), vec![1, 8, 4, 4]);
            assert_eq!(g.scan_count(), NUM_BLOCKS * comp.scans_per_block(), "{comp:?}");
        }
    }

    #[test]
    fn zero_head_passes_image_through() {
        let (bb, store) = setup(Composition::SequentialBs);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let t = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[1, 3, 4, 4], 0.4).map(|v| v + 0.5);
        let out = bb
            .forward(&ctx, g.constant(t.clone()), &ScanPlans::identity(1, 16))
            .unwrap();
        assert!(out.image.value().max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn odd_channels_rejected() {
        let cfg = BlockConfig {
            channels: 7,
            ..BlockConfig::default()
        };
        assert!(matches!(Backbone::new(cfg), Err(Error::Config(_))));
    }
}
