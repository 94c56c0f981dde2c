//! The full enhancement model: backbone followed by the detail network.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::backbone::{Backbone, BlockConfig, Composition, ScanPlans};
use crate::denet::{DeNet, DEFAULT_ALPHA, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::hierarchy::{brightness_map, semantic_map, HierarchyMap, InstanceMaskSet, Scorer};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::fft::is_pow2;
use crate::tensor::{Real, Tensor, Var};

/// Smallest supported image side.
pub const MIN_SIDE: usize = 16;

/// Architecture settings stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub mlp_expansion: usize,
    pub state_dim: usize,
    pub composition: Composition,
    pub scorer: Scorer,
    pub denet: bool,
    pub denet_width: usize,
    pub ffc_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BlockConfig::default();
        ModelConfig {
            channels: b.channels,
            mlp_expansion: b.mlp_expansion,
            state_dim: b.state,
            composition: b.composition,
            scorer: Scorer::Luma,
            denet: true,
            denet_width: DEFAULT_WIDTH,
            ffc_alpha: DEFAULT_ALPHA,
        }
    }
}

pub const MODEL_KEYS: [&str; 8] = [
    "channels",
    "mlp_expansion",
    "state_dim",
    "composition",
    "scorer",
    "denet",
    "denet_width",
    "ffc_alpha",
];

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            channels: self.channels,
            mlp_expansion: self.mlp_expansion,
            state: self.state_dim,
            composition: self.composition,
        }
    }

    /// Applies one `key = value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_value(key, value)?,
            "mlp_expansion" => self.mlp_expansion = parse_value(key, value)?,
            "state_dim" => self.state_dim = parse_value(key, value)?,
            "composition" => self.composition = Composition::parse(value.trim())?,
            "scorer" => self.scorer = Scorer::parse(value.trim())?,
            "denet" => self.denet = parse_value(key, value)?,
            "denet_width" => self.denet_width = parse_value(key, value)?,
            "ffc_alpha" => self.ffc_alpha = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let vals = [
            self.channels.to_string(),
            self.mlp_expansion.to_string(),
            self.state_dim.to_string(),
            self.composition.name().to_string(),
            self.scorer.name().to_string(),
            self.denet.to_string(),
            self.denet_width.to_string(),
            format!("{:?}", self.ffc_alpha),
        ];
        MODEL_KEYS.into_iter().zip(vals).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses the text written by [`ModelConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in crate::pipeline::config::parse_pairs(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown model setting '{k}'")));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub denet: Option<DeNet>,
}

pub struct ModelOut<'g, T: Real> {
    pub features: Var<'g, T>,
    /// Backbone image, before detail refinement.
    pub intermediate: Var<'g, T>,
    pub output: Var<'g, T>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(cfg.block())?;
        let denet = if cfg.denet {
            Some(DeNet::new(cfg.denet_width, cfg.ffc_alpha)?)
        } else {
            None
        };
        Ok(Model { cfg, backbone, denet })
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, rng);
        if let Some(d) = &self.denet {
            d.init(&mut store, rng);
        }
        store
    }

    /// Names and shapes every checkpoint for this architecture must hold.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let store: ParamStore<f32> = self.init(&mut rng);
        store.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Trainable scalar count of a freshly built model.
    pub fn param_count(&self) -> usize {
        self.expected_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Checks that `store` holds exactly the tensors this architecture needs.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let want = self.expected_shapes();
        for (name, shape) in &want {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, architecture needs {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = store.names().into_iter().find(|n| !want.contains_key(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Ok(())
    }

    pub fn forward<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        image: Var<'g, T>,
        plans: &ScanPlans,
    ) -> Result<ModelOut<'g, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!("expected [B,3,H,W], got {s:?}")));
        }
        if !is_pow2(s[2]) || !is_pow2(s[3]) || s[2] < MIN_SIDE || s[3] < MIN_SIDE {
            return Err(Error::UnsupportedSize(format!(
                "image sides must be powers of two >= {MIN_SIDE}, got {}x{}",
                s[2], s[3]
            )));
        }
        let bb = self.backbone.forward(ctx, image, plans)?;
        let output = match &self.denet {
            Some(d) => d.forward(ctx, bb.image)?,
            None => bb.image,
        };
        Ok(ModelOut {
            features: bb.features,
            intermediate: bb.image,
            output,
        })
    }
}

/// Image `b` of a `[B,C,H,W]` batch as `[C,H,W]`.
pub fn batch_item<T: Real>(batch: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 || b >= s[0] {
        return Err(Error::Input(format!("no item {b} in batch of shape {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    Tensor::new(&s[1..], batch.data()[b * n..(b + 1) * n].to_vec())
}

/// Stacks `[C,H,W]` images into `[B,C,H,W]`.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Brightness and semantic maps of one `[3,H,W]` image.
pub fn image_maps<T: Real>(
    image: &Tensor<T>,
    scorer: Scorer,
    masks: Option<&InstanceMaskSet>,
    external: Option<&Path>,
) -> Result<(HierarchyMap, HierarchyMap)> {
    let s = image.shape();
    let b = brightness_map(image, scorer, external)?;
    let m = match masks {
        Some(m) => m.clone(),
        None => InstanceMaskSet::empty(s[1], s[2]),
    };
    Ok((b, semantic_map(&m)?))
}

/// Sort plans for a batch from per-image maps.
pub fn plans_for(maps: &[(HierarchyMap, HierarchyMap)], h: usize, w: usize) -> Result<ScanPlans> {
    let (b, s): (Vec<_>, Vec<_>) = maps.iter().cloned().unzip();
    ScanPlans::from_maps(&b, &s, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_under_a_million() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let n = m.param_count();
        assert!(n > 10_000 && n < 1_000_000, "{n}");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            composition: Composition::ParallelConcat,
            scorer: Scorer::Histogram,
            denet: false,
            ffc_alpha: 0.25,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus = 1\n").is_err());
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i as f64);
        let b = a.map(|v| -v);
        let s = stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch_item(&s, 1).unwrap(), b);
        assert_eq!(batch_item(&s, 0).unwrap(), a);
    }
}
