//! Per-pixel hierarchy scores and the token orders they induce.
//!
//! A [`HierarchyMap`] assigns every pixel a score in `[0,1]`. Flattening the
//! map in raster order and stable-sorting it ascending gives a [`SortPlan`]:
//! the order in which tokens are fed to the scan, plus the inverse index
//! that puts them back.

mod masks;

use std::path::Path;

pub use masks::{
    load_sidecar, semantic_map, semantic_ranges, sidecar_paths, validate_sidecar, write_sidecar, Instance,
    InstanceMaskSet, SidecarPaths,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Brightness,
    Semantic,
}

/// `H×W` map of scores in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: MapKind,
    source: String,
}

impl HierarchyMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        kind: MapKind,
        source: impl Into<String>,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("hierarchy map", &[height, width], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!("hierarchy score {v} outside [0,1]")));
        }
        Ok(HierarchyMap {
            height,
            width,
            values,
            kind,
            source: source.into(),
        })
    }

    pub fn constant(height: usize, width: usize, v: f64, kind: MapKind, source: &str) -> Result<Self> {
        Self::new(height, width, vec![v; height * width], kind, source)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Brightness scorer choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    /// BT.601 luma.
    Luma,
    /// Empirical CDF of the luma histogram.
    Histogram,
    /// Score map read from a `<stem>.score.pgm` sidecar.
    External,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Luma => "luma",
            Scorer::Histogram => "histogram",
            Scorer::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "luma" => Ok(Scorer::Luma),
            "histogram" => Ok(Scorer::Histogram),
            "external" => Ok(Scorer::External),
            _ => Err(Error::Config(format!("unknown scorer '{s}' (luma|histogram|external)"))),
        }
    }
}

pub const HISTOGRAM_BINS: usize = 256;

fn rgb_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("expected an RGB image [3,H,W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Per-pixel BT.601 luma of an RGB image `[3,H,W]`, clamped to `[0,1]`.
pub fn luma<T: Real>(image: &Tensor<T>) -> Result<Vec<f64>> {
    let (h, w) = rgb_dims(image)?;
    let d = image.data();
    let plane = h * w;
    Ok((0..plane)
        .map(|i| {
            let y = LUMA_WEIGHTS[0] * d[i].to_f64_lossy()
                + LUMA_WEIGHTS[1] * d[plane + i].to_f64_lossy()
                + LUMA_WEIGHTS[2] * d[2 * plane + i].to_f64_lossy();
            y.clamp(0.0, 1.0)
        })
        .collect())
}

pub fn luma_score<T: Real>(image: &Tensor<T>) -> Result<HierarchyMap> {
    let (h, w) = rgb_dims(image)?;
    HierarchyMap::new(h, w, luma(image)?, MapKind::Brightness, "luma")
}

/// Scores each pixel with the empirical CDF of its luma bin.
pub fn histogram_score<T: Real>(image: &Tensor<T>, bins: usize) -> Result<HierarchyMap> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let (h, w) = rgb_dims(image)?;
    let y = luma(image)?;
    let bin_of = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &v in &y {
        counts[bin_of(v)] += 1;
    }
    let total = y.len() as f64;
    let mut cdf = vec![0.0; bins];
    let mut acc = 0usize;
    for (c, n) in cdf.iter_mut().zip(&counts) {
        acc += n;
        *c = acc as f64 / total;
    }
    let values = y.iter().map(|&v| cdf[bin_of(v)]).collect();
    HierarchyMap::new(h, w, values, MapKind::Brightness, "histogram")
}

/// Reads an external score map (8- or 16-bit grayscale, normalized by the
/// maximum code value).
pub fn load_score_map(path: &Path) -> Result<HierarchyMap> {
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let g = img.to_luma16();
    let (w, h) = g.dimensions();
    let values = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    HierarchyMap::new(h as usize, w as usize, values, MapKind::Brightness, "external")
}

/// Computes the brightness map of an RGB image with the chosen scorer.
/// `external` falls back to luma when no score file is given.
pub fn brightness_map<T: Real>(image: &Tensor<T>, scorer: Scorer, external: Option<&Path>) -> Result<HierarchyMap> {
    match scorer {
        Scorer::Luma => luma_score(image),
        Scorer::Histogram => histogram_score(image, HISTOGRAM_BINS),
        Scorer::External => match external {
            Some(p) => load_score_map(p),
            None => {
                log::warn!("no external score map; using luma");
                luma_score(image)
            }
        },
    }
}

/// Token order for one image: `forward_index[i]` is the raster position of
/// the `i`-th token after sorting, `inverse_index` undoes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SortPlan {
    forward_index: Vec<usize>,
    inverse_index: Vec<usize>,
    key_snapshot: Vec<f64>,
}

impl SortPlan {
    pub fn identity(len: usize) -> Self {
        SortPlan {
            forward_index: (0..len).collect(),
            inverse_index: (0..len).collect(),
            key_snapshot: vec![0.0; len],
        }
    }

    /// Plan from an explicit permutation; keys are the sort positions.
    pub fn from_permutation(forward: Vec<usize>) -> Result<Self> {
        let len = forward.len();
        let mut inverse = vec![usize::MAX; len];
        for (i, &f) in forward.iter().enumerate() {
            if f >= len || inverse[f] != usize::MAX {
                return Err(Error::Permutation(format!(
                    "invalid entry {f} in order of length {len}"
                )));
            }
            inverse[f] = i;
        }
        let mut keys = vec![0.0; len];
        for (i, &f) in forward.iter().enumerate() {
            keys[f] = i as f64;
        }
        Ok(SortPlan {
            forward_index: forward,
            inverse_index: inverse,
            key_snapshot: keys,
        })
    }

    pub fn len(&self) -> usize {
        self.forward_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward_index.is_empty()
    }

    pub fn forward_index(&self) -> &[usize] {
        &self.forward_index
    }

    pub fn inverse_index(&self) -> &[usize] {
        &self.inverse_index
    }

    /// Scores the plan was built from, in raster order.
    pub fn keys(&self) -> &[f64] {
        &self.key_snapshot
    }

    pub fn is_identity(&self) -> bool {
        self.forward_index.iter().enumerate().all(|(i, &f)| i == f)
    }

    /// Reorders a raster-order sequence into sorted order.
    pub fn apply<V: Clone>(&self, seq: &[V]) -> Vec<V> {
        self.forward_index.iter().map(|&i| seq[i].clone()).collect()
    }

    /// Puts a sorted sequence back into raster order.
    pub fn undo<V: Clone>(&self, seq: &[V]) -> Vec<V> {
        self.inverse_index.iter().map(|&i| seq[i].clone()).collect()
    }

    /// Rank of every raster position, scaled to `[0,1]`.
    pub fn rank_map(&self) -> Vec<f64> {
        let denom = (self.len().max(2) - 1) as f64;
        self.inverse_index.iter().map(|&r| r as f64 / denom).collect()
    }
}

/// Stable ascending argsort of the raster-flattened scores.
pub fn build_sort_plan(map: &HierarchyMap) -> Result<SortPlan> {
    sort_plan_from_keys(map.values())
}

pub fn sort_plan_from_keys(keys: &[f64]) -> Result<SortPlan> {
    if let Some(k) = keys.iter().find(|k| !k.is_finite()) {
        return Err(Error::Input(format!("non-finite hierarchy score {k}")));
    }
    let mut forward: Vec<usize> = (0..keys.len()).collect();
    // sort_by is stable, so ties keep raster order
    forward.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut inverse = vec![0; keys.len()];
    for (i, &f) in forward.iter().enumerate() {
        inverse[f] = i;
    }
    Ok(SortPlan {
        forward_index: forward,
        inverse_index: inverse,
        key_snapshot: keys.to_vec(),
    })
}

/// Area-average pooling to `th×tw`; both factors must be integers.
pub fn downsample_map(map: &HierarchyMap, th: usize, tw: usize) -> Result<HierarchyMap> {
    let (h, w) = (map.height, map.width);
    if th == 0 || tw == 0 || th > h || tw > w || h % th != 0 || w % tw != 0 {
        return Err(Error::Config(format!(
            "cannot downsample {h}x{w} map to {th}x{tw} by an integer factor"
        )));
    }
    if th == h && tw == w {
        return Ok(map.clone());
    }
    let (fy, fx) = (h / th, w / tw);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            let mut s = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += map.values[(y * fy + dy) * w + x * fx + dx];
                }
            }
            out.push((s * inv).clamp(0.0, 1.0));
        }
    }
    HierarchyMap::new(th, tw, out, map.kind, map.source.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, px: impl Fn(usize) -> [f64; 3]) -> Tensor<f64> {
        let mut d = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            let p = px(i);
            for c in 0..3 {
                d[c * h * w + i] = p[c];
            }
        }
        Tensor::new(&[3, h, w], d).unwrap()
    }

    #[test]
    fn luma_examples() {
        let white = luma_score(&rgb(1, 1, |_| [1.0, 1.0, 1.0])).unwrap();
        assert!((white.get(0, 0) - 1.0).abs() < 1e-12);
        let black = luma_score(&rgb(1, 1, |_| [0.0; 3])).unwrap();
        assert_eq!(black.get(0, 0), 0.0);
        let red = luma_score(&rgb(1, 1, |_| [1.0, 0.0, 0.0])).unwrap();
        assert!((red.get(0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn luma_rejects_wrong_channels() {
        let t = Tensor::<f64>::zeros(&[4, 2, 2]);
        assert!(matches!(luma_score(&t), Err(Error::Input(_))));
    }

    #[test]
    fn histogram_examples() {
        let c = histogram_score(&rgb(4, 4, |_| [0.3, 0.3, 0.3]), 256).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));

        let half = histogram_score(&rgb(2, 2, |i| if i < 2 { [0.0; 3] } else { [1.0; 3] }), 256).unwrap();
        assert_eq!(half.values(), &[0.5, 0.5, 1.0, 1.0]);

        assert!(matches!(
            histogram_score(&rgb(1, 1, |_| [0.0; 3]), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sort_plan_example() {
        let m = HierarchyMap::new(1, 3, vec![0.3, 0.1, 0.2], MapKind::Brightness, "t").unwrap();
        let p = build_sort_plan(&m).unwrap();
        assert_eq!(p.forward_index(), &[1, 2, 0]);
        assert_eq!(p.inverse_index(), &[2, 0, 1]);
    }

    #[test]
    fn constant_map_gives_identity() {
        let m = HierarchyMap::constant(4, 5, 0.5, MapKind::Semantic, "t").unwrap();
        assert!(build_sort_plan(&m).unwrap().is_identity());
    }

    #[test]
    fn non_finite_keys_rejected() {
        assert!(matches!(sort_plan_from_keys(&[0.1, f64::NAN]), Err(Error::Input(_))));
    }

    #[test]
    fn downsample_examples() {
        let m = HierarchyMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0], MapKind::Brightness, "t").unwrap();
        assert_eq!(downsample_map(&m, 1, 1).unwrap().values(), &[0.5]);
        let c = HierarchyMap::constant(8, 8, 0.25, MapKind::Brightness, "t").unwrap();
        assert!(downsample_map(&c, 2, 4).unwrap().values().iter().all(|&v| v == 0.25));
        assert!(matches!(downsample_map(&c, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn plan_apply_undo() {
        let m = HierarchyMap::new(2, 2, vec![0.9, 0.1, 0.5, 0.3], MapKind::Brightness, "t").unwrap();
        let p = build_sort_plan(&m).unwrap();
        let seq = vec!['a', 'b', 'c', 'd'];
        assert_eq!(p.apply(&seq), vec!['b', 'd', 'c', 'a']);
        assert_eq!(p.undo(&p.apply(&seq)), seq);
    }
}
