//! Instance masks, the semantic grading map and the mask sidecar files.
//!
//! Sidecars for an image `dir/name.png`:
//!
//! - `dir/name.inst.pgm`: 16-bit label map, 0 = background, k = instance k.
//! - `dir/name.inst.txt`: one `<id> <confidence>` line per instance, ids
//!   contiguous from 1.
//! - `dir/name.inst.<id>.pgm` (optional): 8-bit soft mask, value/255.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{HierarchyMap, MapKind};
use crate::error::{Error, Result};
use crate::pipeline::pgm;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u32,
    /// Detector confidence in `[0,1]`.
    pub score: f64,
    /// Per-pixel membership in `[0,1]`, raster order.
    pub mask: Vec<f64>,
}

/// Instance masks of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    height: usize,
    width: usize,
    instances: Vec<Instance>,
}

impl InstanceMaskSet {
    pub fn new(height: usize, width: usize, instances: Vec<Instance>) -> Result<Self> {
        for inst in &instances {
            if inst.mask.len() != height * width {
                return Err(Error::Input(format!(
                    "instance {} mask has {} pixels, expected {height}x{width}",
                    inst.id,
                    inst.mask.len()
                )));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::Mask(format!(
                    "instance {} confidence {} outside [0,1]",
                    inst.id, inst.score
                )));
            }
            if inst.mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(Error::Mask(format!("instance {} mask value outside [0,1]", inst.id)));
            }
        }
        Ok(InstanceMaskSet {
            height,
            width,
            instances,
        })
    }

    /// No detections: every pixel is background.
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceMaskSet {
            height,
            width,
            instances: vec![],
        }
    }

    /// Builds binary instance masks from a label map, with optional soft
    /// masks overriding the binary ones.
    pub fn from_labels(
        height: usize,
        width: usize,
        labels: &[u16],
        scores: &[(u32, f64)],
        soft: &BTreeMap<u32, Vec<f64>>,
    ) -> Result<Self> {
        let instances = scores
            .iter()
            .map(|&(id, score)| {
                let mask = match soft.get(&id) {
                    Some(m) => m.clone(),
                    None => labels.iter().map(|&l| if l as u32 == id { 1.0 } else { 0.0 }).collect(),
                };
                Instance { id, score, mask }
            })
            .collect();
        Self::new(height, width, instances)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// `M_bg = 1 − max_i M_i`, clamped to `[0,1]`.
    pub fn background(&self) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|p| {
                let m = self.instances.iter().map(|i| i.mask[p]).fold(0.0, f64::max);
                (1.0 - m).clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Resamples every mask onto a new grid; `src(y, x)` gives the source
    /// pixel for each destination pixel (nearest sampling).
    pub fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let instances = self
            .instances
            .iter()
            .map(|inst| {
                let mut mask = Vec::with_capacity(height * width);
                for y in 0..height {
                    for x in 0..width {
                        let (sy, sx) = src(y, x);
                        mask.push(inst.mask[sy * self.width + sx]);
                    }
                }
                Instance {
                    id: inst.id,
                    score: inst.score,
                    mask,
                }
            })
            .collect();
        InstanceMaskSet {
            height,
            width,
            instances,
        }
    }
}

/// The `n+1` grading ranges `[i/(n+1), (i+1)/(n+1)]`; index 0 is background.
pub fn semantic_ranges(n: usize) -> Vec<(f64, f64)> {
    let d = (n + 1) as f64;
    (0..=n).map(|i| (i as f64 / d, (i + 1) as f64 / d)).collect()
}

/// Grades instances into disjoint score ranges.
///
/// Instances are ranked by ascending confidence (ties by id), so the most
/// confident instance owns the top range. A pixel of the rank-`i` instance
/// with membership `m` and confidence `S` scores `(i + clamp(m·S, 0, 1))/(n+1)`;
/// overlaps go to the higher rank; background pixels sit at the middle of
/// the lowest range.
pub fn semantic_map(masks: &InstanceMaskSet) -> Result<HierarchyMap> {
    let n = masks.len();
    let d = (n + 1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ia, ib) = (&masks.instances[a], &masks.instances[b]);
        ia.score.total_cmp(&ib.score).then(ia.id.cmp(&ib.id))
    });
    let plane = masks.height * masks.width;
    let mut values = vec![0.5 / d; plane];
    // walk ranks upward so higher ranks overwrite overlaps
    for (r, &idx) in order.iter().enumerate() {
        let inst = &masks.instances[idx];
        let rank = (r + 1) as f64;
        for (v, &m) in values.iter_mut().zip(&inst.mask) {
            if m > 0.0 {
                *v = (rank + (m * inst.score).clamp(0.0, 1.0)) / d;
            }
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    HierarchyMap::new(masks.height, masks.width, values, MapKind::Semantic, "semantic")
}

/// Locations of the sidecar files belonging to an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidecarPaths {
    pub labels: PathBuf,
    pub scores: PathBuf,
    stem: PathBuf,
}

impl SidecarPaths {
    pub fn soft_mask(&self, id: u32) -> PathBuf {
        let mut s = self.stem.clone().into_os_string();
        s.push(format!(".inst.{id}.pgm"));
        PathBuf::from(s)
    }
}

pub fn sidecar_paths(image: &Path) -> SidecarPaths {
    let stem = image.with_extension("");
    let with = |suffix: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    SidecarPaths {
        labels: with(".inst.pgm"),
        scores: with(".inst.txt"),
        stem,
    }
}

fn parse_scores(path: &Path) -> Result<Vec<(u32, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = || Error::Mask(format!("{}:{}: expected '<id> <confidence>'", path.display(), ln + 1));
        let id: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let score: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Mask(format!(
                "{}: confidence {score} of id {id} outside [0,1]",
                path.display()
            )));
        }
        out.push((id, score));
    }
    let mut ids: Vec<u32> = out.iter().map(|p| p.0).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &id)| id as usize != i + 1) {
        return Err(Error::Mask(format!(
            "{}: ids must be contiguous from 1, got {ids:?}",
            path.display()
        )));
    }
    out.sort_by_key(|p| p.0);
    Ok(out)
}

/// Summary of a validated sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct SidecarSummary {
    pub height: usize,
    pub width: usize,
    pub instances: usize,
    pub soft_masks: usize,
}

/// Reads and validates the sidecar of `image`. Returns `None` when there is
/// no label map.
pub fn load_sidecar(image: &Path) -> Result<Option<InstanceMaskSet>> {
    let paths = sidecar_paths(image);
    if !paths.labels.exists() {
        return Ok(None);
    }
    let labels = pgm::read(&paths.labels)?;
    if !paths.scores.exists() {
        return Err(Error::Mask(format!(
            "{} has no score file {}",
            paths.labels.display(),
            paths.scores.display()
        )));
    }
    let scores = parse_scores(&paths.scores)?;
    let n = scores.len();
    let max_label = labels.data.iter().copied().max().unwrap_or(0) as usize;
    if max_label > n {
        return Err(Error::Mask(format!(
            "{} uses instance ids up to {max_label} but {} lists {n} score lines",
            paths.labels.display(),
            paths.scores.display()
        )));
    }
    let mut soft = BTreeMap::new();
    for &(id, _) in &scores {
        let p = paths.soft_mask(id);
        if p.exists() {
            let m = pgm::read(&p)?;
            if (m.width, m.height) != (labels.width, labels.height) {
                return Err(Error::Mask(format!(
                    "{} is {}x{}, label map is {}x{}",
                    p.display(),
                    m.width,
                    m.height,
                    labels.width,
                    labels.height
                )));
            }
            let scale = 1.0 / m.maxval as f64;
            soft.insert(id, m.data.iter().map(|&v| v as f64 * scale).collect());
        }
    }
    InstanceMaskSet::from_labels(labels.height, labels.width, &labels.data, &scores, &soft).map(Some)
}

/// Validates the sidecar of `image` without keeping the masks.
pub fn validate_sidecar(image: &Path) -> Result<Option<SidecarSummary>> {
    let paths = sidecar_paths(image);
    Ok(load_sidecar(image)?.map(|set| SidecarSummary {
        height: set.height,
        width: set.width,
        instances: set.len(),
        soft_masks: set.instances.iter().filter(|i| paths.soft_mask(i.id).exists()).count(),
    }))
}

/// Writes a label map (highest-confidence instance wins on overlap), the
/// score file, and one soft mask per instance whose mask is not binary.
pub fn write_sidecar(image: &Path, set: &InstanceMaskSet) -> Result<SidecarPaths> {
    let paths = sidecar_paths(image);
    let mut labels = vec![0u16; set.height * set.width];
    let mut order: Vec<&Instance> = set.instances.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)));
    for inst in &order {
        for (l, &m) in labels.iter_mut().zip(&inst.mask) {
            if m > 0.0 {
                *l = inst.id as u16;
            }
        }
    }
    pgm::write(&paths.labels, &pgm::Pgm::new(set.width, set.height, 65535, labels)?)?;
    let mut txt = String::new();
    let mut by_id: Vec<&Instance> = set.instances.iter().collect();
    by_id.sort_by_key(|i| i.id);
    for inst in &by_id {
        txt.push_str(&format!("{} {}\n", inst.id, inst.score));
        if inst.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            let data = inst.mask.iter().map(|&m| (m * 255.0).round() as u16).collect();
            pgm::write(
                &paths.soft_mask(inst.id),
                &pgm::Pgm::new(set.width, set.height, 255, data)?,
            )?;
        }
    }
    fs::write(&paths.scores, txt)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(id: u32, score: f64, mask: &[u8]) -> Instance {
        Instance {
            id,
            score,
            mask: mask.iter().map(|&m| m as f64).collect(),
        }
    }

    #[test]
    fn ranges_for_two_instances() {
        let r = semantic_ranges(2);
        assert_eq!(r, vec![(0.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0), (2.0 / 3.0, 1.0)]);
    }

    #[test]
    fn no_instances_is_constant_half() {
        let m = semantic_map(&InstanceMaskSet::empty(3, 4)).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_binary_instance() {
        let set = InstanceMaskSet::new(1, 4, vec![binary(1, 0.9, &[1, 1, 0, 0])]).unwrap();
        let m = semantic_map(&set).unwrap();
        assert!((m.values()[0] - 0.95).abs() < 1e-15);
        assert!((m.values()[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn higher_confidence_gets_higher_range_and_wins_overlap() {
        let set = InstanceMaskSet::new(1, 3, vec![binary(1, 0.95, &[1, 1, 0]), binary(2, 0.6, &[0, 1, 1])]).unwrap();
        let m = semantic_map(&set).unwrap();
        // id 2 is rank 1, id 1 is rank 2
        assert!((m.values()[2] - (1.0 + 0.6) / 3.0).abs() < 1e-15);
        assert!((m.values()[0] - (2.0 + 0.95) / 3.0).abs() < 1e-15);
        assert_eq!(m.values()[1], m.values()[0]);
    }

    #[test]
    fn background_complements_max_mask() {
        let set = InstanceMaskSet::new(
            1,
            2,
            vec![Instance {
                id: 1,
                score: 0.5,
                mask: vec![0.25, 0.0],
            }],
        )
        .unwrap();
        assert_eq!(set.background(), vec![0.75, 1.0]);
    }

    #[test]
    fn rejects_bad_scores() {
        assert!(InstanceMaskSet::new(1, 1, vec![binary(1, 1.5, &[1])]).is_err());
        assert!(InstanceMaskSet::new(1, 2, vec![binary(1, 0.5, &[1])]).is_err());
    }

    #[test]
    fn sidecar_paths_follow_image_stem() {
        let p = sidecar_paths(Path::new("/d/a.png"));
        assert_eq!(p.labels, PathBuf::from("/d/a.inst.pgm"));
        assert_eq!(p.scores, PathBuf::from("/d/a.inst.txt"));
        assert_eq!(p.soft_mask(3), PathBuf::from("/d/a.inst.3.pgm"));
    }
}
