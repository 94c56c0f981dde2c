//! Inference on images of any size.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hierarchy::{brightness_map, build_sort_plan, semantic_map, HierarchyMap, InstanceMaskSet, Scorer};
use crate::model::{plans_for, stack, Model, MIN_SIDE};
use crate::nn::{Ctx, ParamStore};
use crate::pipeline::dataset::{load_sample, PairPaths, Sample};
use crate::pipeline::imageio::{crop, pad_reflect, reflect, write_gray, write_rgb};
use crate::tensor::{Graph, Real, Tensor};

/// Smallest power of two that is `>= n` and `>= 16`.
pub fn padded_side(n: usize) -> usize {
    n.next_power_of_two().max(MIN_SIDE)
}

/// Brightness and semantic maps of a `[3,H,W]` image with optional sidecars.
pub fn sample_maps<T: Real>(
    low: &Tensor<T>,
    scorer: Scorer,
    masks: Option<&InstanceMaskSet>,
    score: Option<&HierarchyMap>,
) -> Result<(HierarchyMap, HierarchyMap)> {
    let (h, w) = (low.shape()[1], low.shape()[2]);
    let bright = match (scorer, score) {
        (Scorer::External, Some(m)) => m.clone(),
        (Scorer::External, None) => brightness_map(low, Scorer::Luma, None)?,
        (s, _) => brightness_map(low, s, None)?,
    };
    let sem = match masks {
        Some(m) => semantic_map(m)?,
        None => semantic_map(&InstanceMaskSet::empty(h, w))?,
    };
    Ok((bright, sem))
}

/// Result of enhancing one image.
pub struct Enhanced<T> {
    /// `[3,H,W]` at the input size.
    pub image: Tensor<T>,
    pub brightness: HierarchyMap,
    pub semantic: HierarchyMap,
    /// Scan traversals in the forward pass.
    pub scans: usize,
}

/// Reflect-pads to power-of-two sides, runs the model, crops back.
pub fn enhance_sample<T: Real>(model: &Model, params: &ParamStore<T>, s: &Sample<T>) -> Result<Enhanced<T>> {
    let (h, w) = (s.low.shape()[1], s.low.shape()[2]);
    let (th, tw) = (padded_side(h), padded_side(w));
    let low = pad_reflect(&s.low, th, tw)?;
    let src = |y: usize, x: usize| (reflect(y as isize, h), reflect(x as isize, w));
    let masks = s.masks.as_ref().map(|m| m.remap(th, tw, src));
    let score = match &s.score {
        Some(m) => {
            let mut v = Vec::with_capacity(th * tw);
            for y in 0..th {
                for x in 0..tw {
                    let (sy, sx) = src(y, x);
                    v.push(m.get(sy, sx));
                }
            }
            Some(HierarchyMap::new(th, tw, v, m.kind(), m.source())?)
        }
        None => None,
    };
    let maps = sample_maps(&low, model.cfg.scorer, masks.as_ref(), score.as_ref())?;
    let plans = plans_for(std::slice::from_ref(&maps), th, tw)?;
    let g = Graph::new();
    let ctx = Ctx::new(&g, params, false);
    let out = model.forward(&ctx, g.constant(stack(std::slice::from_ref(&low))?), &plans)?;
    let full = out.output.value().as_ref().clone().reshaped(&[3, th, tw])?;
    let crop_map = |m: &HierarchyMap| -> Result<HierarchyMap> {
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(m.get(y, x));
            }
        }
        HierarchyMap::new(h, w, v, m.kind(), m.source())
    };
    Ok(Enhanced {
        image: crop(&full, 0, 0, h, w)?,
        brightness: crop_map(&maps.0)?,
        semantic: crop_map(&maps.1)?,
        scans: g.scan_count(),
    })
}

fn output_stem(out_dir: &Path, input: &Path) -> PathBuf {
    let name = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    out_dir.join(name)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

const OUTPUT_SUFFIXES: [&str; 5] = [
    ".enhanced.png",
    ".brightness.png",
    ".semantic.png",
    ".brightness_order.png",
    ".semantic_order.png",
];

/// Images under `input`: the file itself, or the PNGs of a directory, sorted.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Dataset(format!("input {} does not exist", input.display())));
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
                && !OUTPUT_SUFFIXES.iter().any(|s| p.to_string_lossy().ends_with(s))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", input.display())));
    }
    Ok(v)
}

/// Enhances every image under `input` into `out_dir`. Returns written files.
pub fn enhance_path<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    input: &Path,
    out_dir: &Path,
    dump_maps: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in collect_inputs(input)? {
        let pair = PairPaths {
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            low: path.clone(),
            high: path.clone(),
        };
        let sample: Sample<T> = load_sample(&pair)?;
        if sample.masks.is_none() {
            log::warn!("{}: no mask sidecar, semantic map is all background", path.display());
        }
        let e = enhance_sample(model, params, &sample)?;
        let stem = output_stem(out_dir, &path);
        let out = with_suffix(&stem, ".enhanced.png");
        write_rgb(&out, &e.image)?;
        written.push(out);
        if dump_maps {
            let (h, w) = (e.brightness.height(), e.brightness.width());
            let files = [
                (".brightness.png", e.brightness.values().to_vec()),
                (".semantic.png", e.semantic.values().to_vec()),
                (".brightness_order.png", build_sort_plan(&e.brightness)?.rank_map()),
                (".semantic_order.png", build_sort_plan(&e.semantic)?.rank_map()),
            ];
            for (suffix, vals) in files {
                let p = with_suffix(&stem, suffix);
                write_gray(&p, &vals, h, w)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_sides() {
        assert_eq!(padded_side(5), 16);
        assert_eq!(padded_side(16), 16);
        assert_eq!(padded_side(17), 32);
        assert_eq!(padded_side(100), 128);
    }
}
