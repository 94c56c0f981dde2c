//! Paired low/normal-light datasets laid out as `root/low/*.png` and
//! `root/high/*.png` with matching file names.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hierarchy::{load_score_map, load_sidecar, HierarchyMap, InstanceMaskSet};
use crate::pipeline::imageio::read_rgb;
use crate::tensor::{Real, Tensor};

/// Path of the optional external brightness score map of an image.
pub fn score_map_path(image: &Path) -> PathBuf {
    let mut s = image.with_extension("").into_os_string();
    s.push(".score.pgm");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub low: PathBuf,
    pub high: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub pairs: Vec<PairPaths>,
}

/// One decoded pair with its optional sidecars.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub name: String,
    /// `[3,H,W]`
    pub low: Tensor<T>,
    pub high: Tensor<T>,
    pub masks: Option<InstanceMaskSet>,
    pub score: Option<HierarchyMap>,
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Dataset(format!("cannot list {}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for entry in rd {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decodes every pair and its sidecars.
    pub fn load_samples<T: Real>(&self) -> Result<Vec<Sample<T>>> {
        self.pairs.iter().map(load_sample).collect()
    }
}

pub fn load_sample<T: Real>(p: &PairPaths) -> Result<Sample<T>> {
    let low: Tensor<T> = read_rgb(&p.low)?;
    let high: Tensor<T> = read_rgb(&p.high)?;
    if low.shape() != high.shape() {
        return Err(Error::Dataset(format!(
            "{}: low is {:?} but high is {:?}",
            p.name,
            &low.shape()[1..],
            &high.shape()[1..]
        )));
    }
    let (h, w) = (low.shape()[1], low.shape()[2]);
    let masks = load_sidecar(&p.low)?;
    if let Some(m) = &masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Mask(format!(
                "{}: mask is {}x{} but image is {h}x{w}",
                p.name,
                m.height(),
                m.width()
            )));
        }
    }
    let sp = score_map_path(&p.low);
    let score = if sp.exists() {
        let m = load_score_map(&sp)?;
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Dataset(format!("{}: score map size differs from image", p.name)));
        }
        Some(m)
    } else {
        None
    };
    Ok(Sample {
        name: p.name.clone(),
        low,
        high,
        masks,
        score,
    })
}

/// Matches `low/` and `high/` by file name. Mask sidecars next to the low
/// images are validated here.
pub fn load_dataset(root: &Path) -> Result<PairedDataset> {
    let (low_dir, high_dir) = (root.join("low"), root.join("high"));
    for d in [&low_dir, &high_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", d.display())));
        }
    }
    let lows = png_names(&low_dir)?;
    let highs = png_names(&high_dir)?;
    if let Some(orphan) = lows.symmetric_difference(&highs).next() {
        let side = if lows.contains(orphan) { "high" } else { "low" };
        return Err(Error::Dataset(format!("{orphan} has no counterpart in {side}/")));
    }
    if lows.is_empty() {
        return Err(Error::Dataset(format!("no PNG pairs under {}", root.display())));
    }
    let pairs: Vec<PairPaths> = lows
        .into_iter()
        .map(|name| PairPaths {
            low: low_dir.join(&name),
            high: high_dir.join(&name),
            name,
        })
        .collect();
    for p in &pairs {
        load_sidecar(&p.low)?;
    }
    Ok(PairedDataset {
        root: root.to_path_buf(),
        pairs,
    })
}
