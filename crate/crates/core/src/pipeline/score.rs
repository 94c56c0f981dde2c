//! Standalone brightness scoring.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{histogram_score, luma_score, HierarchyMap, Scorer, HISTOGRAM_BINS};
use crate::pipeline::imageio::read_rgb;
use crate::pipeline::pgm::{self, Pgm};

/// Scores an image with a built-in scorer.
pub fn score_image(path: &Path, scorer: Scorer) -> Result<HierarchyMap> {
    let img = read_rgb::<f64>(path)?;
    match scorer {
        Scorer::Luma => luma_score(&img),
        Scorer::Histogram => histogram_score(&img, HISTOGRAM_BINS),
        Scorer::External => Err(Error::Config("score needs a built-in scorer (luma|histogram)".into())),
    }
}

/// Writes a score map as a 16-bit PGM.
pub fn write_score(path: &Path, map: &HierarchyMap) -> Result<()> {
    pgm::write(path, &Pgm::from_unit(map.width(), map.height(), 65535, map.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::imageio::write_rgb;
    use crate::tensor::Tensor;

    #[test]
    fn luma_round_trips_through_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f64>::from_fn(&[3, 4, 5], |i| (i % 20) as f64 / 19.0);
        let src = dir.path().join("a.png");
        write_rgb(&src, &img).unwrap();
        let map = score_image(&src, Scorer::Luma).unwrap();
        let out = dir.path().join("a.pgm");
        write_score(&out, &map).unwrap();
        let back = pgm::read(&out).unwrap();
        assert_eq!((back.width, back.height, back.maxval), (5, 4, 65535));
        for (a, b) in back.to_unit().iter().zip(map.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert!(score_image(&src, Scorer::External).is_err());
    }
}
