//! Full-image evaluation against references.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::pipeline::dataset::Sample;
use crate::pipeline::enhance::enhance_sample;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub scans: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Scan traversals per forward pass (the same for every image).
    pub scans_per_forward: usize,
}

impl EvalReport {
    /// `metric=value` lines.
    pub fn summary(&self) -> String {
        format!(
            "images={}\npsnr={:.4}\nssim={:.6}\nscans_per_forward={}\n",
            self.rows.len(),
            self.mean_psnr,
            self.mean_ssim,
            self.scans_per_forward
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let csv_err = |e: csv::Error| Error::Io(e.into());
        w.write_record(["image", "psnr", "ssim", "scans"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                format!("{:.6}", r.psnr),
                format!("{:.6}", r.ssim),
                r.scans.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate<T: Real>(model: &Model, params: &ParamStore<T>, samples: &[Sample<T>]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let e = enhance_sample(model, params, s)?;
        let p = psnr(&e.image, &s.high, 1.0)?;
        let q = ssim(&e.image, &s.high)?;
        if !p.is_finite() || !q.is_finite() {
            return Err(Error::NonFinite(format!("metrics of {}", s.name)));
        }
        rows.push(EvalRow {
            name: s.name.clone(),
            psnr: p,
            ssim: q,
            scans: e.scans,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        scans_per_forward: rows[0].scans,
        rows,
    })
}
