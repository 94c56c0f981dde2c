//! Binary PGM (`P5`) reading and writing with raw sample values.
//!
//! Label maps need the stored integers untouched, so samples are never
//! rescaled to the full bit depth.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Raster-order samples, each `<= maxval`.
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("pgm", &[height, width], &[data.len()]));
        }
        if maxval == 0 {
            return Err(Error::Input("pgm maxval must be positive".into()));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Input(format!("pgm sample {v} exceeds maxval {maxval}")));
        }
        Ok(Pgm {
            width,
            height,
            maxval,
            data,
        })
    }

    /// Samples from values in `[0,1]`.
    pub fn from_unit(width: usize, height: usize, maxval: u16, values: &[f64]) -> Result<Self> {
        let m = maxval as f64;
        let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * m).round() as u16).collect();
        Self::new(width, height, maxval, data)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.data.iter().map(|&v| v as f64 / m).collect()
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0usize;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(format_err(path, "not a binary PGM (missing P5 magic)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad or missing {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bps;
    if bytes.len() < start + need {
        return Err(format_err(path, format!("truncated raster: need {need} bytes")));
    }
    let raster = &bytes[start..start + need];
    let data: Vec<u16> = if bps == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Pgm::new(width, height, maxval as u16, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn encode(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for v in &img.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(img.data.iter().map(|&v| v as u8));
    }
    out
}

pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Pgm) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_keeps_raw_values() {
        let img = Pgm::new(3, 2, 65535, vec![0, 1, 2, 300, 65535, 7]).unwrap();
        let back = decode(&encode(&img), Path::new("x.pgm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn eight_bit_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([10u8, 200]);
        let img = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.data, vec![10, 200]);
        assert_eq!(img.maxval, 255);
    }

    #[test]
    fn truncated_is_format_error() {
        let bytes = b"P5 4 4 255\n\x01\x02".to_vec();
        assert!(matches!(decode(&bytes, Path::new("x.pgm")), Err(Error::Format { .. })));
    }

    #[test]
    fn sample_above_maxval_rejected() {
        assert!(Pgm::new(1, 1, 3, vec![4]).is_err());
    }
}
