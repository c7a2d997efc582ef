//! Per-band z-score statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{BandId, BandStack, Planes};
use crate::error::{Error, FormatError, Result};

pub const NORM_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub band: BandId,
    pub mean: f64,
    pub std: f64,
}

/// Training-set statistics, one entry per band in stack order.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub bands: Vec<BandStats>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn new(bands: Vec<BandStats>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Raster("norm stats need at least one band".into()));
        }
        for b in &bands {
            if !(b.std >= 0.0) || !b.mean.is_finite() || !b.std.is_finite() {
                return Err(Error::Raster(format!(
                    "band {} has invalid stats mean={} std={}",
                    b.band, b.mean, b.std
                )));
            }
        }
        Ok(Self {
            bands,
            epsilon: NORM_EPSILON,
        })
    }

    pub fn band_ids(&self) -> Vec<BandId> {
        self.bands.iter().map(|b| b.band.clone()).collect()
    }

    fn check_bands(&self, stack: &BandStack) -> Result<()> {
        let matches = stack.bands().len() == self.bands.len()
            && stack
                .bands()
                .iter()
                .zip(&self.bands)
                .all(|(a, b)| *a == b.band);
        if matches {
            Ok(())
        } else {
            Err(Error::Raster(format!(
                "band mismatch: stack has {:?}, stats have {:?}",
                stack.bands().iter().map(BandId::as_str).collect::<Vec<_>>(),
                self.bands.iter().map(|b| b.band.as_str()).collect::<Vec<_>>()
            )))
        }
    }

    /// Text form: one `bandId mean std` line per band.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.bands {
            writeln!(out, "{} {} {}", b.band, b.mean, b.std).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let mut bands = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| FormatError::Text {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, mean, std] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let band = BandId::new(id).map_err(|e| err(e.to_string()))?;
            let mean: f64 = mean.parse().map_err(|_| err(format!("bad mean {mean:?}")))?;
            let std: f64 = std.parse().map_err(|_| err(format!("bad std {std:?}")))?;
            bands.push(BandStats { band, mean, std });
        }
        NormStats::new(bands).map_err(|e| FormatError::Invalid(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e))
    }
}

/// Pooled per-band mean and population standard deviation over every pixel
/// of every stack.
pub fn compute_norm_stats(stacks: &[BandStack]) -> Result<NormStats> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Raster("cannot compute stats of an empty stack list".into()))?;
    for (i, s) in stacks.iter().enumerate() {
        if s.bands() != first.bands() {
            return Err(Error::Raster(format!(
                "stack {i} band list differs from stack 0"
            )));
        }
    }
    let mut out = Vec::with_capacity(first.band_count());
    for (b, band) in first.bands().iter().enumerate() {
        let count: usize = stacks.iter().map(|s| s.band(b).len()).sum();
        let sum: f64 = stacks
            .iter()
            .flat_map(|s| s.band(b).iter())
            .map(|&v| v as f64)
            .sum();
        let mean = sum / count as f64;
        let sq: f64 = stacks
            .iter()
            .flat_map(|s| s.band(b).iter())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum();
        out.push(BandStats {
            band: band.clone(),
            mean,
            std: (sq / count as f64).sqrt(),
        });
    }
    NormStats::new(out)
}

/// Maps each band to `(x - mean) / (std + eps)`.
pub fn normalize(stack: &BandStack, stats: &NormStats) -> Result<BandStack> {
    if stack.is_normalized() {
        return Err(Error::Raster("stack is already normalized".into()));
    }
    stats.check_bands(stack)?;
    let mut planes: Planes = stack.planes().clone();
    for (b, s) in stats.bands.iter().enumerate() {
        let scale = s.std + stats.epsilon;
        for v in planes.plane_mut(b) {
            *v = ((*v as f64 - s.mean) / scale) as f32;
        }
    }
    Ok(BandStack::from_planes(stack.bands().to_vec(), planes)?.with_normalized(true))
}

pub fn denormalize(stack: &BandStack, stats: &NormStats) -> Result<BandStack> {
    if !stack.is_normalized() {
        return Err(Error::Raster("stack is not normalized".into()));
    }
    stats.check_bands(stack)?;
    let mut planes: Planes = stack.planes().clone();
    for (b, s) in stats.bands.iter().enumerate() {
        let scale = s.std + stats.epsilon;
        for v in planes.plane_mut(b) {
            *v = (*v as f64 * scale + s.mean) as f32;
        }
    }
    BandStack::from_planes(stack.bands().to_vec(), planes)
}
