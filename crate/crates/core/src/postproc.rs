//! Binary morphology and the adaptive open/close rule for cloud masks.
//!
//! Erosion pads the border with 1 and dilation pads with 0, so
//! `close(x) = !open(!x)` holds exactly for symmetric elements.

use crate::error::{Error, Result};
use crate::raster::{MaskRaster, MaskScheme, Planes, CLOUD};

/// A symmetric k×k neighbourhood with odd k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    size: usize,
    /// Row-major k×k membership.
    cells: Vec<bool>,
}

impl StructuringElement {
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, vec![true; size * size])
    }

    pub fn new(size: usize, cells: Vec<bool>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("structuring element side {size} must be odd")));
        }
        if cells.len() != size * size {
            return Err(Error::InvalidArgument("structuring element cell count".into()));
        }
        let n = cells.len();
        if (0..n).any(|i| cells[i] != cells[n - 1 - i]) {
            return Err(Error::InvalidArgument("structuring element must be symmetric about its centre".into()));
        }
        Ok(Self { size, cells })
    }

    fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.size / 2) as isize;
        (0..self.size * self.size)
            .filter(|&i| self.cells[i])
            .map(|i| ((i / self.size) as isize - r, (i % self.size) as isize - r))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

fn require_binary(mask: &MaskRaster) -> Result<()> {
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("morphology needs a binary mask".into()));
    }
    Ok(())
}

/// `erode = true`: output 1 iff every covered pixel is 1 (outside = 1).
/// `erode = false`: output 1 iff any covered pixel is 1 (outside = 0).
fn sweep(data: &[u8], h: usize, w: usize, offsets: &[(isize, isize)], erode: bool) -> Vec<u8> {
    let mut out = vec![0u8; data.len()];
    for y in 0..h {
        for x in 0..w {
            let hit = |&(dy, dx): &(isize, isize)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    erode
                } else {
                    data[yy as usize * w + xx as usize] == 1
                }
            };
            let v = if erode { offsets.iter().all(hit) } else { offsets.iter().any(hit) };
            out[y * w + x] = u8::from(v);
        }
    }
    out
}

pub fn morph(mask: &MaskRaster, op: MorphOp, se: &StructuringElement) -> Result<MaskRaster> {
    require_binary(mask)?;
    let (h, w) = (mask.height(), mask.width());
    let offs = se.offsets();
    let data = match op {
        MorphOp::Erode => sweep(mask.data(), h, w, &offs, true),
        MorphOp::Dilate => sweep(mask.data(), h, w, &offs, false),
        MorphOp::Open => sweep(&sweep(mask.data(), h, w, &offs, true), h, w, &offs, false),
        MorphOp::Close => sweep(&sweep(mask.data(), h, w, &offs, false), h, w, &offs, true),
    };
    MaskRaster::with_classes(h, w, mask.classes(), mask.scheme(), data)
}

/// Fraction of pixels labelled cloud.
pub fn cloud_fraction(mask: &MaskRaster) -> f64 {
    let n = mask.data().len();
    if n == 0 {
        return 0.0;
    }
    mask.data().iter().filter(|&&v| v == CLOUD).count() as f64 / n as f64
}

/// The operation the adaptive rule picks: closing when strictly more than
/// half of the pixels are cloud, opening otherwise.
pub fn adaptive_op(mask: &MaskRaster) -> MorphOp {
    // integer comparison avoids any rounding at exactly one half
    let cloud = mask.data().iter().filter(|&&v| v == CLOUD).count();
    if 2 * cloud > mask.data().len() {
        MorphOp::Close
    } else {
        MorphOp::Open
    }
}

/// One application of the 3×3 closing or opening chosen by [`adaptive_op`].
pub fn adaptive_postprocess(mask: &MaskRaster) -> Result<MaskRaster> {
    require_binary(mask)?;
    morph(mask, adaptive_op(mask), &StructuringElement::square(3)?)
}

/// Adaptive clean-up of a multi-class prediction on its cloud-vs-rest map.
///
/// Pixels that turn cloud become [`CLOUD`]; pixels that stop being cloud
/// take their highest-scoring non-cloud class from `logits`.
pub fn adaptive_postprocess_multiclass(pred: &MaskRaster, logits: &Planes) -> Result<MaskRaster> {
    if pred.scheme() == MaskScheme::BinaryCloud {
        return adaptive_postprocess(pred);
    }
    let (h, w) = (pred.height(), pred.width());
    if (logits.height, logits.width) != (h, w) || logits.channels != pred.classes() as usize {
        return Err(Error::Shape("logits do not match the prediction".into()));
    }
    let binary: Vec<u8> = pred.data().iter().map(|&v| u8::from(v == CLOUD)).collect();
    let cleaned = adaptive_postprocess(&MaskRaster::binary(h, w, binary)?)?;
    let mut out = pred.data().to_vec();
    for (p, (o, &c)) in out.iter_mut().zip(cleaned.data()).enumerate() {
        match (c == 1, *o == CLOUD) {
            (true, false) => *o = CLOUD,
            (false, true) => {
                let best = (0..logits.channels)
                    .filter(|&k| k != CLOUD as usize)
                    .max_by(|&a, &b| {
                        logits.data[a * h * w + p]
                            .total_cmp(&logits.data[b * h * w + p])
                            .then(b.cmp(&a))
                    })
                    .expect("at least two classes");
                *o = best as u8;
            }
            _ => {}
        }
    }
    MaskRaster::with_classes(h, w, pred.classes(), pred.scheme(), out)
}
