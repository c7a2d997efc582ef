//! Patch extraction and logit stitching for scene-level inference.

use super::{BandStack, Planes};
use crate::error::{Error, Result};

/// Patch sizes must be a multiple of this (the student's total downsampling).
pub const TILE_ALIGNMENT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    /// Mirror about the last row/column, excluding the edge itself.
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileLayout {
    pub patch_size: usize,
    pub stride: usize,
    /// Raster size before padding.
    pub height: usize,
    pub width: usize,
    pub padding: PaddingMode,
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// `(row, col)` offsets into the padded raster.
    pub placements: Vec<(usize, usize)>,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if patch_size < TILE_ALIGNMENT || patch_size % TILE_ALIGNMENT != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} must be a positive multiple of {TILE_ALIGNMENT}"
            )));
        }
        if stride > patch_size {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} exceeds patch size {patch_size}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("cannot tile an empty raster".into()));
        }
        let rows = axis_offsets(height, patch_size, stride);
        let cols = axis_offsets(width, patch_size, stride);
        let placements = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self {
            patch_size,
            stride,
            height,
            width,
            padding: PaddingMode::Reflect,
            pad_bottom: patch_size.saturating_sub(height),
            pad_right: patch_size.saturating_sub(width),
            placements,
        })
    }

    pub fn padded_height(&self) -> usize {
        self.height + self.pad_bottom
    }

    pub fn padded_width(&self) -> usize {
        self.width + self.pad_right
    }
}

/// Offsets stepping by `stride`; the last one is clamped to end at the border.
fn axis_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let last = len - patch;
    let mut out: Vec<usize> = (0..last).step_by(stride).collect();
    out.push(last);
    out
}

fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        return i;
    }
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Cuts `raster` into `patch_size` squares, reflect-padding rasters smaller
/// than one patch.
pub fn tile_planes(raster: &Planes, patch_size: usize, stride: usize) -> Result<(TileLayout, Vec<Planes>)> {
    let layout = TileLayout::new(raster.height, raster.width, patch_size, stride)?;
    let p = patch_size;
    let patches = layout
        .placements
        .iter()
        .map(|&(r0, c0)| {
            let mut out = Planes::zeros(raster.channels, p, p);
            for c in 0..raster.channels {
                let src = raster.plane(c);
                let dst = out.plane_mut(c);
                for y in 0..p {
                    let sy = reflect(r0 + y, raster.height);
                    let row = &src[sy * raster.width..(sy + 1) * raster.width];
                    let drow = &mut dst[y * p..(y + 1) * p];
                    if c0 + p <= raster.width {
                        drow.copy_from_slice(&row[c0..c0 + p]);
                    } else {
                        for (x, d) in drow.iter_mut().enumerate() {
                            *d = row[reflect(c0 + x, raster.width)];
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok((layout, patches))
}

pub fn tile(stack: &BandStack, patch_size: usize, stride: usize) -> Result<(TileLayout, Vec<BandStack>)> {
    let (layout, planes) = tile_planes(stack.planes(), patch_size, stride)?;
    let patches = planes
        .into_iter()
        .map(|p| {
            BandStack::from_planes(stack.bands().to_vec(), p)
                .map(|s| s.with_dtype(stack.dtype()).with_normalized(stack.is_normalized()))
        })
        .collect::<Result<_>>()?;
    Ok((layout, patches))
}

/// Fuses per-patch logit maps back into an `out_height`×`out_width` map.
///
/// Overlapping pixels receive the arithmetic mean of every contributing
/// patch; the padded margin is cropped away.
pub fn stitch(patches: &[Planes], layout: &TileLayout, out_height: usize, out_width: usize) -> Result<Planes> {
    if patches.len() != layout.placements.len() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} placements",
            patches.len(),
            layout.placements.len()
        )));
    }
    if (out_height, out_width) != (layout.height, layout.width) {
        return Err(Error::Shape(format!(
            "output {out_height}x{out_width} differs from tiled raster {}x{}",
            layout.height, layout.width
        )));
    }
    let channels = patches.first().map_or(0, |p| p.channels);
    let p = layout.patch_size;
    for (i, patch) in patches.iter().enumerate() {
        if patch.channels != channels || patch.height != p || patch.width != p {
            return Err(Error::Shape(format!(
                "logit map {i} is {}x{}x{}, expected {channels}x{p}x{p}",
                patch.channels, patch.height, patch.width
            )));
        }
    }
    let (h, w) = (out_height, out_width);
    // Sums stay exact in f64 for the handful of overlaps a pixel can have.
    let mut sum = vec![0f64; channels * h * w];
    let mut hits = vec![0u32; h * w];
    for (patch, &(r0, c0)) in patches.iter().zip(&layout.placements) {
        let rows = p.min(h.saturating_sub(r0));
        let cols = p.min(w.saturating_sub(c0));
        for y in 0..rows {
            for x in 0..cols {
                hits[(r0 + y) * w + c0 + x] += 1;
            }
        }
        for c in 0..channels {
            let src = patch.plane(c);
            let dst = &mut sum[c * h * w..(c + 1) * h * w];
            for y in 0..rows {
                let srow = &src[y * p..y * p + cols];
                let drow = &mut dst[(r0 + y) * w + c0..(r0 + y) * w + c0 + cols];
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d += s as f64;
                }
            }
        }
    }
    let mut out = Planes::zeros(channels, h, w);
    for c in 0..channels {
        let dst = out.plane_mut(c);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (sum[c * h * w + i] / hits[i] as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Planes {
        let data = (0..c * h * w).map(|i| (i as f32).sin()).collect();
        Planes::new(c, h, w, data).unwrap()
    }

    #[test]
    fn exact_fit() {
        let layout = TileLayout::new(384, 384, 384, 384).unwrap();
        assert_eq!(layout.placements, vec![(0, 0)]);
    }

    #[test]
    fn clamped_placements() {
        let layout = TileLayout::new(512, 512, 384, 384).unwrap();
        assert_eq!(layout.placements, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        let layout = TileLayout::new(512, 512, 384, 192).unwrap();
        assert_eq!(layout.placements.len(), 4);
        let layout = TileLayout::new(100, 300, 64, 64).unwrap();
        assert_eq!(layout.placements.len(), 2 * 5);
        assert_eq!(layout.placements.last(), Some(&(36, 236)));
    }

    #[test]
    fn small_raster_reflect_pads() {
        let raster = ramp(1, 100, 100);
        let (layout, patches) = tile_planes(&raster, 128, 128).unwrap();
        assert_eq!(layout.placements, vec![(0, 0)]);
        assert_eq!((layout.padded_height(), layout.padded_width()), (128, 128));
        let patch = &patches[0];
        assert_eq!((patch.height, patch.width), (128, 128));
        // row 100 mirrors row 98, column 127 mirrors column 71
        assert_eq!(patch.get(0, 100, 5), raster.get(0, 98, 5));
        assert_eq!(patch.get(0, 3, 127), raster.get(0, 3, 71));
        let back = stitch(&patches, &layout, 100, 100).unwrap();
        assert_eq!(back, raster);
    }

    #[test]
    fn reflect_wraps_for_tiny_rasters() {
        assert_eq!((0..7).map(|i| reflect(i, 3)).collect::<Vec<_>>(), [0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(9, 1), 0);
        let raster = ramp(2, 3, 5);
        let (_, patches) = tile_planes(&raster, 16, 8).unwrap();
        assert_eq!(patches[0].get(1, 15, 15), raster.get(1, reflect(15, 3), reflect(15, 5)));
    }

    #[test]
    fn invalid_arguments() {
        assert!(TileLayout::new(64, 64, 64, 0).is_err());
        assert!(TileLayout::new(64, 64, 63, 32).is_err());
        assert!(TileLayout::new(64, 64, 8, 8).is_err());
        assert!(TileLayout::new(64, 64, 32, 48).is_err());
    }

    #[test]
    fn single_tile_identity() {
        let raster = ramp(2, 64, 64);
        let (layout, patches) = tile_planes(&raster, 64, 64).unwrap();
        assert_eq!(stitch(&patches, &layout, 64, 64).unwrap(), raster);
    }

    #[test]
    fn overlap_strip_is_averaged() {
        let layout = TileLayout::new(16, 24, 16, 8).unwrap();
        assert_eq!(layout.placements, vec![(0, 0), (0, 8)]);
        let a = Planes::new(1, 16, 16, vec![1.0; 256]).unwrap();
        let b = Planes::new(1, 16, 16, vec![4.0; 256]).unwrap();
        let out = stitch(&[a, b], &layout, 16, 24).unwrap();
        assert_eq!(out.get(0, 3, 2), 1.0);
        assert_eq!(out.get(0, 3, 10), 2.5);
        assert_eq!(out.get(0, 3, 20), 4.0);
    }

    #[test]
    fn stitch_count_mismatch() {
        let layout = TileLayout::new(32, 32, 16, 16).unwrap();
        let a = Planes::zeros(1, 16, 16);
        assert!(stitch(&[a.clone()], &layout, 32, 32).is_err());
        let wrong = Planes::zeros(1, 8, 8);
        assert!(stitch(&[a.clone(), a.clone(), a, wrong], &layout, 32, 32).is_err());
    }

    proptest! {
        #[test]
        fn placements_cover_every_pixel(h in 1usize..200, w in 1usize..200, k in 1usize..5, s in 1usize..80) {
            let patch = 16 * k;
            let stride = s.min(patch);
            let layout = TileLayout::new(h, w, patch, stride).unwrap();
            let mut covered = vec![false; h * w];
            for &(r, c) in &layout.placements {
                prop_assert!(r + patch <= layout.padded_height());
                prop_assert!(c + patch <= layout.padded_width());
                for y in r..(r + patch).min(h) {
                    for x in c..(c + patch).min(w) {
                        covered[y * w + x] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&v| v));
        }

        #[test]
        fn stitch_of_tile_is_identity(h in 1usize..120, w in 1usize..120, half in any::<bool>()) {
            let raster = ramp(2, h, w);
            let stride = if half { 16 } else { 32 };
            let (layout, patches) = tile_planes(&raster, 32, stride).unwrap();
            prop_assert_eq!(stitch(&patches, &layout, h, w).unwrap(), raster);
        }
    }
}
