//! Multispectral band stacks, class masks and their on-disk containers.
//!
//! Band stacks are stored channel-major: plane `b` occupies
//! `data[b * H * W..(b + 1) * H * W]`, each plane row-major.

mod container;
mod norm;
mod tiling;

use std::collections::HashSet;
use std::fmt;

pub use container::{
    decode_band_stack, decode_mask, encode_band_stack, encode_mask, load_band_stack, load_mask,
    save_band_stack, save_mask,
};
pub use norm::{compute_norm_stats, denormalize, normalize, BandStats, NormStats, NORM_EPSILON};
pub use tiling::{stitch, tile, tile_planes, PaddingMode, TileLayout, TILE_ALIGNMENT};

use crate::error::{Error, Result};

/// Band identifier, at most eight ASCII bytes (e.g. `B02`, `B08`, `LGT0`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BandId(String);

impl BandId {
    pub const MAX_LEN: usize = 8;

    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.len() > Self::MAX_LEN {
            return Err(Error::Raster(format!(
                "band id {id:?} must be 1..={} bytes",
                Self::MAX_LEN
            )));
        }
        if !id.bytes().all(|b| b.is_ascii_graphic()) {
            return Err(Error::Raster(format!(
                "band id {id:?} must be printable ASCII"
            )));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Band IDs used for stored logit maps: `LGT0`, `LGT1`, ...
    pub fn logit(class: usize) -> Self {
        Self(format!("LGT{class}"))
    }

    /// Blue, green, red and near-infrared, as used for the four-band inputs.
    pub fn rgb_nir() -> Vec<BandId> {
        ["B02", "B03", "B04", "B08"]
            .into_iter()
            .map(|s| BandId(s.to_string()))
            .collect()
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Storage type of a band stack on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DType {
    #[default]
    F32,
    U16,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U16 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U16),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U16 => "u16",
            DType::U8 => "u8",
        }
    }
}

/// A C×H×W block of f32 planes; logit maps and raster payloads share this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for {channels}x{height}x{width} planes",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax over channels; ties resolve to the lowest channel.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.plane_len();
        (0..n)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.data[p];
                for c in 1..self.channels {
                    let v = self.data[c * n + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// An H×W×C multispectral raster.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStack {
    bands: Vec<BandId>,
    planes: Planes,
    dtype: DType,
    normalized: bool,
}

impl BandStack {
    /// Builds a stack from channel-major plane data.
    pub fn new(bands: Vec<BandId>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Raster("band list is empty".into()));
        }
        let mut seen = HashSet::new();
        for b in &bands {
            if !seen.insert(b) {
                return Err(Error::Raster(format!("duplicate band {b}")));
            }
        }
        if height == 0 || width == 0 {
            return Err(Error::Raster(format!("degenerate size {height}x{width}")));
        }
        let planes = Planes::new(bands.len(), height, width, data)?;
        if let Some(i) = planes.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Raster(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            bands,
            planes,
            dtype: DType::F32,
            normalized: false,
        })
    }

    pub fn from_planes(bands: Vec<BandId>, planes: Planes) -> Result<Self> {
        if bands.len() != planes.channels {
            return Err(Error::Raster(format!(
                "{} band ids for {} planes",
                bands.len(),
                planes.channels
            )));
        }
        Self::new(bands, planes.height, planes.width, planes.data)
    }

    /// Wraps a logit map as a stack with `LGT*` band IDs.
    pub fn from_logits(logits: Planes) -> Result<Self> {
        let bands = (0..logits.channels).map(BandId::logit).collect();
        Self::from_planes(bands, logits)
    }

    /// Sets the on-disk storage type. Values must fit the type on save.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub(crate) fn with_normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn height(&self) -> usize {
        self.planes.height
    }

    pub fn width(&self) -> usize {
        self.planes.width
    }

    pub fn bands(&self) -> &[BandId] {
        &self.bands
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn planes(&self) -> &Planes {
        &self.planes
    }

    pub fn into_planes(self) -> Planes {
        self.planes
    }

    pub fn band(&self, i: usize) -> &[f32] {
        self.planes.plane(i)
    }

    pub fn data(&self) -> &[f32] {
        &self.planes.data
    }
}

/// Class taxonomy of a mask raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskScheme {
    /// 0 = clear, 1 = cloud.
    #[default]
    BinaryCloud,
    /// clear=0, cloud=1, semi-transparent=2, shadow=3, undefined=4, missing=5.
    KzSix,
}

impl MaskScheme {
    pub fn code(self) -> u8 {
        match self {
            MaskScheme::BinaryCloud => 0,
            MaskScheme::KzSix => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MaskScheme::BinaryCloud),
            1 => Some(MaskScheme::KzSix),
            _ => None,
        }
    }

    pub fn num_classes(self) -> u8 {
        match self {
            MaskScheme::BinaryCloud => 2,
            MaskScheme::KzSix => 6,
        }
    }

    /// Labels excluded from the loss and from every metric.
    pub fn ignore_ids(self) -> &'static [u8] {
        match self {
            MaskScheme::BinaryCloud => &[],
            MaskScheme::KzSix => &[kz::UNDEFINED, kz::MISSING],
        }
    }

    /// Classes that receive metric rows.
    pub fn evaluated_classes(self) -> &'static [u8] {
        match self {
            MaskScheme::BinaryCloud => &[CLOUD],
            MaskScheme::KzSix => &[kz::CLEAR, kz::CLOUD, kz::SEMI_TRANSPARENT, kz::SHADOW],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskScheme::BinaryCloud => "binary-cloud",
            MaskScheme::KzSix => "kz-six",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary-cloud" | "binary" => Some(MaskScheme::BinaryCloud),
            "kz-six" | "kz" => Some(MaskScheme::KzSix),
            _ => None,
        }
    }
}

pub const CLEAR: u8 = 0;
pub const CLOUD: u8 = 1;

/// KappaZeta label IDs.
pub mod kz {
    pub const CLEAR: u8 = 0;
    pub const CLOUD: u8 = 1;
    pub const SEMI_TRANSPARENT: u8 = 2;
    pub const SHADOW: u8 = 3;
    pub const UNDEFINED: u8 = 4;
    pub const MISSING: u8 = 5;
}

/// An H×W class-ID raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRaster {
    height: usize,
    width: usize,
    classes: u8,
    scheme: MaskScheme,
    data: Vec<u8>,
}

impl MaskRaster {
    pub fn new(height: usize, width: usize, scheme: MaskScheme, data: Vec<u8>) -> Result<Self> {
        Self::with_classes(height, width, scheme.num_classes(), scheme, data)
    }

    pub fn with_classes(
        height: usize,
        width: usize,
        classes: u8,
        scheme: MaskScheme,
        data: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Raster(format!("degenerate size {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for {height}x{width}",
                data.len()
            )));
        }
        if classes != scheme.num_classes() {
            return Err(Error::Raster(format!(
                "scheme {} requires {} classes, got {classes}",
                scheme.name(),
                scheme.num_classes()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v >= classes) {
            return Err(Error::Raster(format!(
                "pixel {i} has class {} >= {classes}",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            scheme,
            data,
        })
    }

    /// Binary cloud mask from a 0/1 buffer.
    pub fn binary(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, MaskScheme::BinaryCloud, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.scheme == MaskScheme::BinaryCloud
    }

    pub fn same_shape(&self, other: &MaskRaster) -> bool {
        self.height == other.height && self.width == other.width
    }
}
