//! Prepared dataset directories.
//!
//! ```text
//! <dir>/manifest.txt      patch IDs, one per line
//! <dir>/norm_stats.txt    statistics of this split's images
//! <dir>/images/<id>.cbsk  raw band stacks
//! <dir>/masks/<id>.cmsk   ground truth
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::Sample;
use crate::error::{Error, Result};
use crate::raster::{
    compute_norm_stats, load_band_stack, load_mask, normalize, save_band_stack, save_mask, BandStack, MaskRaster,
    NormStats,
};

pub const MANIFEST: &str = "manifest.txt";
pub const NORM_STATS: &str = "norm_stats.txt";

#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub ids: Vec<String>,
}

impl DatasetDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if ids.is_empty() {
            return Err(Error::Data(format!("{} lists no patches", manifest.display())));
        }
        Ok(Self { root, ids })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.cbsk"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.cmsk"))
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::load(self.root.join(NORM_STATS))
    }

    pub fn image(&self, id: &str) -> Result<BandStack> {
        load_band_stack(self.image_path(id))
    }

    pub fn mask(&self, id: &str) -> Result<MaskRaster> {
        load_mask(self.mask_path(id))
    }

    /// Normalized inputs with their labels; checks mask and image agree.
    pub fn samples(&self, stats: &NormStats) -> Result<Vec<Sample>> {
        self.ids
            .iter()
            .map(|id| {
                let stack = self.image(id)?;
                let mask = self.mask(id)?;
                check_pair(id, &stack, &mask)?;
                Sample::new(id.clone(), normalize(&stack, stats)?.into_planes(), mask.into_data())
            })
            .collect()
    }
}

pub fn check_pair(id: &str, stack: &BandStack, mask: &MaskRaster) -> Result<()> {
    if (stack.height(), stack.width()) != (mask.height(), mask.width()) {
        return Err(Error::Data(format!(
            "pair {id}: image is {}x{} but mask is {}x{}",
            stack.height(),
            stack.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Writes a dataset directory; statistics are computed from `entries`.
pub fn write_dataset(root: impl AsRef<Path>, entries: &[(String, BandStack, MaskRaster)]) -> Result<DatasetDir> {
    let root = root.as_ref().to_path_buf();
    if entries.is_empty() {
        return Err(Error::Data("no patches to write".into()));
    }
    let bands = entries[0].1.bands();
    for (id, stack, mask) in entries {
        if stack.bands() != bands {
            return Err(Error::Data(format!("pair {id}: band list differs from {}", entries[0].0)));
        }
        check_pair(id, stack, mask)?;
    }
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for (id, stack, mask) in entries {
        save_band_stack(stack, root.join("images").join(format!("{id}.cbsk")))?;
        save_mask(mask, root.join("masks").join(format!("{id}.cmsk")))?;
        manifest.push_str(id);
        manifest.push('\n');
    }
    let stacks: Vec<BandStack> = entries.iter().map(|e| e.1.clone()).collect();
    compute_norm_stats(&stacks)?.save(root.join(NORM_STATS))?;
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    DatasetDir::open(root)
}
