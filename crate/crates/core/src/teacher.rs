//! Teacher backends supplying soft responses `z_t` for distillation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::tempered_softmax;
use crate::error::{Error, Result};
use crate::raster::{load_band_stack, save_band_stack, BandId, BandStack, Planes};
use crate::unet::{Mode, Tensor, UNet};

pub const MANIFEST: &str = "manifest.txt";

/// A patch as seen by a teacher: its dataset ID and normalized input.
#[derive(Clone, Copy, Debug)]
pub struct PatchRef<'a> {
    pub id: &'a str,
    pub input: &'a Planes,
}

pub trait TeacherBackend: Send + Sync {
    fn num_classes(&self) -> usize;

    /// K×H×W logits for one patch. Deterministic for a fixed backend.
    fn teacher_logits(&self, patch: &PatchRef<'_>) -> Result<Planes>;
}

fn check_logits(logits: &Planes, k: usize, patch: &PatchRef<'_>) -> Result<()> {
    if logits.channels != k {
        return Err(Error::Teacher(format!(
            "logits for {} have {} classes, expected {k}",
            patch.id, logits.channels
        )));
    }
    if (logits.height, logits.width) != (patch.input.height, patch.input.width) {
        return Err(Error::Teacher(format!(
            "logits for {} are {}x{}, patch is {}x{}",
            patch.id, logits.height, logits.width, patch.input.height, patch.input.width
        )));
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Teacher(format!("non-finite teacher logits for {}", patch.id)));
    }
    Ok(())
}

/// Logits stored as `<dir>/<patch_id>.cbsk` with bands `LGT0..`, indexed by `manifest.txt`.
#[derive(Clone, Debug)]
pub struct PrecomputedLogits {
    dir: PathBuf,
    ids: BTreeSet<String>,
    classes: usize,
}

impl PrecomputedLogits {
    pub fn open(dir: impl AsRef<Path>, classes: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(Self { dir, ids, classes })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.cbsk"))
    }
}

impl TeacherBackend for PrecomputedLogits {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn teacher_logits(&self, patch: &PatchRef<'_>) -> Result<Planes> {
        if !self.ids.contains(patch.id) {
            return Err(Error::Teacher(format!(
                "patch {} not in {}",
                patch.id,
                self.dir.join(MANIFEST).display()
            )));
        }
        let stack = load_band_stack(self.path_for(patch.id))?;
        let expected: Vec<BandId> = (0..stack.band_count()).map(BandId::logit).collect();
        if stack.bands() != expected.as_slice() {
            return Err(Error::Teacher(format!("{} does not hold logit bands", patch.id)));
        }
        let logits = stack.into_planes();
        check_logits(&logits, self.classes, patch)?;
        Ok(logits)
    }
}

/// Writes a precomputed-logit directory from `(patch_id, logits)` pairs.
pub fn write_precomputed<'a>(
    dir: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, Planes)>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (id, logits) in entries {
        save_band_stack(&BandStack::from_logits(logits)?, dir.join(format!("{id}.cbsk")))?;
        manifest.push_str(id);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// A frozen network evaluated in eval mode.
#[derive(Clone, Debug)]
pub struct LiveTeacher {
    model: UNet,
}

impl LiveTeacher {
    pub fn new(model: UNet) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }
}

impl TeacherBackend for LiveTeacher {
    fn num_classes(&self) -> usize {
        self.model.spec().num_classes
    }

    fn teacher_logits(&self, patch: &PatchRef<'_>) -> Result<Planes> {
        let x = Tensor::from_planes([patch.input])?;
        let logits = self.model.forward(&x, Mode::Eval)?.sample_planes(0);
        check_logits(&logits, self.num_classes(), patch)?;
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    /// Element-wise mean of member logits.
    MeanLogits,
    /// Mean of tempered member probabilities, mapped back to logits as
    /// `τ · ln(mean_p)` so that a tempered softmax recovers `mean_p`.
    MeanProbabilities { tau: f64 },
}

pub struct EnsembleTeacher {
    members: Vec<Box<dyn TeacherBackend>>,
    fusion: Fusion,
}

impl EnsembleTeacher {
    pub fn new(members: Vec<Box<dyn TeacherBackend>>, fusion: Fusion) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Teacher("ensemble needs at least one member".into()))?;
        let k = first.num_classes();
        if members.iter().any(|m| m.num_classes() != k) {
            return Err(Error::Teacher("ensemble members disagree on class count".into()));
        }
        if let Fusion::MeanProbabilities { tau } = fusion {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidArgument(format!("fusion temperature {tau}")));
            }
        }
        Ok(Self { members, fusion })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl TeacherBackend for EnsembleTeacher {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn teacher_logits(&self, patch: &PatchRef<'_>) -> Result<Planes> {
        let all = self
            .members
            .iter()
            .map(|m| m.teacher_logits(patch))
            .collect::<Result<Vec<_>>>()?;
        let (k, h, w) = (all[0].channels, all[0].height, all[0].width);
        if all.iter().any(|p| (p.channels, p.height, p.width) != (k, h, w)) {
            return Err(Error::Teacher(format!("ensemble members disagree on shape for {}", patch.id)));
        }
        let m = all.len() as f64;
        let hw = h * w;
        let mut out = Planes::zeros(k, h, w);
        match self.fusion {
            Fusion::MeanLogits => {
                for (i, o) in out.data.iter_mut().enumerate() {
                    // sorted so the mean does not depend on member order
                    let mut vals: Vec<f64> = all.iter().map(|p| p.data[i] as f64).collect();
                    vals.sort_by(f64::total_cmp);
                    *o = (vals.iter().sum::<f64>() / m) as f32;
                }
            }
            Fusion::MeanProbabilities { tau } => {
                let mut z = vec![0.0; k];
                let mut acc = vec![vec![0.0f64; k]; hw];
                for p in &all {
                    for (px, a) in acc.iter_mut().enumerate() {
                        z.iter_mut().enumerate().for_each(|(c, v)| *v = p.data[c * hw + px] as f64);
                        for (s, q) in a.iter_mut().zip(tempered_softmax(&z, tau)?) {
                            *s += q;
                        }
                    }
                }
                for (px, a) in acc.iter().enumerate() {
                    for c in 0..k {
                        out.data[c * hw + px] = (tau * (a[c] / m).ln()).max(-1e30) as f32;
                    }
                }
            }
        }
        check_logits(&out, self.num_classes(), patch)?;
        Ok(out)
    }
}
