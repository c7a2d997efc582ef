//! Flat `key = value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown or repeated
//! keys are errors. Relative paths resolve against the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::{DistillConfig, LrSchedule, OptimizerKind};
use crate::error::{Error, Result};
use crate::raster::MaskScheme;
use crate::teacher::Fusion;
use crate::unet::ArchitectureSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherSource {
    /// Logits exported by `export-logits`.
    Precomputed,
    /// Teacher weights evaluated during distillation.
    Live,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub spec: ArchitectureSpec,
    pub source: TeacherSource,
    /// Weight files of the ensemble members; empty means the trained
    /// teacher under `<out>/teacher`.
    pub weights: Vec<PathBuf>,
    pub fusion: Fusion,
    /// Plain cross-entropy training settings for `train-teacher`.
    pub train: DistillConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub scheme: MaskScheme,
    pub student: ArchitectureSpec,
    pub student_weights: Option<PathBuf>,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    /// `None` picks the scheme default: on for binary masks, off for KZ.
    pub postprocess: Option<bool>,
    pub patch_size: usize,
    pub stride: usize,
    pub benchmark_repeats: usize,
}

impl RunConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        let teacher_train = DistillConfig {
            alpha: 1.0,
            tau: 1.0,
            epochs: 30,
            ..DistillConfig::default()
        };
        Self {
            seed: 0,
            output_dir: output_dir.into(),
            train_dir: None,
            val_dir: None,
            test_dir: None,
            scheme: MaskScheme::BinaryCloud,
            student: ArchitectureSpec::reference_student(),
            student_weights: None,
            teacher: TeacherConfig {
                spec: ArchitectureSpec::reference_teacher(),
                source: TeacherSource::Precomputed,
                weights: Vec::new(),
                fusion: Fusion::MeanLogits,
                train: teacher_train,
            },
            distill: DistillConfig::default(),
            postprocess: None,
            patch_size: 64,
            stride: 64,
            benchmark_repeats: 3,
        }
    }

    /// Parses `text` on top of the defaults for `output_dir`.
    pub fn parse(text: &str, output_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg = Self::new(output_dir);
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {key}: {e}", i + 1)))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, output_dir: impl Into<PathBuf>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, output_dir).map_err(|e| e.context(format!("config {}", path.display())))
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match (section, field) {
            ("", "seed") => self.seed = num(v)?,
            ("", "output_dir") => self.output_dir = PathBuf::from(v),
            ("data", "train") => self.train_dir = Some(PathBuf::from(v)),
            ("data", "val") => self.val_dir = Some(PathBuf::from(v)),
            ("data", "test") => self.test_dir = Some(PathBuf::from(v)),
            ("data", "scheme") => {
                self.scheme = MaskScheme::parse(v).ok_or_else(|| format!("unknown scheme {v}"))?
            }
            ("student", "weights") => self.student_weights = Some(PathBuf::from(v)),
            ("student", f) => set_arch(&mut self.student, f, v)?,
            ("teacher", "source") => {
                self.teacher.source = match v {
                    "precomputed" => TeacherSource::Precomputed,
                    "live" => TeacherSource::Live,
                    _ => return Err(format!("unknown teacher source {v}")),
                }
            }
            ("teacher", "weights") => {
                self.teacher.weights = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            ("teacher", "fusion") => {
                self.teacher.fusion = match v {
                    "mean-logits" => Fusion::MeanLogits,
                    "mean-probabilities" => Fusion::MeanProbabilities { tau: self.distill.tau },
                    _ => return Err(format!("unknown fusion {v}")),
                }
            }
            ("teacher", "epochs") => self.teacher.train.epochs = num(v)?,
            ("teacher", "batch_size") => self.teacher.train.batch_size = num(v)?,
            ("teacher", "learning_rate") => self.teacher.train.learning_rate = num(v)?,
            ("teacher", "optimizer") => self.teacher.train.optimizer = optimizer(v)?,
            ("teacher", "schedule") => self.teacher.train.schedule = schedule(v)?,
            ("teacher", f) => set_arch(&mut self.teacher.spec, f, v)?,
            ("distill", "alpha") => self.distill.alpha = num(v)?,
            ("distill", "tau") => self.distill.tau = num(v)?,
            ("distill", "scale_tau_squared") => self.distill.scale_distill_by_tau_squared = boolean(v)?,
            ("distill", "epochs") => self.distill.epochs = num(v)?,
            ("distill", "batch_size") => self.distill.batch_size = num(v)?,
            ("distill", "learning_rate") => self.distill.learning_rate = num(v)?,
            ("distill", "optimizer") => self.distill.optimizer = optimizer(v)?,
            ("distill", "schedule") => self.distill.schedule = schedule(v)?,
            ("postproc", "enabled") => self.postprocess = Some(boolean(v)?),
            ("tiling", "patch_size") => self.patch_size = num(v)?,
            ("tiling", "stride") => self.stride = num(v)?,
            ("benchmark", "repeats") => self.benchmark_repeats = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Derived settings and cross-field checks; call after manual edits.
    pub fn finish(&mut self) -> Result<()> {
        if let Fusion::MeanProbabilities { .. } = self.teacher.fusion {
            self.teacher.fusion = Fusion::MeanProbabilities { tau: self.distill.tau };
        }
        let ignore = self.scheme.ignore_ids().to_vec();
        let classes = self.scheme.evaluated_classes().to_vec();
        for d in [&mut self.distill, &mut self.teacher.train] {
            d.seed = self.seed;
            d.ignore_class_ids = ignore.clone();
            d.val_classes = classes.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.scheme.num_classes() as usize;
        for (name, spec) in [("student", &self.student), ("teacher", &self.teacher.spec)] {
            spec.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if spec.num_classes != k {
                return Err(Error::Config(format!(
                    "{name} has {} classes but scheme {} has {k}",
                    spec.num_classes,
                    self.scheme.name()
                )));
            }
        }
        if self.student.in_channels != self.teacher.spec.in_channels {
            return Err(Error::Config("student and teacher input channels differ".into()));
        }
        self.distill.validate().map_err(|e| Error::Config(format!("distill: {e}")))?;
        self.teacher.train.validate().map_err(|e| Error::Config(format!("teacher: {e}")))?;
        let align = self.student.alignment().max(crate::raster::TILE_ALIGNMENT);
        if self.patch_size == 0 || self.patch_size % align != 0 {
            return Err(Error::Config(format!(
                "tiling.patch_size {} must be a positive multiple of {align}",
                self.patch_size
            )));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "tiling.stride {} must be in [1, patch_size]",
                self.stride
            )));
        }
        if self.benchmark_repeats == 0 {
            return Err(Error::Config("benchmark.repeats must be >= 1".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.resolve(self.train_dir.as_deref().unwrap_or(Path::new("data/train")))
    }

    /// The validation split, when configured or present at `data/val`.
    pub fn val_dir(&self) -> Option<PathBuf> {
        match &self.val_dir {
            Some(p) => Some(self.resolve(p)),
            None => Some(self.resolve(Path::new("data/val"))).filter(|p| p.is_dir()),
        }
    }

    pub fn test_dir(&self) -> PathBuf {
        self.resolve(self.test_dir.as_deref().unwrap_or(Path::new("data/test")))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_dir.join("teacher")
    }

    pub fn teacher_weight_paths(&self) -> Vec<PathBuf> {
        if self.teacher.weights.is_empty() {
            vec![self.teacher_dir().join("weights.cwgt")]
        } else {
            self.teacher.weights.iter().map(|p| self.resolve(p)).collect()
        }
    }

    pub fn logits_dir(&self) -> PathBuf {
        self.output_dir.join("teacher_logits")
    }

    pub fn student_dir(&self) -> PathBuf {
        self.output_dir.join("student")
    }

    pub fn student_weight_path(&self) -> PathBuf {
        match &self.student_weights {
            Some(p) => self.resolve(p),
            None => self.student_dir().join("weights.cwgt"),
        }
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.output_dir.join("predictions")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn postprocess_enabled(&self) -> bool {
        self.postprocess.unwrap_or(self.scheme == MaskScheme::BinaryCloud)
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn optimizer(v: &str) -> std::result::Result<OptimizerKind, String> {
    OptimizerKind::parse(v).ok_or_else(|| format!("unknown optimizer {v}"))
}

fn schedule(v: &str) -> std::result::Result<LrSchedule, String> {
    LrSchedule::parse(v).ok_or_else(|| format!("unknown schedule {v}"))
}

fn set_arch(spec: &mut ArchitectureSpec, field: &str, v: &str) -> std::result::Result<(), String> {
    match field {
        "in_channels" => spec.in_channels = num(v)?,
        "num_classes" => spec.num_classes = num(v)?,
        "encoder_widths" => {
            spec.encoder_widths = v
                .split(',')
                .map(|w| num(w.trim()))
                .collect::<std::result::Result<_, _>>()?
        }
        "bottleneck_width" => spec.bottleneck_width = num(v)?,
        "convs_per_block" => spec.convs_per_block = num(v)?,
        "batchnorm" => spec.use_batchnorm = boolean(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}
