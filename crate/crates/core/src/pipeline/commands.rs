use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{RunConfig, TeacherSource};
use super::dataset::{check_pair, write_dataset, DatasetDir, NORM_STATS};
use crate::distill::{train, Sample, TrainHistory};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_csv, aggregate_reports, confusion, metrics_from_confusion, per_scene_csv, pooled_confusion,
    write_text, AggregateRow, MetricReport,
};
use crate::postproc::{adaptive_postprocess, adaptive_postprocess_multiclass};
use crate::raster::{
    load_band_stack, load_mask, normalize, save_mask, stitch, tile_planes, BandStack, MaskRaster, MaskScheme,
    NormStats, Planes,
};
use crate::seed::{stream, sub_seed};
use crate::synthetic;
use crate::teacher::{write_precomputed, EnsembleTeacher, LiveTeacher, PrecomputedLogits, TeacherBackend};
use crate::unet::{load_weights, save_weights, Mode, Tensor, UNet};

pub const SYNTHETIC_TRAIN: usize = 16;
pub const SYNTHETIC_TEST: usize = 8;
pub const SYNTHETIC_SIZE: usize = 64;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug)]
pub enum PrepareSource {
    /// The bundled generator: 16 train and 8 test 64×64 scenes.
    Synthetic { seed: u64 },
    /// A directory of `<id>.cbsk` images with matching `<id>.cmsk` masks.
    Raw(PathBuf),
}

/// Writes prepared splits under `<out>/data/`. Synthetic input yields
/// `train` and `test`; raw input yields the single split `split`.
pub fn cmd_prepare(source: &PrepareSource, out: &Path, split: &str) -> Result<Vec<DatasetDir>> {
    let data = out.join("data");
    match source {
        PrepareSource::Synthetic { seed } => {
            let scenes = synthetic::generate(*seed, SYNTHETIC_TRAIN + SYNTHETIC_TEST, SYNTHETIC_SIZE, "syn")?;
            let entries: Vec<(String, BandStack, MaskRaster)> =
                scenes.into_iter().map(|s| (s.id, s.stack, s.mask)).collect();
            let (train, test) = entries.split_at(SYNTHETIC_TRAIN);
            Ok(vec![
                write_dataset(data.join("train"), train)?,
                write_dataset(data.join("test"), test)?,
            ])
        }
        PrepareSource::Raw(dir) => {
            let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut ids = Vec::new();
            for entry in listing {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.extension().is_some_and(|e| e == "cbsk") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            ids.sort();
            if ids.is_empty() {
                return Err(Error::Data(format!("no .cbsk images in {}", dir.display())));
            }
            let mut entries = Vec::new();
            for id in ids {
                let stack = load_band_stack(dir.join(format!("{id}.cbsk")))?;
                let mask_path = dir.join(format!("{id}.cmsk"));
                if !mask_path.exists() {
                    return Err(Error::Data(format!("pair {id}: missing mask {}", mask_path.display())));
                }
                let mask = load_mask(&mask_path)?;
                check_pair(&id, &stack, &mask)?;
                entries.push((id, stack, mask));
            }
            Ok(vec![write_dataset(data.join(split), &entries)?])
        }
    }
}

fn training_data(cfg: &RunConfig) -> Result<(NormStats, Vec<Sample>, Vec<Sample>)> {
    let train_dir = DatasetDir::open(cfg.train_dir())?;
    let stats = train_dir.norm_stats()?;
    let train_samples = train_dir.samples(&stats)?;
    let val_samples = match cfg.val_dir() {
        Some(dir) => DatasetDir::open(dir)?.samples(&stats)?,
        None => Vec::new(),
    };
    Ok((stats, train_samples, val_samples))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub weights: PathBuf,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub param_count: usize,
}

fn save_run(dir: &Path, model: &UNet, history: &TrainHistory, stats: &NormStats) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let weights = dir.join("weights.cwgt");
    save_weights(model, &weights)?;
    history.save_csv(dir.join("history.csv"))?;
    stats.save(dir.join(NORM_STATS))?;
    Ok(weights)
}

/// Trains the teacher architecture with the plain cross-entropy loss.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TrainSummary> {
    let (stats, train_set, val_set) = training_data(cfg)?;
    let model = UNet::new(&cfg.teacher.spec, sub_seed(cfg.seed, stream::TEACHER_INIT))?;
    let param_count = model.count_parameters();
    let out = train(model, &train_set, &val_set, None, &cfg.teacher.train)?;
    let weights = save_run(&cfg.teacher_dir(), &out.model, &out.history, &stats)?;
    Ok(TrainSummary {
        weights,
        history: out.history,
        best_epoch: out.best_epoch,
        param_count,
    })
}

/// The configured teacher weights as one backend (an ensemble when several).
pub fn live_teacher(cfg: &RunConfig) -> Result<Box<dyn TeacherBackend>> {
    let mut members: Vec<Box<dyn TeacherBackend>> = Vec::new();
    for path in cfg.teacher_weight_paths() {
        members.push(Box::new(LiveTeacher::new(load_weights(&path, &cfg.teacher.spec)?)));
    }
    if members.len() == 1 {
        Ok(members.pop().expect("one member"))
    } else {
        Ok(Box::new(EnsembleTeacher::new(members, cfg.teacher.fusion)?))
    }
}

/// Writes teacher logits for every training patch to `<out>/teacher_logits`.
pub fn cmd_export_logits(cfg: &RunConfig) -> Result<PathBuf> {
    let teacher = live_teacher(cfg)?;
    let (_, train_set, _) = training_data(cfg)?;
    let logits = train_set
        .iter()
        .map(|s| Ok((s.id.as_str(), teacher.teacher_logits(&s.patch())?)))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.logits_dir();
    write_precomputed(&dir, logits)?;
    Ok(dir)
}

/// Trains the student; alpha = 1 runs without any teacher.
pub fn cmd_distill(cfg: &RunConfig) -> Result<TrainSummary> {
    let (stats, train_set, val_set) = training_data(cfg)?;
    let teacher: Option<Box<dyn TeacherBackend>> = if cfg.distill.alpha < 1.0 {
        Some(match cfg.teacher.source {
            TeacherSource::Precomputed => Box::new(PrecomputedLogits::open(cfg.logits_dir(), cfg.student.num_classes)?),
            TeacherSource::Live => live_teacher(cfg)?,
        })
    } else {
        None
    };
    let model = UNet::new(&cfg.student, sub_seed(cfg.seed, stream::INIT))?;
    let param_count = model.count_parameters();
    let out = train(model, &train_set, &val_set, teacher.as_deref(), &cfg.distill)?;
    let weights = save_run(&cfg.student_dir(), &out.model, &out.history, &stats)?;
    Ok(TrainSummary {
        weights,
        history: out.history,
        best_epoch: out.best_epoch,
        param_count,
    })
}

/// Tiled eval-mode logits for a normalized scene.
pub fn scene_logits(model: &UNet, input: &Planes, patch_size: usize, stride: usize) -> Result<(Planes, usize)> {
    let (layout, tiles) = tile_planes(input, patch_size, stride)?;
    let outputs = tiles
        .iter()
        .map(|t| Ok(model.forward(&Tensor::from_planes([t])?, Mode::Eval)?.sample_planes(0)))
        .collect::<Result<Vec<_>>>()?;
    Ok((stitch(&outputs, &layout, input.height, input.width)?, tiles.len()))
}

/// Tiled inference, argmax and optional adaptive post-processing.
pub fn predict_scene(
    model: &UNet,
    input: &Planes,
    scheme: MaskScheme,
    patch_size: usize,
    stride: usize,
    postprocess: bool,
) -> Result<(MaskRaster, usize)> {
    let (logits, tiles) = scene_logits(model, input, patch_size, stride)?;
    let classes = u8::try_from(logits.channels).map_err(|_| Error::Shape("too many classes".into()))?;
    let mask = MaskRaster::with_classes(input.height, input.width, classes, scheme, logits.argmax())?;
    let mask = match (postprocess, scheme) {
        (false, _) => mask,
        (true, MaskScheme::BinaryCloud) => adaptive_postprocess(&mask)?,
        (true, MaskScheme::KzSix) => adaptive_postprocess_multiclass(&mask, &logits)?,
    };
    Ok((mask, tiles))
}

fn student_for_inference(cfg: &RunConfig) -> Result<(UNet, NormStats)> {
    let weights = cfg.student_weight_path();
    let model = load_weights(&weights, &cfg.student)?;
    let beside = weights.with_file_name(NORM_STATS);
    let stats = if beside.exists() {
        NormStats::load(beside)?
    } else {
        DatasetDir::open(cfg.train_dir())?.norm_stats()?
    };
    Ok((model, stats))
}

fn normalized_input(test: &DatasetDir, id: &str, stats: &NormStats) -> Result<Planes> {
    Ok(normalize(&test.image(id)?, stats)?.into_planes())
}

/// Writes `<out>/predictions/<id>.cmsk` for every test scene.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (model, stats) = student_for_inference(cfg)?;
    let test = DatasetDir::open(cfg.test_dir())?;
    let dir = cfg.predictions_dir();
    ensure_dir(&dir)?;
    let mut written = Vec::new();
    let mut manifest = String::new();
    for id in &test.ids {
        let input = normalized_input(&test, id, &stats)?;
        let (mask, _) = predict_scene(&model, &input, cfg.scheme, cfg.patch_size, cfg.stride, cfg.postprocess_enabled())
            .map_err(|e| e.context(format!("predicting {id}")))?;
        let path = dir.join(format!("{id}.cmsk"));
        save_mask(&mask, &path)?;
        written.push(path);
        manifest.push_str(id);
        manifest.push('\n');
    }
    write_text(dir.join("manifest.txt"), &manifest)?;
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct EvaluationSummary {
    pub reports: Vec<MetricReport>,
    pub aggregate: Vec<AggregateRow>,
    /// `(class, pooled JI)`.
    pub pooled: Vec<(u8, f64)>,
}

/// Scores predictions against test masks; writes `<out>/reports/*.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationSummary> {
    let test = DatasetDir::open(cfg.test_dir())?;
    let pred_dir = cfg.predictions_dir();
    let ignore = cfg.scheme.ignore_ids();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for id in &test.ids {
        let pred = load_mask(pred_dir.join(format!("{id}.cmsk")))?;
        let gt = test.mask(id)?;
        if !pred.same_shape(&gt) {
            return Err(Error::Data(format!("prediction for {id} does not match its mask shape")));
        }
        preds.push(pred);
        gts.push(gt);
    }
    let mut reports = Vec::new();
    for ((id, pred), gt) in test.ids.iter().zip(&preds).zip(&gts) {
        for &class in cfg.scheme.evaluated_classes() {
            reports.push(metrics_from_confusion(&confusion(pred, gt, class, ignore)?).with_scene(id.clone()));
        }
    }
    let aggregate = aggregate_reports(&reports)?;
    let pooled = cfg
        .scheme
        .evaluated_classes()
        .iter()
        .map(|&c| Ok((c, metrics_from_confusion(&pooled_confusion(&preds, &gts, c, ignore)?).ji)))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.reports_dir();
    ensure_dir(&dir)?;
    write_text(dir.join("per_scene.csv"), &per_scene_csv(&reports))?;
    write_text(dir.join("aggregate.csv"), &aggregate_csv(&aggregate))?;
    let mut pooled_csv = String::from("class,pooled_ji\n");
    for (c, ji) in &pooled {
        pooled_csv.push_str(&format!("{c},{ji:.6}\n"));
    }
    write_text(dir.join("pooled.csv"), &pooled_csv)?;
    Ok(EvaluationSummary {
        reports,
        aggregate,
        pooled,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneLatency {
    pub scene: String,
    pub patches: usize,
    /// Median over repeats.
    pub latency_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub param_count: usize,
    pub scenes: usize,
    pub repeats: usize,
    pub patches_per_pass: usize,
    pub patches_per_sec: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub per_scene: Vec<SceneLatency>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times full-scene prediction over the test split; writes `<out>/benchmark.json`.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let (model, stats) = student_for_inference(cfg)?;
    let test = DatasetDir::open(cfg.test_dir())?;
    let inputs = test
        .ids
        .iter()
        .map(|id| normalized_input(&test, id, &stats))
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(cfg.benchmark_repeats); inputs.len()];
    let mut patches = vec![0; inputs.len()];
    // untimed warm-up pass
    if let Some(input) = inputs.first() {
        predict_scene(&model, input, cfg.scheme, cfg.patch_size, cfg.stride, cfg.postprocess_enabled())?;
    }
    let mut total_secs = 0.0;
    for _ in 0..cfg.benchmark_repeats {
        for (i, input) in inputs.iter().enumerate() {
            let start = Instant::now();
            let (_, n) = predict_scene(&model, input, cfg.scheme, cfg.patch_size, cfg.stride, cfg.postprocess_enabled())?;
            let secs = start.elapsed().as_secs_f64();
            total_secs += secs;
            times[i].push(secs * 1e3);
            patches[i] = n;
        }
    }
    let per_scene: Vec<SceneLatency> = test
        .ids
        .iter()
        .zip(times.iter_mut())
        .zip(&patches)
        .map(|((id, t), &n)| SceneLatency {
            scene: id.clone(),
            patches: n,
            latency_ms: median(t),
        })
        .collect();
    let patches_per_pass: usize = patches.iter().sum();
    let mut lat: Vec<f64> = per_scene.iter().map(|s| s.latency_ms).collect();
    let report = BenchmarkReport {
        param_count: model.count_parameters(),
        scenes: inputs.len(),
        repeats: cfg.benchmark_repeats,
        patches_per_pass,
        patches_per_sec: (patches_per_pass * cfg.benchmark_repeats) as f64 / total_secs.max(1e-12),
        mean_latency_ms: lat.iter().sum::<f64>() / lat.len() as f64,
        median_latency_ms: median(&mut lat),
        per_scene,
    };
    ensure_dir(&cfg.output_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    write_text(cfg.output_dir.join("benchmark.json"), &json)?;
    Ok(report)
}
