//! Confusion counts, per-scene metrics and mean/median/CI aggregation.

use std::fmt;
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::raster::MaskRaster;

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class: u8,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Pixels whose ground truth is an ignore class.
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(pred: &[u8], gt: &[u8], class: u8, ignore: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut cm = Self {
            class,
            ..Self::default()
        };
        for (&p, &g) in pred.iter().zip(gt) {
            if ignore.contains(&g) {
                cm.ignored += 1;
                continue;
            }
            match (p == class, g == class) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn + self.ignored
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.ignored += other.ignored;
    }
}

pub fn confusion(pred: &MaskRaster, gt: &MaskRaster, class_id: u8, ignore: &[u8]) -> Result<ConfusionMatrix> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if class_id >= gt.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside {} classes",
            gt.classes()
        )));
    }
    ConfusionMatrix::from_labels(pred.data(), gt.data(), class_id, ignore)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Ji,
    Pr,
    Re,
    Spe,
    Oa,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Ji, Metric::Pr, Metric::Re, Metric::Spe, Metric::Oa];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ji => "ji",
            Metric::Pr => "pr",
            Metric::Re => "re",
            Metric::Spe => "spe",
            Metric::Oa => "oa",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Metrics whose denominator was zero; their reported value is 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UndefinedFlags(u8);

impl UndefinedFlags {
    pub fn set(&mut self, m: Metric) {
        self.0 |= m.bit();
    }

    pub fn contains(self, m: Metric) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for UndefinedFlags {
    /// `;`-separated names such as `spe_undefined`, empty when none.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = Metric::ALL
            .iter()
            .filter(|m| self.contains(**m))
            .map(|m| format!("{}_undefined", m.name()))
            .collect();
        f.write_str(&names.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scene: String,
    pub class: u8,
    pub ji: f64,
    pub pr: f64,
    pub re: f64,
    pub spe: f64,
    pub oa: f64,
    pub undefined: UndefinedFlags,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Ji => self.ji,
            Metric::Pr => self.pr,
            Metric::Re => self.re,
            Metric::Spe => self.spe,
            Metric::Oa => self.oa,
        }
    }

    /// The value, or `None` when it was undefined.
    pub fn defined(&self, m: Metric) -> Option<f64> {
        (!self.undefined.contains(m)).then(|| self.get(m))
    }

    pub fn with_scene(mut self, scene: impl Into<String>) -> Self {
        self.scene = scene.into();
        self
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricReport {
    let mut undefined = UndefinedFlags::default();
    let mut ratio = |num: u64, den: u64, m: Metric| {
        if den == 0 {
            undefined.set(m);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let ji = ratio(cm.tp, cm.tp + cm.fp + cm.fn_, Metric::Ji);
    let pr = ratio(cm.tp, cm.tp + cm.fp, Metric::Pr);
    let re = ratio(cm.tp, cm.tp + cm.fn_, Metric::Re);
    let spe = ratio(cm.tn, cm.tn + cm.fp, Metric::Spe);
    let oa = ratio(cm.tp + cm.tn, cm.tp + cm.tn + cm.fp + cm.fn_, Metric::Oa);
    MetricReport {
        scene: String::new(),
        class: cm.class,
        ji,
        pr,
        re,
        spe,
        oa,
        undefined,
    }
}

/// Mean, median and 95% t-interval of per-scene values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in aggregate".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let half = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        t * var.sqrt() / (n as f64).sqrt()
    };
    Ok(Aggregate {
        n,
        mean,
        median,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub class: u8,
    pub metric: Metric,
    pub stats: Aggregate,
}

/// Aggregates each (class, metric) over scenes, skipping undefined values.
/// Pairs with no defined value produce no row.
pub fn aggregate_reports(reports: &[MetricReport]) -> Result<Vec<AggregateRow>> {
    let mut classes: Vec<u8> = reports.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rows = Vec::new();
    for class in classes {
        for metric in Metric::ALL {
            let values: Vec<f64> = reports
                .iter()
                .filter(|r| r.class == class)
                .filter_map(|r| r.defined(metric))
                .collect();
            if !values.is_empty() {
                rows.push(AggregateRow {
                    class,
                    metric,
                    stats: aggregate(&values)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Counts summed over all scenes.
pub fn pooled_confusion(preds: &[MaskRaster], gts: &[MaskRaster], class_id: u8, ignore: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = ConfusionMatrix {
        class: class_id,
        ..ConfusionMatrix::default()
    };
    for (p, g) in preds.iter().zip(gts) {
        total.merge(&confusion(p, g, class_id, ignore)?);
    }
    Ok(total)
}

/// JI on pooled counts (0 when undefined).
pub fn pooled_jaccard(preds: &[MaskRaster], gts: &[MaskRaster], class_id: u8, ignore: &[u8]) -> Result<f64> {
    Ok(metrics_from_confusion(&pooled_confusion(preds, gts, class_id, ignore)?).ji)
}

pub fn per_scene_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("scene,class,ji,pr,re,spe,oa,flags\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.scene, r.class, r.ji, r.pr, r.re, r.spe, r.oa, r.undefined
        ));
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("class,metric,mean,median,ci_low,ci_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.class,
            r.metric.name(),
            r.stats.mean,
            r.stats.median,
            r.stats.ci_low,
            r.stats.ci_high
        ));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
