//! End-to-end commands over prepared dataset directories.
//!
//! Output layout under the run directory:
//!
//! ```text
//! data/{train,val,test}/   prepared splits
//! teacher/                 weights.cwgt, history.csv, norm_stats.txt
//! teacher_logits/          <id>.cbsk + manifest.txt
//! student/                 weights.cwgt, history.csv, norm_stats.txt
//! predictions/             <id>.cmsk + manifest.txt
//! reports/                 per_scene.csv, aggregate.csv, pooled.csv
//! benchmark.json
//! ```

mod commands;
mod config;
mod dataset;

pub use commands::{
    cmd_benchmark, cmd_distill, cmd_evaluate, cmd_export_logits, cmd_predict, cmd_prepare, cmd_train_teacher,
    live_teacher, predict_scene, scene_logits, BenchmarkReport, EvaluationSummary, PrepareSource, SceneLatency,
    TrainSummary, SYNTHETIC_SIZE, SYNTHETIC_TEST, SYNTHETIC_TRAIN,
};
pub use config::{RunConfig, TeacherConfig, TeacherSource};
pub use dataset::{check_pair, write_dataset, DatasetDir, MANIFEST, NORM_STATS};
