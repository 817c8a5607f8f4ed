//! Training-free prototype calibration and class-incremental evaluation over
//! precomputed embeddings.
//!
//! The library ingests embedding files split into a data-rich base session and
//! a sequence of few-shot incremental sessions, builds per-class mean
//! prototypes, calibrates the few-shot prototypes toward the base classes they
//! resemble, and scores nearest-prototype classification over the growing
//! label space. It also ships the diagnostic metrics used to study
//! base/new-class confusion and a synthetic-data generator with known ground
//! truth.

pub mod calib;
pub mod classify;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod synth;

pub use calib::{calibrate_registry, calibrate_simteen, calibrate_teen, CalibParams, Strategy};
pub use classify::{logits, predict, predict_batch};
pub use data::{
    compute_prototype, empirical_prototypes, load_dataset, save_dataset, write_dataset, ClassId,
    Dataset, EmbeddingRecord, FeatureVector, PrototypeRegistry, Provenance, SessionLayout, Split,
};
pub use error::{Error, Result};
pub use metrics::{
    accuracy_decomposition, confidence_interval, fnr_fpr, harmonic_mean, performance_drop,
    prediction_change, tbr_tnr, ChangeAnalysis, MetricBundle, MetricOptions,
};
pub use protocol::{
    run_fscil, run_fsl, sample_episode, Episode, EpisodeSpec, FslSummary, SessionResults,
};
pub use report::{
    build_analyze_report, read_predictions, write_predictions, AnalyzeReport, FscilReport,
    FslReport, ReportFormat,
};
pub use synth::{gen_synthetic, prototype_error, GroundTruth, SynthSpec};
