//! editforge: an offline-testable engine for curating and evaluating
//! instruction-based image-editing datasets.
//!
//! The library is organized around a small set of concerns:
//!
//! - [`taxonomy`] — the 22-sub-task editing taxonomy, its four
//!   categories, the basic/complex split, and the metric set each
//!   sub-task is scored on.
//! - [`model`] — shared domain records: triplets, metric vectors,
//!   preference pairs, verification verdicts.
//! - [`imaging`] — grayscale decoding, the crop-fraction admission rule,
//!   center-crop + bilinear resize, and windowed SSIM.
//! - [`scoring`] — closed-form mathematics: the geometric-mean benchmark
//!   score, alignment accuracy, facial cosine consistency, and the
//!   preference loss with analytic gradients.
//! - [`gateway`] — HTTP endpoint clients with retry/backoff, rate
//!   limiting and in-flight caps, plus a deterministic in-process mock.
//! - [`curation`] — the three-stage pipeline (instruction generation,
//!   editing, unified post-verification) with checkpointed resume and
//!   stage-volume accounting.
//! - [`bench`] — the benchmark runner and its report tables.
//! - [`cli`] / [`config`] — the operator surface.
//!
//! All model inference is delegated to pluggable endpoints; every
//! pipeline and benchmark path can run fully offline against the mock.
//!
//! # Example: scoring one benchmark case
//!
//! ```
//! use editforge::model::MetricVector;
//! use editforge::scoring::geometric_score;
//! use editforge::taxonomy::{metric_set_for, Taxonomy};
//!
//! let tax = Taxonomy::default_taxonomy();
//! let subtask = tax.classify("spatial_reasoning").unwrap();
//! let metrics = metric_set_for(&subtask); // complex: IF, NC, VQ, RA
//! assert_eq!(metrics.len(), 4);
//!
//! let v = MetricVector {
//!     if_score: Some(9.0),
//!     nc_score: Some(7.0),
//!     vq_score: Some(8.0),
//!     ra_score: Some(8.0),
//! };
//! let overall = geometric_score(&v, &metrics).unwrap();
//! assert!((overall - 7.9686).abs() < 5e-5);
//! ```
//!
//! # Example: the stage-volume ratio
//!
//! ```
//! use editforge::curation::compute_stage_ratio;
//!
//! // percentage change between consecutive stage counts, rounded to
//! // two decimals half away from zero
//! assert_eq!(compute_stage_ratio(22368563, 15651530).unwrap(), -30.03);
//! ```

pub mod bench;
pub mod cli;
pub mod config;
pub mod curation;
pub mod gateway;
pub mod imaging;
pub mod model;
pub mod scoring;
pub mod store;
pub mod taxonomy;
