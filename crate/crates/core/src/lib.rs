//! Core library for psychophysically guided aerial person detection.
//!
//! The crate is organised around the data flow of the project:
//!
//! * [`geometry`] and [`annotation`]: boxes, circular lens selections, strata
//!   and the intersection-over-union primitives everything else builds on.
//! * [`behavior`]: the JSON-lines formats for magnifier trails and final
//!   selections gathered by the survey service, with validation on ingest.
//! * [`analytics`]: human accuracy tables, the per-stratum sigma table,
//!   response time statistics, search heatmaps and scan-time projection.
//! * [`loss`]: the human penalty and composed regression loss with analytic
//!   gradients, plus a finite-difference gradient checker.
//! * [`synth`], [`regressor`], [`eval`]: a desk-scale box regression task used
//!   to compare the baseline loss against the psychophysical one under a
//!   stratified mAP evaluator.

pub mod analytics;
pub mod annotation;
pub mod behavior;
pub mod eval;
pub mod geometry;
pub mod jsonl;
pub mod loss;
pub mod regressor;
pub mod synth;

pub use annotation::{Annotation, Distance, StratumKey, Visibility};
pub use geometry::{box_iou, circle_box_iou, BBox, CircleSelection};
