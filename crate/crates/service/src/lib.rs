//! Experiment server for the magnifier person-search study.
//!
//! Surveys are assembled from an image pool, workers go through consent,
//! instructions, samples and practice before answering 13 questions, and
//! finished sessions are reviewed before their records count.

pub mod engine;
pub mod http;
pub mod pool;
pub mod review;
pub mod session;
pub mod store;
pub mod survey;

pub use engine::{Engine, ServiceConfig, ServiceError};
pub use pool::ImagePool;
pub use survey::{assemble_surveys, check_survey, Survey, SurveyStatus};
