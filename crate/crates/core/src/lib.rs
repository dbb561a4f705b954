//! Semi-supervised semantic segmentation with an open-vocabulary teacher for
//! out-of-distribution unlabeled images.

pub mod config;
pub mod data_synth;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod ovs_teacher;
pub mod perturb;
pub mod seeding;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{BBox, Image, LabelMap, ProbMap, BACKGROUND_ID, IGNORE_ID};
