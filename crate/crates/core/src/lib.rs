//! Two-stage detection, anatomical labeling and scoring of arterial and
//! valvular calcifications in chest CT.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod imagegrid;
pub mod phantom;
pub mod pipeline;
pub mod scoring;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
