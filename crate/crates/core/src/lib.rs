//! Joint instance and semantic segmentation of point clouds, trained with an
//! auxiliary label-propagation self-prediction objective.

pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod selfpred;

pub use error::{Error, Result};
