#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod desk;
pub mod domain;
pub mod error;
pub mod gating;
pub mod layers;
pub mod model;
pub mod params;
pub mod probe;
pub mod rng;
pub mod train;
pub mod verify;

pub use domain::{Modality, Task};
pub use error::{Error, Result};
