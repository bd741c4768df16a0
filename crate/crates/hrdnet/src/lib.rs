//! HRDNet-style small-object detector: an image pyramid feeds parallel
//! backbones of increasing depth (MD-IPN), and a multi-scale FPN fuses the
//! resulting feature groups into one detection pyramid.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod head;
pub mod model;
pub mod msfpn;
pub mod nn;
pub mod postprocess;
pub mod streams;
pub mod training;

pub use error::{Error, Result};
