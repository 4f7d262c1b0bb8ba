//! Learning and analysing local image-patch descriptors trained with a
//! hybrid-similarity triplet loss.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tensor tape,
//! [`simgeo`] the similarity calculus, [`net`] the FRN/TLU network, [`loss`]
//! the objectives and mining, [`train`] the optimisation loop, [`data`] and
//! [`metrics`] ingestion and evaluation, and [`gradlab`] the analysis tools.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradlab;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod seed;
pub mod simgeo;
pub mod train;

pub use error::{Error, Result};
