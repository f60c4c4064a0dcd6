//! Registration-guided cross-teaching for semi-supervised segmentation of
//! volumetric images, with a synthetic phantom cohort that provides exact
//! ground truth for every stage.

pub mod autograd;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod membank;
pub mod pipeline;
pub mod regsup;
pub mod seeding;
pub mod segnets;
pub mod spatreg;
pub mod synthgen;
pub mod trainkit;
pub mod volgrid;

pub use error::{Error, Result};
