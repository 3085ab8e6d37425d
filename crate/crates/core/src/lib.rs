//! Bias-embedded preference model for bundle-versus-item choices.
//!
//! Users choosing between a main item and a discounted bundle are modeled with
//! prospect-theory utilities: an asymmetric value function over price
//! differences relative to a reference point, and personal power-function
//! weights that capture projection bias in the perceived probability of
//! needing the rest of the bundle later. The crate covers estimation of that
//! probability from co-purchase data, SGD learning of bias coefficients and
//! item values, closed-form bundle pricing analysis, evaluation, and synthetic
//! data generation.

pub mod analysis;
pub mod catalog;
pub mod correlation;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod learning;
pub mod model;
pub mod persist;
pub mod synth;

pub use catalog::{Bundle, BundleId, Catalog, ChoiceRecord, Item, ItemId, Label, UserId};
pub use error::{ProbeError, Result};
