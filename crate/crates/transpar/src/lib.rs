//! Transferable-parameter learning for unsupervised domain adaptation.
//!
//! Trains a small feature-extractor / classifier / domain-discriminator
//! network on synthetic distribution-shift tasks in two stages: first a
//! domain probe on frozen features estimates the proxy A-distance and the
//! transfer ratio, then training partitions each module's parameters per
//! iteration into transferable ones (gradient + weight-decay updates) and
//! untransferable ones (decay toward zero only).

pub mod data;
pub mod diffcore;
pub mod discrepancy;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
