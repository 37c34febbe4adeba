//! Latent distribution adjusting for binary (Live/Spoof) classification.
//!
//! Each class is represented by several unit-norm prototypes on the
//! embedding hypersphere. A small embedding network feeds a multi-prototype
//! head trained with an angular-margin loss and prototype-center
//! regularizers. After training, redundant prototypes are pruned by a
//! greedy density rule, and new domains are absorbed by appending
//! class-mean prototypes.
//!
//! Class index 0 is Live (bona fide) and 1 is Spoof (attack) everywhere.

pub mod adaptation;
pub mod aps;
pub mod error;
pub mod experiments;
pub mod head;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{Class, LdaConfig, PrototypeBank};
pub use linalg::Matrix;
pub use model::MlpParams;
pub use synthdata::{LabeledSample, MixtureSpec};
