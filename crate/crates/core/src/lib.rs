//! OREO: object-aware regularization for behavioral cloning under causal confusion.
//!
//! The pipeline: collect expert demonstrations from a confounded catch game ([`envsim`],
//! [`demodata`]), learn discrete object codes with a VQ-VAE ([`vqvae`]), then train a
//! policy with code-grouped feature dropout ([`regularizers`], [`policy`]). [`crlr`] is a
//! sample-reweighting baseline and [`evalviz`] scores deployments and draws attention maps.

pub mod checkpoint;
pub mod config;
pub mod crlr;
pub mod demodata;
pub mod envsim;
pub mod error;
pub mod evalviz;
pub mod nn;
pub mod policy;
pub mod regularizers;
pub mod rng;
pub mod vqvae;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use demodata::{DemoDataset, Frames, Observation};
pub use envsim::{ConfounderMode, EnvConfig, GlyphStyle, Rect};
pub use error::{Error, Result};
pub use evalviz::{Anchors, EvalReport};
pub use policy::{BcConfig, EpochRecord, Policy, PolicyArch};
pub use regularizers::{RegularizerConfig, RegularizerKind};
pub use vqvae::{CodeGrid, Vqvae, VqvaeArch};
