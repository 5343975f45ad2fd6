//! Master-face search by latent variable evolution.
//!
//! A linear eigenface decoder maps latent vectors to face images, a PCA
//! embedding with cosine similarity acts as the face matcher, and CMA-ES
//! searches the latent space for an image that matches as many enrolled
//! identities as possible.

pub mod cmaes;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod lve;
pub mod matcher;
pub mod modelio;
pub mod numerics;
pub mod pgm;
pub mod types;

pub use cmaes::{Candidate, CmaParams, CmaRng, CmaSnapshot, CmaState, RestartReason};
pub use data::{Gallery, GalleryEntry, Split, SynthSpec};
pub use error::{Error, ManifestError, Result};
pub use generator::EigenfaceDecoder;
pub use lve::{LveConfig, LveOutcome, MasterFaceRecord, RunLog, TemplateSet};
pub use matcher::{DecisionThreshold, EmbeddingModel, FeatureMap, MatchScore};
pub use types::{FaceImage, LatentVector};
