//! Measurement toolkit for the geometry of contrastive multimodal embedding
//! spaces: modality-gap and object/attribute-bias metrics, dimension ablation,
//! a controllable synthetic image-caption dataset (MAD), a miniature dual
//! encoder trained with symmetric InfoNCE, and the experiment harness that
//! ties them together.

pub mod ablation;
pub mod bias;
pub mod clip;
pub mod error;
pub mod gap;
pub mod harness;
pub mod mad;
pub mod store;
pub mod svg;
pub mod testkit;
pub mod toy;
pub mod vocab;
pub mod zeroshot;

pub use error::{Error, Result};
pub use store::{EmbeddingSet, GroupIndex, MetricsConfig, Modality, PairedEmbeddingSet};
