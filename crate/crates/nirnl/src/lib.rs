//! Training-and-evaluation laboratory for cross-modal retrieval with noisy
//! labels.
//!
//! Two modality encoders project paired visual/text features into a shared
//! embedding space. Training combines a bidirectional margin-preserving loss
//! over in-batch pairs with neighbor-consensus instance refining: each epoch
//! the train set is tri-partitioned into pure / hard / noisy subsets by comparing
//! each instance's label against the argmax of its KNN soft labels in both
//! modalities, class barycenters are extracted, and subset-specific losses
//! (cross-entropy on barycenter scores, confidence-weighted cross-entropy,
//! and a mean-absolute-error term on corrected labels) are applied.
//!
//! The crate ships a synthetic two-view corpus generator, symmetric
//! label-noise injection with an auditable flip manifest, deterministic
//! train/val/test splitting, MAP / precision-recall evaluation, and a CLI
//! (`nirnl`) tying the pipeline together.

pub mod cmp;
pub mod dataio;
pub mod encoder;
pub mod eval;
pub mod nir;
pub mod numkit;
pub mod trainer;
