//! Correlated multimodal variational autoencoders.
//!
//! The latent space of a [`covae::CovaeModel`] is the concatenation of one
//! block per modality, with a full-covariance Gaussian posterior and a frozen
//! correlated prior. Missing modalities are imputed by Gaussian conditioning
//! under that prior. Product-of-Experts and Mixture-of-Experts baselines share
//! the same networks and training loop.
//!
//! Everything is built on a small dense [`linalg`] layer and a matrix-valued
//! reverse-mode [`autodiff`] tape.

pub mod autodiff;
pub mod covae;
pub mod eval;
pub mod gaussian;
pub mod linalg;
pub mod nets;
pub mod par;
pub mod stats;
pub mod synthdata;
