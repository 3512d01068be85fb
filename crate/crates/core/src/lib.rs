//! Biologically disentangled variational autoencoder: a masked bank of
//! pathway-aligned encoders feeding a shared decoder and a response
//! classifier, plus the statistics used to interpret the learned latents.

pub mod bdvae;
pub mod cohort;
pub mod datamodel;
pub mod latalloc;
pub mod maskspec;
pub mod ndmath;
pub mod objective;
pub mod stats;
pub mod synthgen;
pub mod trainer;
