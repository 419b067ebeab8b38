//! Weakly-supervised medical image segmentation by mixing and clustering.
//!
//! The crate is organised bottom-up:
//!
//! | module      | contents                                                        |
//! |-------------|-----------------------------------------------------------------|
//! | [`phantom`] | synthetic multi-class images, scribbles, on-disk datasets       |
//! | [`mixing`]  | intra/inter-image mixing, class-subset schedules, multi-crop    |
//! | [`sinkhorn`]| prototype scores, balanced assignment, swapped-assignment loss  |
//! | [`losses`]  | mix consistency, cluster, anatomy consistency, weak supervision |
//! | [`segnet`]  | a small encoder-decoder with a hand-written backward pass       |
//! | [`trainer`] | batch assembly, optimisation, checkpoints, logs                 |
//! | [`evalkit`] | Dice/Hausdorff, evaluation, ablation and sensitivity sweeps     |
//!
//! Data-parallel loops (batch forward/backward, per-case evaluation, per-seed
//! runs) go through [`par`], which uses rayon when the `parallel` feature is
//! enabled and plain iterators otherwise.

pub mod evalkit;
pub mod grid;
pub mod losses;
pub mod mixing;
pub mod par;
pub mod phantom;
pub mod rng;
pub mod segnet;
pub mod selfcheck;
pub mod sinkhorn;
pub mod trainer;

pub use grid::{Grid, Planes};
pub use par::Exec;
