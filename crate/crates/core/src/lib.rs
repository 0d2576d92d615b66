//! Algorithmic machinery for multi-teacher agglomerative distillation:
//! teacher standardization with fidelity measurement ([`phis`]), strided
//! bipartite token merging ([`tome`]), mosaic packing for fixed-resolution
//! teachers ([`mosaic`]), a scale-equivariance metric ([`scale_eq`]) and a
//! small multi-resolution distillation loop with synthetic teachers
//! ([`distill`]).

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod error;
pub mod fmap;
pub mod io;
pub mod linalg;
pub mod mosaic;
pub mod pca;
pub mod phis;
pub mod scale_eq;
pub mod synth;
pub mod tome;

pub use error::{Error, Result};
pub use fmap::{bilinear_resize, channel_stats, ChannelStats, FeatureMap};
pub use linalg::{sym_eig, Matrix, SymEig};
pub use mosaic::MosaicLayout;
pub use pca::{pca_project, PcaProjection};
pub use phis::{FidelityReport, PhiSTransform};
pub use scale_eq::{scale_variance, Direction};
pub use tome::{MergePlan, SinkLayout, TokenGrid};
