//! Transmitter-resolved, query-conditioned radio map estimation.
//!
//! The crate bundles a synthetic scenario generator and dataset format
//! ([`datahub`]), classical kriging priors ([`kriging_prior`]), a small
//! reverse-mode array kernel ([`numcore`]), the hierarchical graph attention
//! encoder ([`encoders`], [`hgat`]) and the direct / residual / gated
//! estimation regimes ([`regimes`]).

pub mod error;
pub mod datahub;
pub mod encoders;
pub mod geo_index;
pub mod hgat;
pub mod kriging_prior;
pub mod numcore;
pub mod regimes;

pub use error::{Error, Result};
pub use geo_index::{Point2, PairGeometry, SpatialIndex};
