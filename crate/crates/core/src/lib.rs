//! Cortical thickness estimation by diffeomorphic registration of
//! partial-volume white-matter and white+gray-matter maps.
//!
//! A stationary velocity field `z` is exponentiated by scaling and squaring
//! into a forward displacement (white matter towards the pial surface) and a
//! reverse displacement. Thickness is the length of the reverse displacement
//! at the gray–white interface. `z` comes either from per-pair iterative
//! optimization ([`optim::register_iterative`]) or from a small convolutional
//! regressor trained without thickness labels ([`regressor`]).

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod regressor;
pub mod svf;
pub mod thickness;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use volume::{GridMeta, LabelVolume, ScalarVolume, VectorField};
