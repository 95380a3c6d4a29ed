//! Matrix-weighted martingale square functions on finite filtrations.
//!
//! The crate models a finite filtered probability space as a refining
//! partition tree, builds reducing matrices for matrix `A_p` weights,
//! evaluates square functions, maximal functions and sparse operators,
//! constructs the stopping-time family of principal sets, and checks the
//! pointwise and norm inequalities that connect them.

pub mod cli;
pub mod ellipsoid;
pub mod experiments;
pub mod error;
pub mod filtration;
pub mod linalg;
pub mod operators;
pub mod principal;
pub mod random;
pub mod suite;
pub mod weights;

pub use error::{Error, Result};
pub use filtration::{martingale_of, FilteredSpace, LeafFunction, LevelFunction, Martingale, TreeSpec};
pub use linalg::Mat;
