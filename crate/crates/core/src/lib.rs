//! Coarse-to-fine localization of a position described in text within a
//! city-scale point cloud.
//!
//! The coarse stage retrieves cubic submaps with a Cauchy-mixture window
//! transformer ([`cmm_former`], [`coarse`]); the fine stage regresses the
//! position inside a retrieved submap with direction-aware attention
//! ([`fine`]). [`harness`] wires both into reproducible experiments.
//!
//! ```
//! use cmmloc::cmm_former::cauchy_matrix;
//!
//! let w = cauchy_matrix(4, 1.0).unwrap();
//! assert!((w[[0, 0]] - 1.0 / std::f64::consts::PI).abs() < 1e-12);
//! assert_eq!(w[[0, 3]], w[[3, 0]]);
//! ```

pub mod autodiff;
pub mod cmm_former;
pub mod coarse;
pub mod encoders;
pub mod error;
pub mod fine;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod scene;
pub mod util;

pub use error::{Error, Result};

/// The guide, compiled so its examples run as doc-tests.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    pub mod chapter1 {}
    #[doc = include_str!("../../../book/src/windows.md")]
    pub mod chapter2 {}
    #[doc = include_str!("../../../book/src/consolidation.md")]
    pub mod chapter3 {}
    #[doc = include_str!("../../../book/src/coarse.md")]
    pub mod chapter4 {}
    #[doc = include_str!("../../../book/src/fine.md")]
    pub mod chapter5 {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod chapter6 {}
}
