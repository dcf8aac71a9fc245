//! Radio sensing with a ceiling-mounted large intelligent surface (LIS).
//!
//! The crate simulates the narrowband signal received at every element of a
//! dense planar array, forms a radio map with a near-field matched filter and
//! extracts active transmitters and passive humans from that map.
//!
//! Modules, bottom up:
//!
//! * [`scene`]: room, array, emitters, scatterers, humans; pixel/world mapping.
//! * [`channel`]: line-of-sight plus virtual-source field synthesis and noise.
//! * [`radiomap`]: spherical-wave kernel design and FFT matched filtering.
//! * [`active`]: peak extraction and transmitter counting.
//! * [`passive`]: binarization, template removal, masking, labeling.
//! * [`evaluation`]: matching, ECDFs and the Monte-Carlo harness.
//! * [`cli`]: the `lisense` command-line front end.

pub mod active;
pub mod channel;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod passive;
pub mod pgm;
pub mod radiomap;
pub mod scene;
pub mod seed;

pub use error::{Result, SenseError};
pub use grid::ComplexGrid;
pub use radiomap::RadioMap;
pub use scene::ScenarioConfig;
