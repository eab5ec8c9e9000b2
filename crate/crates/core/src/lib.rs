//! Wide-field ODMR strain imaging with nitrogen-vacancy centers.
//!
//! The crate covers the full forward and inverse pipeline:
//!
//! - [`spin_model`]: NV ground-state Hamiltonian, transition frequencies,
//!   orientation classes and ensemble averaging.
//! - [`spectrum`]: Lorentzian ODMR spectra with hyperfine structure and shot noise.
//! - [`simulator`]: synthetic wide-field image stacks of strained diamond.
//! - [`fitting`]: per-pixel double-Lorentzian least squares with confidence intervals.
//! - [`strainmap`]: binning, smoothing, strain conversion, sensitivity and 3-D assembly.
//! - [`stack`]: the image-stack container and its on-disk format.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fitting;
pub mod simulator;
pub mod spectrum;
pub mod spin_model;
pub mod stack;
pub mod strainmap;

pub use error::{Error, Result};
pub use fitting::{fit_double_lorentzian, fit_stack, FitConfig, FitGrid, FitResult, FitStatus};
pub use nalgebra::Vector3;
pub use simulator::{render_high_field_stack, render_stack, GrainBoundaryModel, Scene};
pub use spectrum::{LineShapeParams, OdmrSpectrum, SpectrumUnit};
pub use spin_model::{OrientationClass, PhysicalConstants, ResonancePair, SpinParameters};
pub use stack::ImageStack;
pub use strainmap::{SensitivityReport, StrainMap, StrainVolume};
