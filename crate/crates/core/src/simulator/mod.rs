//! Synthetic widefield ODMR: NV placement around a grain boundary, optics and
//! photon-counting rendering of frequency-swept image stacks.

mod render;
mod scene;

pub use render::{
    psf_kernel, render_high_field_stack, render_stack, GroundTruth, PsfKernel, Rendered,
    SweepSettings,
};
pub use scene::{
    BackgroundModel, BoundaryGeometry, GrainBoundaryModel, LineModel, NvEmitter, Optics,
    Population, Region, Scene, SceneDescription, StrainSign, MAX_STRAIN,
};
