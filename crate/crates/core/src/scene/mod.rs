//! Synthetic stand-in for a frozen stereo foundation encoder.
//!
//! Procedurally builds labelled voxel scenes and renders the three encoder
//! outputs the rest of the pipeline consumes: a metric depth map, a stereo
//! cost volume over disparity bins and per-pixel semantic context features.

mod camera;
mod generate;
mod grid;
mod priors;
mod raycast;

pub use camera::{CameraPose, CameraRig};
pub use generate::{generate_scene, layout_boxes, mark_unobservable, SceneBox, SceneSpec};
pub use grid::{GridSpec, VoxelGrid, EMPTY, UNKNOWN};
pub use priors::{
    class_embedding, context_features_from_hits, decode_nearest_embedding, depth_to_disparity,
    disparity_to_depth, synth_context_features, synth_cost_volume, synthesize, CostVolume,
    DisparityBins, SynthConfig, SyntheticSample,
};
pub use raycast::{raycast, raycast_depth, RaycastResult};
