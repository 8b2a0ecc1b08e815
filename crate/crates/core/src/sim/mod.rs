//! Deterministic top-down tabletop simulator.

pub mod episode;
pub mod instruction;
pub mod library;
pub mod raster;
pub mod render;
pub mod scene;

pub use episode::{
    compute_reward, execute_grasp, observe, Episode, EpisodeConfig, GraspOutcome, Observation, SceneDocument, Stage,
    StepResult,
};
pub use instruction::{sample_instruction, Instruction, TemplateSet};
pub use library::{Footprint, KeywordKind, KeywordTable, ObjectLibrary, ObjectSpec, Split};
pub use raster::{detect_boxes, DetectionConfig, LabelMap, ObjectBox, PixelRect};
pub use scene::{sample_scene, Layout, ObjectInstance, PlacementConfig, Scene, Workspace};
