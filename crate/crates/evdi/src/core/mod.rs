//! Core domain types: images, events, poses, run configuration.

pub mod config;
pub mod event;
pub mod image;
pub mod pose;

pub use config::{BlurMode, CodecKind, DenoiserKind, RunConfig};
pub use event::{event_order, Event, EventStream, ExposureWindow};
pub use image::ImageBuffer;
pub use pose::{pose_lerp, quat_slerp, Pose2, QuatPose, Trajectory};
