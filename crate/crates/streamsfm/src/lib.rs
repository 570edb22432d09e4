//! Reconstruction of camera geometry, static structure and 3D object
//! trajectories from two or more unsynchronized, uncalibrated camera
//! streams, given precomputed 2D feature matches and object tracklets.

pub mod camera;
pub mod cli;
pub mod dataset;
pub mod epipolar;
pub mod eval;
pub mod bundle;
pub mod reconstruct;
pub mod ply;
pub mod robust;
pub mod scene;
pub mod spline;
pub mod sync;
pub mod synth;
pub mod error;

pub use camera::{Camera, Intrinsics, Pixel, Point3, Pose, StreamMeta};
pub use error::{Error, Result};
