//! Exteroceptive observations and their timing model.

pub mod depth;
pub mod latency;
pub mod noise;
pub mod scandots;

pub use depth::{
    normalize_depth, preprocess_depth, render_depth, render_raw, Camera, CameraPose, DepthImage, ProcessedDepth,
    RawDepth, DEPTH_COLS, DEPTH_ROWS,
};
pub use latency::{jittered_capture_times, CaptureClock, LatencyQueue, DEPTH_LATENCY, PROPRIO_LATENCY};
pub use noise::{noisy_elevation, ElevationNoise, NoiseConfig};
pub use scandots::{sample_scandots, BasePose, ScandotPattern};
