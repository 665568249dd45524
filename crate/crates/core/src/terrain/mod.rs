//! Procedural parkour terrain: heightfields, obstacle segments and waypoint courses.

mod generate;
mod heightfield;
pub mod io;

pub use generate::{
    arrange_course, generate_terrain, CourseSpec, TerrainKind, TerrainSpec, WaypointCourse, DEFAULT_EXTENT,
    GAP_DEPTH, HURDLE_THICKNESS, RAMP_MAX_HEIGHT, SEGMENT_MARGIN, STEP_LENGTH, WAYPOINT_STANDOFF,
};
pub use heightfield::{compute_edge_mask, is_edge_source, Heightfield, CELL_SIZE, EDGE_BAND, EDGE_HEIGHT_DELTA};
