pub mod c2f;
pub mod codec;
pub mod dataset;
pub mod draw;
pub mod eval;
pub mod geometry;
pub mod keypoint;
pub mod policy;
pub mod render;
pub mod samples;
pub mod seed;
pub mod viewpoint;
pub mod world;
