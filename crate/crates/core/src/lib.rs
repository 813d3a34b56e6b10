pub mod agents;
pub mod backends;
pub mod geometry;
pub mod llm_io;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod trail;
