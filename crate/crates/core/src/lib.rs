pub mod cli;
pub mod compute;
pub mod encoder;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod sampler;
