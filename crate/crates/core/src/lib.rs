pub mod dataset;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod report;
pub mod training;
