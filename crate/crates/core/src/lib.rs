pub mod dataset;
pub mod executor;
pub mod harness;
pub mod llm;
pub mod metrics;
mod parallel;
pub mod pipeline;
pub mod prompt;
pub mod retriever;
pub mod schema;
pub mod service;
pub mod setup;
pub mod sqltext;

pub use parallel::parallel_map;
