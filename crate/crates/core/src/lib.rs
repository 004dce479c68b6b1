pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod modelkit;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod runner;
pub mod splits;
pub mod trainer;
