pub mod attacks;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
