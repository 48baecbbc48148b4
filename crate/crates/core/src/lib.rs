// `Real` is f32 under the `f32` feature, so casts to it are not redundant there.
#![allow(clippy::unnecessary_cast)]

pub mod denoiser;
pub mod geometry;
pub mod params;
pub mod scheduler;
pub mod tensor;
pub mod volume;
pub mod synthdata;
pub mod trainer;
pub mod image;
pub mod metrics;
pub mod config;
pub mod pipeline;

#[cfg(test)]
mod properties;
