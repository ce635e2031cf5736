pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod evaluate;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hashfield;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;
