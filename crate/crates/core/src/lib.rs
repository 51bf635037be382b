pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod loss;
pub mod mixup;
pub mod model;
pub mod tensor;
pub mod trainer;
