pub mod analysis;
pub mod config;
pub mod data;
pub mod generate;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;
