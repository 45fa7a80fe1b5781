pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod model;
pub mod optim;
pub mod params;
pub mod registration;
pub mod rng;
pub mod store;
pub mod synthesis;
pub mod tensor;
pub mod trainer;
