pub mod divergence;
pub mod risk;
pub mod model;
pub mod random;
pub mod data;
pub mod selftrain;
pub mod theory;
pub mod experiment;
pub mod report;
