pub mod eval;
pub mod glp;
pub mod kg;
pub mod model;
pub mod query;
pub mod retrieve;
pub mod robustness;
pub mod structure;
pub mod synthetic;
pub mod tensor;
pub mod train;
