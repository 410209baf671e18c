pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod reduce;
pub mod sample;
