pub mod param;
pub mod unit;
