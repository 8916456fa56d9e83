pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod net;
pub mod param;
pub mod report;
pub mod routing;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::Parameter;
pub use tensor::Tensor;
