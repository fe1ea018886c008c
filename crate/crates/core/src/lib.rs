pub mod config;
pub mod cli;
pub mod crossbar;
pub mod error;
pub mod kernels;
pub mod mask;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod workload;
