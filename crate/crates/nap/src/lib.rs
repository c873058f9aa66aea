pub mod architecture;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod diffcore;
pub mod distribution;
pub mod environment;
pub mod evaluate;
pub mod sparsity;
pub mod tasks;
pub mod trainer;
