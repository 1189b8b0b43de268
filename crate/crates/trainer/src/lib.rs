//! Small-scale transformer trainer used to validate transfer rules on a
//! desk budget: synthetic corpus, model with manual gradients, AdamW,
//! coordinate checks, learning-rate sweeps and search/schedule executors.

pub mod checkpoint;
pub mod coordcheck;
pub mod corpus;
pub mod executors;
pub mod model;
pub mod ops;
pub mod optim;
pub mod sweep;
pub mod train;
