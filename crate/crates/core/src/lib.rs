//! Cycle-approximate GPU simulator whose streaming multiprocessors can be
//! fused in pairs (scale-up) or split back apart (scale-out) at runtime,
//! driven by a trainable logistic-regression scalability predictor.

pub mod config;
pub mod harness;
pub mod memsys;
pub mod noc;
pub mod predictor;
pub mod reconfig;
pub mod reference;
pub mod rng;
pub mod sim;
pub mod smcore;
pub mod workload;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid kernel spec: {0}")]
    Kernel(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}
