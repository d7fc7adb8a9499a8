//! Masked autoencoders for distribution estimation (MADE) on binary data.
//!
//! A feed-forward autoencoder whose connections are masked so that output `d`
//! only sees inputs that precede `d` in a chosen ordering. The outputs then
//! form a valid product of conditionals, and `log p(x)` is exact after a
//! single forward pass.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below fix it to `f64`, which is what the CLI and model files use.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masks;
pub mod network;
pub mod optim;
pub mod persist;
pub mod scalar;
pub mod seed;

pub use config::RunConfig;
pub use data::{Dataset, Split};
pub use error::{MadeError, Result};
pub use eval::{
    brute_force_pmf, ensemble_log_prob, gradient_check, impute, sample, test_nll, NllEstimate,
};
pub use masks::{
    build_masks, connectivity_product, make_mask_list, natural_ordering, sample_connectivity,
    sample_ordering, verify_autoregressive, Connectivity, MaskSet, Ordering, SeedRecord,
    VerificationReport,
};
pub use network::{
    forward, init_params, log_prob, loss_and_gradients, Activation, Architecture, MadeParams,
};
pub use optim::{
    optimizer_step, train, MaskPolicy, Optimizer, TrainConfig, TrainOutcome, TrainReport,
};
pub use persist::ModelFile;
pub use scalar::Scalar;

pub type Params = network::MadeParams<f64>;
pub type Grads = network::Gradients<f64>;
pub type Trace = network::ForwardTrace<f64>;
pub type OptimState = optim::OptimizerState<f64>;
