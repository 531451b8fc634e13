//! Small transformer encoder with deterministic forward and analytic
//! backward passes, plus gradient verification utilities.

pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod params;

pub use config::ModelConfig;
pub use encoder::{attention, backward_sequence, encode_sequence, Dropout, SeqInput, Trace};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{init_params, ParamSet, Tensor};
